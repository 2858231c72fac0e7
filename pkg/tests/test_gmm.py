import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import logsumexp
from scipy.stats import multivariate_normal, norm

from lidkit import gmm as G
from lidkit.corpusio import decode_container, encode_container


def _mixture_data(seed, T=400, D=3, k=3):
    rng = np.random.default_rng(seed)
    centers = rng.normal(0, 4, size=(k, D))
    labels = rng.integers(k, size=T)
    return centers[labels] + rng.standard_normal((T, D)) * rng.uniform(0.3, 2.0, size=D)


def test_single_component_is_global_gaussian():
    X = _mixture_data(0)
    g = G.DiagGmm(1, 5).fit(X)
    assert np.allclose(g.means_[0], X.mean(axis=0))
    assert np.allclose(g.variances_[0], X.var(axis=0))
    assert g.weights_[0] == pytest.approx(1.0)


def test_two_well_separated_gaussians():
    rng = np.random.default_rng(1)
    X = np.concatenate([rng.normal(-5, 1, 5000), rng.normal(5, 1, 5000)])[:, None]
    g = G.DiagGmm(2, 20, random_state=3).fit(X)
    assert np.allclose(np.sort(g.means_[:, 0]), [-5, 5], atol=0.2)


@pytest.mark.parametrize("seed", range(5))
def test_em_monotone(seed):
    g = G.DiagGmm(4, 10, random_state=seed).fit(_mixture_data(seed))
    h = np.array(g.loglike_history_)
    assert len(h) == 11
    assert np.all(np.diff(h) >= -1e-6 * np.abs(h[:-1]))


def test_history_matches_score():
    X = _mixture_data(2)
    g = G.DiagGmm(3, 4).fit(X)
    assert g.loglike_history_[-1] == pytest.approx(np.sum(g.score_samples(X)))


def test_variance_floor():
    rng = np.random.default_rng(4)
    X = np.vstack([np.zeros((50, 2)), rng.standard_normal((200, 2))])
    g = G.DiagGmm(4, 10, var_floor=1e-3).fit(X)
    assert np.all(g.variances_ >= 1e-3 * g.global_var_ - 1e-15)


def test_init_errors():
    with pytest.raises(ValueError):
        G.DiagGmm(10).fit(np.random.default_rng(0).standard_normal((5, 2)))
    with pytest.raises(ValueError):
        G.DiagGmm(3).fit(np.ones((20, 2)))


def test_loglike_unit_gaussian():
    g = G.DiagGmm.from_params([1.0], [[0.0]], [[1.0]])
    assert G.loglike(g, [0.0]) == pytest.approx(-0.5 * np.log(2 * np.pi), abs=1e-15)
    values = [G.loglike(g, [x]) for x in (0.0, 0.5, 1.0, 2.0)]
    assert all(a > b for a, b in zip(values, values[1:]))
    with pytest.raises(ValueError):
        G.loglike(g, [0.0, 1.0])


def test_loglike_matches_per_component_oracle():
    rng = np.random.default_rng(5)
    w = rng.dirichlet(np.ones(4))
    mu = rng.standard_normal((4, 3))
    var = rng.uniform(0.2, 3, (4, 3))
    x = rng.standard_normal(3)
    g = G.DiagGmm.from_params(w, mu, var)
    oracle = logsumexp([np.log(w[c]) + norm.logpdf(x, mu[c], np.sqrt(var[c])).sum()
                        for c in range(4)])
    assert G.loglike(g, x) == pytest.approx(oracle, abs=1e-12)
    cov = np.array([np.diag(v) for v in var])
    full = G.FullGmm(w, mu, cov)
    assert G.loglike(full, x) == pytest.approx(oracle, abs=1e-12)


def test_full_gmm_matches_scipy():
    rng = np.random.default_rng(6)
    A = rng.standard_normal((2, 3, 3))
    cov = A @ A.transpose(0, 2, 1) + np.eye(3)
    mu = rng.standard_normal((2, 3))
    w = np.array([0.3, 0.7])
    X = rng.standard_normal((10, 3))
    full = G.FullGmm(w, mu, cov)
    oracle = logsumexp(np.stack([np.log(w[c]) + multivariate_normal(mu[c], cov[c]).logpdf(X)
                                 for c in range(2)], axis=1), axis=1)
    assert np.allclose(full.score_samples(X), oracle, atol=1e-12)


def test_diag_to_full_preserves_means_and_weights():
    X = _mixture_data(7)
    d = G.DiagGmm(3, 5).fit(X)
    f = G.diag_to_full(d, X)
    assert np.array_equal(f.means_, d.means_) and np.array_equal(f.weights_, d.weights_)
    G.check_coherent(d, f)


def test_diag_to_full_single_component_scatter():
    X = _mixture_data(8)
    d = G.DiagGmm(1, 3).fit(X)
    f = G.diag_to_full(d, X)
    z = X - d.means_[0]
    assert np.allclose(f.covariances_[0], z.T @ z / X.shape[0], atol=1e-10)


def test_diag_to_full_off_diagonals_vanish():
    rng = np.random.default_rng(9)
    n = 20000
    X = rng.standard_normal((n, 3)) * [1.0, 2.0, 0.5]
    d = G.DiagGmm.from_params([1.0], [[0, 0, 0]], [[1.0, 4.0, 0.25]])
    cov = G.diag_to_full(d, X).covariances_[0]
    sd = np.sqrt(np.outer(np.diag(cov), np.diag(cov)) / n)
    off = ~np.eye(3, dtype=bool)
    assert np.all(np.abs(cov[off]) < 3 * sd[off])


def test_covariance_floor():
    cov = np.diag([1.0, 1.0, 0.0])
    fl = G.floor_covariance(cov, 1e-4)
    assert np.linalg.eigvalsh(fl).min() >= 1e-4 * (2.0 / 3.0) - 1e-15


def _models(seed, M=8, D=3):
    rng = np.random.default_rng(seed)
    w = rng.dirichlet(np.ones(M))
    mu = rng.normal(0, 2, (M, D))
    var = rng.uniform(0.3, 2.0, (M, D))
    A = rng.standard_normal((M, D, D)) * 0.3
    cov = A @ A.transpose(0, 2, 1) + np.array([np.diag(v) for v in var])
    return G.DiagGmm.from_params(w, mu, var), G.FullGmm(w, mu, cov)


def test_tandem_full_topn_is_exact():
    d, f = _models(10)
    X = np.random.default_rng(11).normal(0, 2, (30, 3))
    assert np.allclose(G.tandem_posteriors(d, f, X, top_n=8), f.predict_proba(X),
                       atol=1e-10, rtol=0)


def test_tandem_single_component():
    d = G.DiagGmm.from_params([1.0], [[0.0, 0.0]], [[1.0, 1.0]])
    f = G.FullGmm([1.0], [[0.0, 0.0]], [np.eye(2)])
    assert G.tandem_posteriors(d, f, np.array([3.0, -1.0]), 1)[0] == 1.0


def test_tandem_matches_brute_force():
    d, f = _models(12)
    x = np.random.default_rng(13).normal(0, 2, 3)
    diag_ll = [np.log(d.weights_[c]) + norm.logpdf(x, d.means_[c],
                                                   np.sqrt(d.variances_[c])).sum()
               for c in range(8)]
    top = np.argsort(diag_ll)[::-1][:3]
    full_ll = np.array([np.log(f.weights_[c])
                        + multivariate_normal(f.means_[c], f.covariances_[c]).logpdf(x)
                        for c in top])
    expected = np.zeros(8)
    expected[top] = np.exp(full_ll - logsumexp(full_ll))
    got = G.tandem_posteriors(d, f, x, top_n=3)
    assert np.allclose(got, expected, atol=1e-12)
    assert np.count_nonzero(got) == 3


def test_tandem_rejects_incoherent_models():
    d, f = _models(14)
    d2 = G.DiagGmm.from_params(d.weights_, d.means_ + 1, d.variances_)
    with pytest.raises(ValueError):
        G.tandem_posteriors(d2, f, np.zeros(3), 2)
    with pytest.raises(ValueError):
        G.tandem_posteriors(d, f, np.zeros(3), 9)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 8))
def test_tandem_rows_normalised(seed, top_n):
    d, f = _models(seed)
    X = np.random.default_rng(seed + 1).normal(0, 3, (20, 3))
    post = G.tandem_posteriors(d, f, X, top_n)
    assert np.allclose(post.sum(axis=1), 1.0, atol=1e-8)
    assert np.all((post > 0).sum(axis=1) <= top_n)


def test_tandem_ubm_fit_and_roundtrip():
    utts = [_mixture_data(s, T=150) for s in range(6)]
    ubm = G.TandemUbm(4, ((3, 3), (0, 3)), 4, 2, random_state=1).fit(utts)
    post = ubm.predict_proba(utts[0])
    assert post.shape == (150, 4)
    c = decode_container(encode_container(ubm.to_container()))
    again = G.TandemUbm.from_container(c)
    assert np.array_equal(again.predict_proba(utts[0]), post)
    assert encode_container(again.to_container()) == encode_container(ubm.to_container())
    assert ubm.num_classes == 4


def test_diag_roundtrip_and_summary():
    g = G.DiagGmm(3, 2).fit(_mixture_data(16))
    c = decode_container(encode_container(g.to_container()))
    assert encode_container(G.DiagGmm.from_container(c).to_container()) == \
        encode_container(g.to_container())
    assert "occupancy" in g.summary()
