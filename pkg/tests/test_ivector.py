import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lidkit import ivector as IV
from lidkit.corpusio import decode_container, encode_container
from lidkit.stats import SuffStats, accumulate_stats


def _extractor(T, variances, means=None):
    M, D, R = T.shape
    ext = IV.IvectorExtractor(np.zeros((M, D)) if means is None else means, variances, R)
    ext._init_model()
    ext.T_ = np.asarray(T, dtype=float)
    return ext


def _random_model(rng, M, D, R):
    return _extractor(rng.standard_normal((M, D, R)), rng.uniform(0.5, 2.0, (M, D)))


def _random_stats(rng, U, M, D):
    return [SuffStats(rng.uniform(0, 20, M), rng.standard_normal((M, D)) * 3, True)
            for _ in range(U)]


def dense_posterior(ext, s):
    """Supervector form: L = I + T' N S^-1 T, w = L^-1 T' S^-1 F."""
    M, D, R = ext.T_.shape
    T = ext.T_.reshape(M * D, R)
    prec = 1.0 / ext.variances_.reshape(-1)
    N = np.repeat(s.n, D)
    L = np.eye(R) + T.T @ (T * (N * prec)[:, None])
    w = np.linalg.solve(L, T.T @ (prec * s.f.reshape(-1)))
    return w, L


def test_scalar_closed_form():
    t, var, n, f = 0.7, 1.3, 4.0, 2.5
    ext = _extractor(np.array([[[t]]]), np.array([[var]]))
    iv = IV.extract_ivector(ext, SuffStats(np.array([n]), np.array([[f]]), True))
    expected = t / var * f / (1 + t * t / var * n)
    assert abs(iv.w[0] - expected) < 1e-12
    assert iv.precision[0, 0] == pytest.approx(1 + t * t / var * n)


def test_zero_stats_give_prior_mean():
    rng = np.random.default_rng(0)
    ext = _random_model(rng, 3, 2, 4)
    iv = IV.extract_ivector(ext, SuffStats.zeros(3, 2, centered=True))
    assert np.array_equal(iv.w, np.zeros(4))


@pytest.mark.parametrize("seed", range(10))
def test_matches_dense_oracle(seed):
    rng = np.random.default_rng(seed)
    ext = _random_model(rng, 2, 2, 2)
    for s in _random_stats(rng, 3, 2, 2):
        w, L = dense_posterior(ext, s)
        iv = IV.extract_ivector(ext, s)
        assert np.allclose(iv.w, w, atol=1e-9, rtol=0)
        assert np.allclose(iv.precision, L, atol=1e-9, rtol=0)


def test_scaling_loadings_matches_oracle():
    rng = np.random.default_rng(11)
    ext = _random_model(rng, 3, 2, 2)
    s = _random_stats(rng, 1, 3, 2)[0]
    doubled = _extractor(2 * ext.T_, ext.variances_)
    w, _ = dense_posterior(doubled, s)
    assert np.allclose(IV.extract_ivector(doubled, s).w, w, atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(1, 4), st.integers(1, 4), st.integers(1, 5))
def test_precision_is_spd(seed, M, D, R):
    rng = np.random.default_rng(seed)
    ext = _random_model(rng, M, D, R)
    for s in _random_stats(rng, 2, M, D):
        L = IV.extract_ivector(ext, s).precision
        assert np.allclose(L, L.T)
        assert np.linalg.eigvalsh(L).min() >= 1 - 1e-8


def test_uncentered_stats_are_centered_on_means():
    rng = np.random.default_rng(2)
    means = rng.standard_normal((2, 3))
    ext = _extractor(rng.standard_normal((2, 3, 2)), np.ones((2, 3)), means)
    raw = SuffStats(np.array([3.0, 1.0]), rng.standard_normal((2, 3)))
    a = IV.extract_ivector(ext, raw).w
    b = IV.extract_ivector(ext, raw.center(means)).w
    assert np.allclose(a, b)


def test_zero_first_order_drives_loadings_to_zero():
    rng = np.random.default_rng(3)
    ext = _random_model(rng, 2, 2, 3)
    stats = [SuffStats(rng.uniform(1, 5, 2), np.zeros((2, 2)), True) for _ in range(4)]
    new, _ = IV.em_iteration(ext, stats)
    assert np.allclose(new.T_, 0.0)
    assert np.array_equal(IV.extract_ivector(ext, stats[0]).w, np.zeros(3))


def test_em_step_matches_dense_accumulation():
    rng = np.random.default_rng(4)
    ext = _random_model(rng, 2, 2, 2)
    stats = _random_stats(rng, 3, 2, 2)
    C = np.zeros((2, 2, 2))
    A = np.zeros((2, 2, 2))
    for s in stats:
        w, L = dense_posterior(ext, s)
        eww = np.linalg.inv(L) + np.outer(w, w)
        for c in range(2):
            C[c] += np.outer(s.f[c], w)
            A[c] += s.n[c] * eww
    expected = np.stack([C[c] @ np.linalg.inv(A[c]) for c in range(2)])
    new, _ = IV.em_iteration(ext, stats)
    assert np.allclose(new.T_, expected, atol=1e-9)
    assert new is not ext and not np.array_equal(ext.T_, new.T_)


@pytest.mark.parametrize("seed", range(5))
def test_em_objective_monotone(seed):
    rng = np.random.default_rng(seed)
    M, D, R = 4, 3, 2
    true_T = rng.standard_normal((M, D, R))
    stats = []
    for _ in range(30):
        w = rng.standard_normal(R)
        n = rng.uniform(2, 30, M)
        mean_shift = np.einsum("cdr,r->cd", true_T, w)
        f = n[:, None] * mean_shift + np.sqrt(n)[:, None] * rng.standard_normal((M, D))
        stats.append(SuffStats(n, f, True))
    ext = IV.IvectorExtractor(np.zeros((M, D)), np.ones((M, D)), R, n_iter=5,
                              random_state=seed).fit(stats)
    h = np.array(ext.objective_history_)
    assert len(h) == 6
    assert np.all(np.diff(h) >= -1e-6 * np.abs(h[:-1]))


def test_fit_is_deterministic_and_roundtrips():
    rng = np.random.default_rng(5)
    stats = _random_stats(rng, 10, 3, 2)
    a = IV.IvectorExtractor(np.zeros((3, 2)), np.ones((3, 2)), 2, 3, random_state=1).fit(stats)
    b = IV.IvectorExtractor(np.zeros((3, 2)), np.ones((3, 2)), 2, 3, random_state=1).fit(stats)
    assert np.array_equal(a.T_, b.T_)
    c = IV.IvectorExtractor.from_container(decode_container(encode_container(a.to_container())))
    assert np.array_equal(c.transform(stats), a.transform(stats))
    assert a.transform(stats).shape == (10, 2)


def test_shape_mismatch():
    rng = np.random.default_rng(6)
    ext = _random_model(rng, 2, 2, 2)
    with pytest.raises(ValueError):
        IV.extract_ivector(ext, SuffStats.zeros(3, 2, True))
    with pytest.raises(ValueError):
        IV.em_iteration(ext, [SuffStats.zeros(2, 2, False)])


def test_supervised_gmm_hard_and_uniform():
    rng = np.random.default_rng(7)
    feats = rng.standard_normal((60, 2))
    labels = np.arange(60) % 3
    hard = np.eye(3)[labels]
    g = IV.init_supervised_gmm([(hard, feats)])
    for c in range(3):
        assert np.allclose(g.means[c], feats[labels == c].mean(axis=0))
    g = IV.init_supervised_gmm([(np.full((60, 3), 1 / 3), feats)])
    assert np.allclose(g.means, feats.mean(axis=0))


def test_supervised_gmm_weighted_moments():
    rng = np.random.default_rng(8)
    post = rng.dirichlet(np.ones(4), 50)
    feats = rng.standard_normal((50, 3))
    g = IV.init_supervised_gmm([(post[:20], feats[:20]), (post[20:], feats[20:])])
    for c in range(4):
        w = post[:, c]
        mu = (w[:, None] * feats).sum(0) / w.sum()
        var = (w[:, None] * (feats - mu) ** 2).sum(0) / w.sum()
        assert np.allclose(g.means[c], mu, atol=1e-10)
        assert np.allclose(g.variances[c], var, atol=1e-10)
    assert np.allclose(g.priors, post.sum(0) / 50)


def test_supervised_gmm_empty_class_falls_back():
    feats = np.random.default_rng(9).standard_normal((30, 2))
    post = np.zeros((30, 3))
    post[:, :2] = 0.5
    g = IV.init_supervised_gmm([(post, feats)])
    assert np.allclose(g.means[2], feats.mean(axis=0))


def test_two_language_separation():
    rng = np.random.default_rng(10)
    M, D = 8, 4
    means = rng.standard_normal((M, D)) * 3
    shift = {0: rng.standard_normal((M, D)) * 0.6, 1: rng.standard_normal((M, D)) * 0.6}
    stats, labels = [], []
    for lang in (0, 1):
        for _ in range(40):
            comp = rng.integers(M, size=300)
            x = means[comp] + shift[lang][comp] + rng.standard_normal((300, D))
            stats.append(accumulate_stats(np.eye(M)[comp], x, means=means))
            labels.append(lang)
    ext = IV.IvectorExtractor(means, np.ones((M, D)), 5, 5).fit(stats)
    W = ext.transform(stats)
    labels = np.array(labels)
    between = np.linalg.norm(W[labels == 0].mean(0) - W[labels == 1].mean(0))
    within = np.sqrt(np.mean([W[labels == k].var(0).sum() for k in (0, 1)]))
    assert between > within
