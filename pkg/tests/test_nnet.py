import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lidkit import nnet as NN
from lidkit.corpusio import decode_container, encode_container

TOY = NN.TddnnConfig(input_dim=3, splice_offsets=((-1, 0, 1), (0,), (-2, 1)), hidden_dim=6,
                     pnorm_group_size=2, num_classes=4)


def _probe_gradients(model, X, Y, n_probe=40, seed=0, h=1e-5):
    _, gw, gb = NN.loss_and_grad(model, X, Y)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_probe):
        layer = int(rng.integers(model.config.num_layers))
        use_bias = rng.random() < 0.3
        params = model.biases[layer] if use_bias else model.weights[layer]
        grads = gb[layer] if use_bias else gw[layer]
        idx = tuple(int(rng.integers(s)) for s in params.shape)
        old = params[idx]
        params[idx] = old + h
        lp = NN.loss_and_grad(model, X, Y)[0]
        params[idx] = old - h
        lm = NN.loss_and_grad(model, X, Y)[0]
        params[idx] = old
        numeric = (lp - lm) / (2 * h)
        analytic = grads[idx]
        worst = max(worst, abs(numeric - analytic) / max(abs(numeric) + abs(analytic), 1e-6))
    return worst


def test_default_context():
    cfg = NN.TddnnConfig()
    assert cfg.context == (14, 8)
    assert cfg.num_layers == 6


def test_same_seed_same_parameters():
    a, b = NN.build_tddnn(TOY, 3), NN.build_tddnn(TOY, 3)
    assert all(np.array_equal(x, y) for x, y in zip(a.weights, b.weights))


def test_single_group_per_layer():
    cfg = NN.TddnnConfig(input_dim=3, splice_offsets=((0,), (0,)), hidden_dim=4,
                         pnorm_group_size=4, num_classes=3)
    model = NN.build_tddnn(cfg)
    assert model.weights[1].shape == (1, 3)
    assert NN.forward(model, np.ones((5, 3))).shape == (5, 3)


def test_pnorm_identity_and_values():
    z = np.array([[-3.0, 2.0, 0.5]])
    assert np.array_equal(NN.pnorm(z, 1, 2.0), np.abs(z))
    assert NN.pnorm(np.array([[3.0, 4.0]]), 2, 2.0)[0, 0] == 5.0
    assert NN.pnorm(np.array([[1.0, 1.0]]), 2, 3.0)[0, 0] == pytest.approx(2 ** (1 / 3))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(1, 30))
def test_posteriors_normalised(seed, T):
    rng = np.random.default_rng(seed)
    model = NN.build_tddnn(TOY, seed % 7)
    post = NN.forward(model, rng.normal(0, 5, (T, 3)))
    assert post.shape == (T, 4)
    assert np.allclose(post.sum(axis=1), 1.0, atol=1e-8)


def test_zero_output_layer_gives_uniform():
    model = NN.build_tddnn(TOY)
    model.weights[-1][:] = 0.0
    post = NN.forward(model, np.random.default_rng(0).standard_normal((7, 3)))
    assert np.allclose(post, 0.25)


def test_receptive_field():
    cfg = NN.TddnnConfig(input_dim=5, hidden_dim=16, pnorm_group_size=4, num_classes=6)
    model = NN.build_tddnn(cfg, 1)
    X = np.random.default_rng(2).standard_normal((60, 5))
    t = 30
    base = NN.forward(model, X)
    for off in (9, -15):
        Y = X.copy()
        Y[t + off] += 10.0
        assert np.array_equal(NN.forward(model, Y)[t], base[t])
    for off in (8, -14):
        Y = X.copy()
        Y[t + off] += 10.0
        assert not np.array_equal(NN.forward(model, Y)[t], base[t])


@pytest.mark.parametrize("seed", range(3))
def test_gradient_check(seed):
    rng = np.random.default_rng(seed)
    model = NN.build_tddnn(TOY, seed)
    for b in model.biases:
        b[:] = rng.normal(0, 0.1, b.shape)
    left, right = TOY.context
    X = rng.standard_normal((3, 5 + left + right, 3))
    Y = rng.integers(4, size=(3, 5))
    assert _probe_gradients(model, X, Y, seed=seed) < 1e-4


def test_gradient_check_general_p():
    cfg = NN.TddnnConfig(3, ((-1, 0), (0, 1)), 6, 3, 3.0, 3)
    rng = np.random.default_rng(5)
    model = NN.build_tddnn(cfg, 5)
    X = rng.standard_normal((2, 6, 3))
    Y = rng.integers(3, size=(2, 4))
    assert _probe_gradients(model, X, Y) < 1e-4


def test_learning_rate_schedule():
    s = NN.SgdSchedule()
    assert s.learning_rate(0) == pytest.approx(0.0015)
    assert s.learning_rate(5) == pytest.approx(0.00015)
    assert s.learning_rate(2) == pytest.approx(0.0015 * 0.1 ** (2 / 5))


def _blobs(seed, n_utts=6, T=80):
    rng = np.random.default_rng(seed)
    data = []
    for _ in range(n_utts):
        labels = np.repeat(rng.integers(2, size=T // 10), 10)
        feats = rng.standard_normal((T, 3)) * 0.5
        feats[:, 0] += np.where(labels == 1, 2.0, -2.0)
        data.append((feats, labels))
    return data


def test_train_separable_blobs():
    cfg = NN.TddnnConfig(3, ((-1, 0, 1), (0,), (0,)), 16, 2, 2.0, 2)
    sched = NN.SgdSchedule(initial_lr=0.01, final_lr=0.001, minibatch_size=64, chunk_len=8)
    model = NN.train_sgd(NN.build_tddnn(cfg, 0), _blobs(0), sched)
    test = _blobs(1)
    acc = np.mean(np.concatenate([NN.forward(model, f).argmax(1) == l for f, l in test]))
    assert acc > 0.95
    ce = [row[2] for row in model.training_log]
    assert ce[-1] < ce[0]


def test_training_is_deterministic_and_logged():
    sched = NN.SgdSchedule(num_epochs=2, minibatch_size=32, chunk_len=4)
    data = [(f, l % 4) for f, l in _blobs(2, 3, 30)]
    log = io.StringIO()
    a = NN.train_sgd(NN.build_tddnn(TOY, 0), data, sched, log)
    b = NN.train_sgd(NN.build_tddnn(TOY, 0), data, sched)
    assert all(np.array_equal(x, y) for x, y in zip(a.weights, b.weights))
    assert log.getvalue().count("epoch") == 2


def test_training_input_errors():
    model = NN.build_tddnn(TOY)
    with pytest.raises(ValueError):
        NN.train_sgd(model, [(np.zeros((10, 3)), np.zeros(9, int))])
    with pytest.raises(ValueError):
        NN.train_sgd(model, [(np.zeros((10, 3)), np.full(10, 7))])
    with pytest.raises(ValueError):
        NN.forward(model, np.zeros((10, 4)))


def test_container_roundtrip_and_estimator():
    data = _blobs(3, 2, 40)
    est = NN.TddnnClassifier(3, TOY.splice_offsets, 6, 2, num_classes=4, num_epochs=1,
                             chunk_len=4).fit([f for f, _ in data], [l for _, l in data])
    blob = encode_container(est.model_.to_container())
    model = NN.TddnnModel.from_container(decode_container(blob))
    assert encode_container(model.to_container()) == blob
    again = NN.TddnnClassifier.from_model(model)
    assert np.array_equal(again.predict_proba(data[0][0]), est.predict_proba(data[0][0]))
    assert again.predict(data[0][0]).shape == (40,)
    assert est.get_params()["hidden_dim"] == 6
