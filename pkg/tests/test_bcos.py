import math
import threading

import numpy as np
import pytest

from comix.bcos import (
    BcosLayer,
    BcosNetwork,
    InputEncodingSpec,
    TrainConfig,
    bce_loss,
    bcos_unit,
    collapse,
    layer_effective_matrix,
    load_model,
    loss_and_grads,
    model_bytes,
    model_from_bytes,
    network_forward,
    save_model,
    train,
)
from comix.bcos import _layer_forward
from comix.data import LabeledDataset
from comix.errors import ContractError, FormatError, TrainingError, VersionMismatchError

from conftest import random_net


# ------------------------------------------------------------------ unit


@pytest.mark.parametrize(
    "x, w, B, expected",
    [
        ((1, 0), (0, 1), 1.5, 0.0),
        ((2, 0), (3, 0), 1.5, 6.0),
        ((1, 0), (1, 1), 2.0, math.sqrt(2) * 0.5),  # |w| |cos|^2 = sqrt2 * (1/sqrt2)^2
        ((1, 2), (3, -1), 1.0, 1.0),
    ],
)
def test_bcos_unit_examples(x, w, B, expected):
    assert bcos_unit(x, w, B) == pytest.approx(expected, abs=1e-15)


def test_bcos_unit_zero_vectors_give_exact_zero():
    assert bcos_unit([0, 0, 0], [1, 2, 3], 2.5) == 0.0
    assert bcos_unit([1, 2, 3], [0, 0, 0], 0.5) == 0.0


def test_bcos_unit_sign_follows_cosine():
    assert bcos_unit([1, 0], [-2, 1], 1.5) < 0


def test_bcos_unit_dimension_mismatch():
    with pytest.raises(ContractError):
        bcos_unit([1, 2], [1, 2, 3], 1.5)


# ------------------------------------------------------ effective matrix


def test_effective_matrix_B1_is_raw_weights(rng):
    layer = BcosLayer(rng.standard_normal((4, 6)), 1.0)
    np.testing.assert_array_equal(layer_effective_matrix(layer, rng.standard_normal(6)), layer.weights)


def test_effective_matrix_orthogonal_row_is_zero():
    layer = BcosLayer(np.array([[0.0, 1.0], [1.0, 1.0]]), 2.0)
    m = layer_effective_matrix(layer, np.array([1.0, 0.0]))
    np.testing.assert_array_equal(m[0], 0.0)
    assert np.all(m[1] != 0)


def test_effective_matrix_matches_per_row_unit_oracle(rng):
    layer = BcosLayer(rng.standard_normal((3, 4)), 1.5)
    x = rng.standard_normal(4)
    oracle = np.array([bcos_unit(x, w, 1.5) for w in layer.weights])
    got = layer_effective_matrix(layer, x) @ x
    np.testing.assert_allclose(got, oracle, rtol=1e-12)


def test_effective_matrix_dimension_mismatch(rng):
    with pytest.raises(ContractError):
        layer_effective_matrix(BcosLayer(rng.standard_normal((3, 4))), np.ones(5))


# ---------------------------------------------------------------- forward


def _oracle_forward(net, x):
    h = x
    for layer in net.layers:
        h = np.array([bcos_unit(h, w, layer.exponent) for w in layer.weights])
        if layer is net.encoder_layers[-1]:
            emb = h
    return emb, h


def test_forward_single_layer_B1_is_linear(rng):
    spec = InputEncodingSpec(2, 2, 1)
    W = rng.standard_normal((5, 8))
    net = BcosNetwork([BcosLayer(W, 1.0)], BcosLayer(rng.standard_normal((3, 5)), 1.0), spec)
    x = rng.random(8)
    emb, _ = network_forward(net, x)
    np.testing.assert_allclose(emb, W @ x, atol=1e-12)


def test_forward_zero_input_gives_zeros():
    net = random_net()
    emb, logits = network_forward(net, np.zeros(net.input_spec.flat_dim))
    assert not emb.any() and not logits.any()


def test_forward_matches_layer_by_layer_oracle(rng):
    net = random_net(hidden=(6, 4), B=2.0, seed=5)
    x = rng.random(net.input_spec.flat_dim)
    emb, logits = network_forward(net, x)
    o_emb, o_logits = _oracle_forward(net, x)
    np.testing.assert_allclose(emb, o_emb, rtol=1e-12)
    np.testing.assert_allclose(logits, o_logits, rtol=1e-12)


def test_forward_rejects_wrong_dimension():
    with pytest.raises(ContractError):
        network_forward(random_net(), np.ones(3))


def test_forward_rows_do_not_depend_on_batch(rng):
    net = random_net(seed=2)
    X = rng.random((11, net.input_spec.flat_dim))
    emb, _ = network_forward(net, X)
    for i in range(len(X)):
        np.testing.assert_array_equal(emb[i], network_forward(net, X[i])[0])


def test_network_rejects_broken_chain(rng):
    spec = InputEncodingSpec(1, 2, 1)
    with pytest.raises(ContractError):
        BcosNetwork([BcosLayer(rng.random((3, 4)))], BcosLayer(rng.random((2, 5))), spec)


# --------------------------------------------------------------- collapse


def test_collapse_single_layer_B1_is_raw_weights(rng):
    spec = InputEncodingSpec(2, 2, 1)
    W = rng.standard_normal((5, 8))
    net = BcosNetwork([BcosLayer(W, 1.0)], BcosLayer(rng.standard_normal((2, 5)), 1.0), spec)
    np.testing.assert_array_equal(collapse(net, rng.random(8)).matrix, W)


@pytest.mark.parametrize("B", [1.0, 1.5, 2.0, 2.5])
def test_collapse_reproduces_embedding(rng, B):
    net = random_net(hidden=(9, 6), B=B, seed=7)
    for _ in range(20):
        x = rng.random(net.input_spec.flat_dim)
        emb, _ = network_forward(net, x)
        got = collapse(net, x).apply(x)
        assert np.linalg.norm(got - emb) / max(np.linalg.norm(emb), 1e-12) <= 1e-8


def test_collapse_two_layers_equals_explicit_product():
    spec = InputEncodingSpec(1, 2, 1)
    W1 = np.array([[0.5, -0.2, 0.1, 0.3], [0.1, 0.4, -0.3, 0.2], [-0.2, 0.1, 0.6, 0.1]])
    W2 = np.array([[0.3, -0.5, 0.2], [0.4, 0.1, -0.1]])
    net = BcosNetwork([BcosLayer(W1, 2.0), BcosLayer(W2, 2.0)], BcosLayer(np.eye(2), 2.0), spec)
    x = np.array([0.9, 0.1, 0.3, 0.7])
    h1 = np.array([bcos_unit(x, w, 2.0) for w in W1])
    oracle = layer_effective_matrix(net.encoder_layers[1], h1) @ layer_effective_matrix(net.encoder_layers[0], x)
    np.testing.assert_allclose(collapse(net, x).matrix, oracle, rtol=1e-12)


def test_collapse_zero_input_zero_rows():
    net = random_net()
    assert not collapse(net, np.zeros(net.input_spec.flat_dim)).matrix.any()


def test_concurrent_forward_and_collapse_agree(rng):
    net = random_net(seed=9)
    xs = rng.random((8, net.input_spec.flat_dim))
    expected = [collapse(net, x).matrix for x in xs]
    results = [None] * len(xs)

    def work(i):
        results[i] = collapse(net, xs[i]).matrix

    threads = [threading.Thread(target=work, args=(i,)) for i in range(len(xs))]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for a, b in zip(results, expected):
        np.testing.assert_array_equal(a, b)


# ---------------------------------------------------------------- gradients


def _min_abs_cos(net, X):
    """Smallest |cos| per sample over every unit of every layer."""
    worst = np.full(len(X), np.inf)
    h = X
    for layer in net.layers:
        W = layer.weights
        cos = (h @ W.T) / (np.linalg.norm(h, axis=1)[:, None] * np.linalg.norm(W, axis=1))
        worst = np.minimum(worst, np.abs(cos).min(axis=1))
        h, _ = _layer_forward(layer, h)
    return worst


def fd_gradient_error(net, X, T, eps=1e-5):
    """Max elementwise relative error of analytic vs central-difference gradients."""
    _, grads = loss_and_grads(net, X, T)
    worst = 0.0
    for layer, g in zip(net.layers, grads):
        W = layer.weights
        num = np.empty_like(W)
        for idx in np.ndindex(W.shape):
            old = W[idx]
            W[idx] = old + eps
            up = bce_loss(network_forward(net, X)[1], T)
            W[idx] = old - eps
            down = bce_loss(network_forward(net, X)[1], T)
            W[idx] = old
            num[idx] = (up - down) / (2 * eps)
        rel = np.abs(g - num) / np.maximum(np.maximum(np.abs(g), np.abs(num)), 1e-6)
        worst = max(worst, rel.max())
    return worst


@pytest.mark.parametrize("B", [1.0, 1.5, 2.0, 2.5])
def test_gradients_match_finite_differences(B):
    net = random_net(hidden=(5, 4), B=B, seed=11)
    rng = np.random.default_rng(int(B * 10))
    # |c|^(B-1) is not differentiable at c = 0; keep samples away from it
    X = rng.random((40, net.input_spec.flat_dim))
    X = X[_min_abs_cos(net, X) > 1e-3][:4]
    assert len(X) == 4
    T = np.eye(3)[[0, 1, 2, 1]]
    assert fd_gradient_error(net, X, T) <= 1e-4


def test_gradients_with_dropout_mask_match_finite_differences():
    net = random_net(hidden=(5, 4), B=1.5, seed=12)
    rng = np.random.default_rng(0)
    X = rng.random((3, net.input_spec.flat_dim))
    mask = np.array([[2.0, 0, 2, 2], [0, 2, 2, 0], [2, 2, 0, 2]])
    T = np.eye(3)[[2, 0, 1]]
    _, grads = loss_and_grads(net, X, T, mask)
    W = net.head.weights
    eps = 1e-5

    def loss():
        h = X
        for layer in net.encoder_layers:
            h = _layer_forward(layer, h)[0]
        z = _layer_forward(net.head, h * mask)[0]
        return bce_loss(z, T)

    W[0, 1] += eps
    up = loss()
    W[0, 1] -= 2 * eps
    down = loss()
    W[0, 1] += eps
    assert grads[-1][0, 1] == pytest.approx((up - down) / (2 * eps), rel=1e-5)


# ----------------------------------------------------------------- training


def _dataset(n, spec, classes=3, seed=0):
    rng = np.random.default_rng(seed)
    images = rng.random((n, spec.height, spec.width, spec.raw_channels))
    return LabeledDataset(images, rng.integers(0, classes, n), [str(c) for c in range(classes)])


def test_single_sample_converges(small_synthetic):
    tr, _ = small_synthetic
    one = tr.subset([0])
    net = BcosNetwork.random(one.input_spec, 3, seed=1)
    trained, history = train(net, one, TrainConfig(max_epochs=500, batch_size=1))
    assert len(history) == 500
    _, z = network_forward(trained, one.encoded())
    # reference run reaches ~0.002; frozen as a regression bound
    assert bce_loss(z, np.eye(3)[one.labels]) < 0.05


def test_zero_learning_rate_keeps_parameters():
    spec = InputEncodingSpec(3, 3, 1)
    net = random_net(spec)
    trained, _ = train(net, _dataset(30, spec), TrainConfig(learning_rate=0.0, max_epochs=5))
    for a, b in zip(net.layers, trained.layers):
        np.testing.assert_array_equal(a.weights, b.weights)


def test_training_does_not_mutate_input_network():
    spec = InputEncodingSpec(3, 3, 1)
    net = random_net(spec)
    before = model_bytes(net)
    train(net, _dataset(30, spec), TrainConfig(max_epochs=3))
    assert model_bytes(net) == before


def test_training_is_deterministic():
    spec = InputEncodingSpec(3, 3, 1)
    data = _dataset(40, spec)
    cfg = TrainConfig(max_epochs=8, seed=4)
    a, ha = train(random_net(spec), data, cfg)
    b, hb = train(random_net(spec), data, cfg)
    assert model_bytes(a) == model_bytes(b)
    assert ha == hb


def test_early_stopping_halts_before_max_epochs():
    spec = InputEncodingSpec(3, 3, 1)
    _, history = train(random_net(spec), _dataset(60, spec), TrainConfig(max_epochs=400, early_stop_patience=3))
    assert len(history) < 400


def test_training_rejects_bad_labels():
    spec = InputEncodingSpec(3, 3, 1)
    data = _dataset(10, spec, classes=5)
    with pytest.raises(ContractError):
        train(random_net(spec, classes=3), data, TrainConfig(max_epochs=1))


def test_training_rejects_empty_dataset():
    class Empty:
        images = np.zeros((0, 3, 3, 1))
        labels = np.zeros(0, dtype=int)

    with pytest.raises(ContractError):
        train(random_net(), Empty(), TrainConfig(max_epochs=1))


def test_non_finite_loss_aborts(monkeypatch):
    spec = InputEncodingSpec(3, 3, 1)
    net = random_net(spec)
    real = loss_and_grads

    def broken(*args, **kwargs):
        _, grads = real(*args, **kwargs)
        return float("nan"), grads

    monkeypatch.setattr("comix.bcos.loss_and_grads", broken)
    with pytest.raises(TrainingError):
        train(net, _dataset(5, spec), TrainConfig(max_epochs=1))


@pytest.mark.parametrize(
    "kwargs", [{"learning_rate": -1}, {"batch_size": 0}, {"dropout_rate": 1.0}, {"exponent": 0}]
)
def test_train_config_validation(kwargs):
    with pytest.raises(ContractError):
        TrainConfig(**kwargs)


def test_train_config_defaults():
    cfg = TrainConfig()
    assert (cfg.learning_rate, cfg.batch_size, cfg.exponent, cfg.dropout_rate) == (0.01, 16, 1.5, 0.5)
    assert cfg.max_epochs == 500


# -------------------------------------------------------------- persistence


def test_save_load_round_trip_is_exact(tmp_path, rng):
    net = random_net(hidden=(6, 5), seed=3)
    path = tmp_path / "m.bin"
    save_model(net, path)
    loaded = load_model(path)
    X = rng.random((10, net.input_spec.flat_dim))
    np.testing.assert_array_equal(network_forward(net, X)[1], network_forward(loaded, X)[1])
    assert model_bytes(loaded) == path.read_bytes()
    assert loaded.rng_seed == net.rng_seed


def test_truncated_model_file_fails(tmp_path):
    blob = model_bytes(random_net())
    for cut in (5, 30, len(blob) - 1):
        with pytest.raises(FormatError):
            model_from_bytes(blob[:cut])


def test_wrong_magic_is_version_mismatch():
    blob = model_bytes(random_net())
    with pytest.raises(VersionMismatchError):
        model_from_bytes(b"NOT-A-MODEL" + blob[10:])


def test_wrong_format_version_is_rejected():
    blob = bytearray(model_bytes(random_net()))
    blob[10] = 99
    with pytest.raises(VersionMismatchError):
        model_from_bytes(bytes(blob))
