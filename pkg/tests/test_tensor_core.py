import math
from decimal import Decimal, localcontext

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from knnsid.errors import ContractError, DimensionError, MagicMismatchError, NumericError, TruncatedFileError
from knnsid.nn import (
    GRU, Adam, Attention, Conv2D, Dense, MaxPool2D, Network, NetworkConfig, SoftmaxHead, adam_step, build_network,
    cross_entropy, grad_check, layer_grad_check, load_network, save_network, softmax,
)
from knnsid.selfcheck import toy_batch, toy_network


# --- forward ------------------------------------------------------------------


def test_dense_identity():
    d = Dense(4, 4, dtype=np.float64)
    d.params["W"][...] = np.eye(4)
    d.params["b"][...] = 0
    x = np.random.default_rng(0).standard_normal((3, 4))
    assert np.array_equal(d(x), x)


def test_zero_gru_stays_at_zero():
    g = GRU(5, 4)
    for p in g.params.values():
        p[...] = 0
    x = np.random.default_rng(0).standard_normal((2, 7, 5)).astype(np.float32)
    assert np.all(g(x) == 0)


def test_identity_conv_kernel():
    c = Conv2D(1, 1, 1, dtype=np.float64)
    c.params["W"][...] = 1.0
    x = np.abs(np.random.default_rng(0).standard_normal((2, 1, 4, 5)))  # ELU is identity for x > 0
    assert np.allclose(c(x), x, rtol=0, atol=0)


def test_shape_mismatch_names_layer_and_shapes():
    with pytest.raises(DimensionError, match=r"conv2d.*\(2, 3, 4, 4\)"):
        Conv2D(1, 2)(np.zeros((2, 3, 4, 4)))


# --- backward -----------------------------------------------------------------


def test_dense_weight_grad_is_outer_product():
    d = Dense(3, 2, dtype=np.float64)
    x = np.array([[1.0, 2.0, 3.0]])
    g = np.array([[0.5, -1.0]])
    _, cache = d.forward(x)
    _, grads = d.backward(cache, g)
    assert np.allclose(grads["W"], np.outer(x[0], g[0]))


LAYER_CASES = [
    (lambda rng: Conv2D(2, 3, 3, rng=rng), (2, 2, 4, 6)),
    (lambda rng: MaxPool2D(2, 3), (2, 2, 4, 6)),
    (lambda rng: GRU(4, 3, rng=rng), (2, 5, 4)),
    (lambda rng: Dense(4, 3, rng=rng), (3, 4)),
    (lambda rng: SoftmaxHead(4, 3, rng=rng), (3, 4)),
    (lambda rng: Attention(4, 5, rng=rng), (2, 5, 4)),
]


@pytest.mark.parametrize("make, shape", LAYER_CASES)
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_layer_gradients_match_finite_differences(make, shape, seed):
    rng = np.random.default_rng(seed)
    layer = make(rng)
    for p in layer.params.values():
        p[...] = rng.uniform(-0.8, 0.8, p.shape)
    assert layer_grad_check(layer, rng.standard_normal(shape), seed=seed) < 1e-4


@pytest.mark.parametrize("make, shape", LAYER_CASES)
def test_zero_upstream_gives_zero_grads(make, shape):
    layer = make(np.random.default_rng(0))
    x = np.random.default_rng(1).standard_normal(shape).astype(np.float32)
    out, cache = layer.forward(x)
    dx, grads = layer.backward(cache, np.zeros_like(out))
    assert not np.any(dx) and all(not np.any(g) for g in grads.values())


def test_missing_or_foreign_cache_is_contract_error():
    a, b = Dense(3, 2), Dense(3, 2)
    _, cache = a.forward(np.ones((1, 3), dtype=np.float32))
    with pytest.raises(ContractError):
        b.backward(cache, np.ones((1, 2)))
    with pytest.raises(ContractError):
        a.backward(None, np.ones((1, 2)))


def test_stale_cache_is_contract_error():
    a = Dense(3, 2)
    _, cache = a.forward(np.ones((1, 3), dtype=np.float32))
    a.mark_updated()
    with pytest.raises(ContractError):
        a.backward(cache, np.ones((1, 2)))


# --- softmax / cross-entropy --------------------------------------------------


def test_softmax_examples():
    assert np.array_equal(softmax(np.zeros(4)), np.full(4, 0.25))
    p = softmax(np.array([1000.0, 0.0]))
    assert abs(p[0] - 1.0) <= 1e-12 and p[1] <= 1e-12
    with localcontext() as ctx:
        ctx.prec = 60
        e = Decimal(-1000).exp()
        p0, p1 = 1 / (1 + e), e / (1 + e)
    assert abs(Decimal(float(p[0])) - p0) <= Decimal("1e-12")
    assert abs(Decimal(float(p[1])) - p1) <= Decimal("1e-12")


def test_softmax_errors():
    with pytest.raises(NumericError):
        softmax(np.array([0.0, np.inf]))
    with pytest.raises(ContractError):
        softmax(np.zeros((2, 0)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-50, 50))
def test_softmax_rows_and_shift(seed, c):
    z = np.random.default_rng(seed).standard_normal((5, 6)) * 20
    p = softmax(z)
    assert np.all(p > 0) and np.all(p <= 1)
    assert np.allclose(p.sum(axis=1), 1.0, rtol=0, atol=1e-9)
    assert np.allclose(softmax(z + c), p, rtol=0, atol=1e-12)


def test_cross_entropy_examples():
    assert cross_entropy(np.array([0.0, 1.0, 0.0]), 1)[0] == 0.0
    assert cross_entropy(np.full(5, 0.2), 3)[0] == pytest.approx(math.log(5), rel=1e-12)
    with pytest.raises(ContractError):
        cross_entropy(np.full(3, 1 / 3), 3)


@pytest.mark.parametrize("seed", range(5))
def test_cross_entropy_gradient_matches_fd(seed):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(6)
    y = int(rng.integers(6))
    _, g = cross_entropy(softmax(z), y)
    eps = 1e-5
    num = np.array([(cross_entropy(softmax(z + eps * e), y)[0] - cross_entropy(softmax(z - eps * e), y)[0]) / (2 * eps)
                    for e in np.eye(6)])
    assert np.max(np.abs(g - num) / np.maximum(np.maximum(np.abs(g), np.abs(num)), 1e-8)) < 1e-4


# --- Adam ---------------------------------------------------------------------


def test_adam_single_step_hand_value():
    lr, b1, b2, eps, g = 1e-3, 0.9, 0.999, 1e-8, 0.37
    p, m, v = adam_step(np.array([2.0]), np.array([g]), np.zeros(1), np.zeros(1), 1, lr, b1, b2, eps)
    m_hat = (1 - b1) * g / (1 - b1)
    v_hat = (1 - b2) * g * g / (1 - b2)
    expected = 2.0 - lr * m_hat / (math.sqrt(v_hat) + eps)
    assert p[0] == pytest.approx(expected, rel=0, abs=1e-15)
    assert 2.0 - p[0] == pytest.approx(lr, rel=1e-6)


def test_adam_zero_gradient_and_frozen_layers_unchanged():
    net = toy_network(3).astype(np.float32)
    net.layers[0].frozen = True
    before = net.weights_snapshot()
    opt = Adam()
    x, y = toy_batch(3)
    for step in range(5):
        _, grads = net.loss_and_grads(x.astype(np.float32), y)
        zero = [{k: np.zeros_like(v) for k, v in g.items()} for g in grads]
        opt.step(net, zero if step < 2 else grads)
    after = net.weights_snapshot()
    assert all(np.array_equal(before[0][k], after[0][k]) for k in before[0])
    assert any(not np.array_equal(before[-1][k], after[-1][k]) for k in before[-1])


def test_adam_zero_gradient_keeps_params():
    p = np.array([1.5, -2.0])
    for t in range(1, 4):
        p2, _, _ = adam_step(p, np.zeros(2), np.zeros(2), np.zeros(2), t)
        assert np.array_equal(p2, p)


# --- gradient check -----------------------------------------------------------


def test_toy_network_seed7_grad_check():
    assert grad_check(toy_network(7), *toy_batch(7)) < 1e-4


def test_linear_only_model_grad_check():
    rng = np.random.default_rng(7)
    net = Network([SoftmaxHead(5, 3, rng=rng, dtype=np.float64)])
    assert grad_check(net, rng.standard_normal((4, 5)), rng.integers(0, 3, 4)) < 1e-7


def test_corrupted_gradient_is_detected():
    assert grad_check(toy_network(7, corrupt=True), *toy_batch(7)) > 1e-2


def test_grad_check_skips_frozen_layers():
    net = toy_network(1)
    for layer in net.layers[:-1]:
        layer.frozen = True
    assert grad_check(net, *toy_batch(1)) < 1e-6


# --- network build / serialization -------------------------------------------


def test_build_network_shapes_and_determinism():
    cfg = NetworkConfig()
    a = build_network(cfg, 64, 8, seed=7)
    b = build_network(cfg, 64, 8, seed=7)
    assert all(np.array_equal(x[k], y[k]) for x, y in zip(a.weights_snapshot(), b.weights_snapshot()) for k in x)
    x = np.random.default_rng(0).standard_normal((3, 1, 32, 64)).astype(np.float32)
    assert a.embed(x).shape == (3, 32)
    assert a.logits(x).shape == (3, 8)
    assert a.embed(x).dtype == np.float32


def test_embeddings_are_batch_independent():
    net = build_network(NetworkConfig(), 64, 4, seed=1)
    x = np.random.default_rng(0).standard_normal((10, 1, 32, 64)).astype(np.float32)
    full = net.embed(x)
    assert all(np.array_equal(full[i], net.embed(x[i : i + 1])[0]) for i in range(10))
    assert np.array_equal(full, net.embed(x, batch_size=3))


def test_network_save_load_roundtrip(tmp_path):
    net = build_network(NetworkConfig(), 64, 4, seed=2)
    net.freeze_extractor()
    save_network(net, tmp_path / "m.tknm")
    back = load_network(tmp_path / "m.tknm", rng_seed=2)
    x = np.random.default_rng(0).standard_normal((4, 1, 32, 64)).astype(np.float32)
    assert np.array_equal(net.logits(x), back.logits(x))
    assert [l.frozen for l in back.layers] == [l.frozen for l in net.layers]


def test_network_file_errors(tmp_path):
    net = build_network(NetworkConfig(), 64, 4, seed=2)
    p = tmp_path / "m.tknm"
    save_network(net, p)
    raw = p.read_bytes()
    (tmp_path / "bad.tknm").write_bytes(b"ABCD" + raw[4:])
    with pytest.raises(MagicMismatchError):
        load_network(tmp_path / "bad.tknm")
    (tmp_path / "cut.tknm").write_bytes(raw[: len(raw) // 2])
    with pytest.raises(TruncatedFileError, match="layer"):
        load_network(tmp_path / "cut.tknm")
