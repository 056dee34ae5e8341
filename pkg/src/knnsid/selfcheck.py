"""Built-in oracle checks run by ``knnsid selfcheck``."""

from __future__ import annotations

import time
from fractions import Fraction
from typing import Callable, NamedTuple

import numpy as np

from . import attention as attn
from . import knn
from .evaluation import ConfusionMatrix, metrics
from .nn import GRU, Attention, Conv2D, Dense, MaxPool2D, Network, SoftmaxHead, grad_check, layer_grad_check, softmax

GRAD_TOL = 1e-4


class CheckResult(NamedTuple):
    name: str
    passed: bool
    detail: str
    seconds: float


class _CorruptedHead(SoftmaxHead):
    """Negative control: reports a gradient 1.5x too large for the head weights."""

    def _backward(self, cache, dout):
        dx, grads = super()._backward(cache, dout)
        grads["W"] = grads["W"] * 1.5
        return dx, grads


def toy_network(seed: int, corrupt: bool = False) -> Network:
    """Two conv layers, GRU, attention and a 3-class head on 6x6 inputs.

    No pooling: max-pool is not differentiable where a window has a near tie,
    and a finite-difference step can straddle the switch.
    """
    rng = np.random.default_rng(seed)
    head_cls = _CorruptedHead if corrupt else SoftmaxHead
    layers = [
        Conv2D(1, 2, 3, rng=rng), Conv2D(2, 2, 3, rng=rng),
        GRU(12, 5, rng=rng), Attention(5, 4, rng=rng), head_cls(5, 3, rng=rng),
    ]
    for layer in layers:
        if "b" in layer.params:
            layer.params["b"][...] = rng.uniform(-0.5, 0.5, layer.params["b"].shape)
    return Network(layers, rng_seed=seed)


def toy_batch(seed: int):
    rng = np.random.default_rng(seed + 1000)
    return rng.standard_normal((2, 1, 6, 6)), rng.integers(0, 3, size=2)


def check_toy_gradients(seed: int, n_instances: int = 1, corrupt: bool = False):
    worst = max(grad_check(toy_network(seed + i, corrupt), *toy_batch(seed + i)) for i in range(n_instances))
    return worst < GRAD_TOL, f"max relative error {worst:.2e} over {n_instances} instance(s)"


def check_layer_gradients(seed: int):
    rng = np.random.default_rng(seed)
    cases = [
        (Conv2D(2, 3, 3, rng=rng), (2, 2, 4, 6)),
        (MaxPool2D(2, 2), (2, 2, 4, 6)),
        (GRU(4, 3, rng=rng), (2, 5, 4)),
        (Dense(4, 3, rng=rng), (3, 4)),
        (Attention(4, 5, rng=rng), (2, 5, 4)),
    ]
    errs = {layer.kind: layer_grad_check(layer, rng.standard_normal(shape), seed=seed) for layer, shape in cases}
    worst = max(errs.values())
    return worst < GRAD_TOL, ", ".join(f"{k} {v:.1e}" for k, v in errs.items())


def check_dense_knn_equivalence(seed: int, n_instances: int = 100):
    rng = np.random.default_rng(seed)
    for _ in range(n_instances):
        D, R = int(rng.choice([4, 32, 128])), int(rng.choice([10, 500]))
        ref = knn.build_reference_matrix(rng.standard_normal((R, D)), np.zeros(R))
        q = rng.standard_normal(D)
        dense = knn.knn_layer_scores(q, ref) / np.linalg.norm(q)
        brute = np.array([knn.cosine_similarity(q, ref.W[:, r]) for r in range(R)])
        if np.max(np.abs(dense - brute)) > 1e-6:
            return False, "dense scores deviate from brute-force cosine"
        for k in (1, 5, 11, R):
            if not np.array_equal(knn.top_k(dense, k).indices, knn.top_k(brute, k).indices):
                return False, f"top-{k} mismatch (D={D}, R={R})"
    return True, f"{n_instances} random instances agree"


def check_attention_contracts(seed: int, n_instances: int = 100):
    rng = np.random.default_rng(seed)
    for _ in range(n_instances):
        N, D = int(rng.integers(1, 12)), int(rng.integers(1, 16))
        H = rng.standard_normal((N, D))
        p = attn.AttentionParams.init(D, 8, rng, np.float64)
        out, _ = attn.attention_forward(H, p)
        if abs(out.alpha.sum() - 1) > 1e-6 or np.any(out.c < H.min(0) - 1e-12) or np.any(out.c > H.max(0) + 1e-12):
            return False, "normalization or convexity violated"
    return True, f"{n_instances} random sequences"


def check_softmax(seed: int):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((50, 7)) * 10
    p = softmax(z)
    ok = np.allclose(p.sum(axis=1), 1.0, atol=1e-9, rtol=0) and np.allclose(softmax(z + 3.7), p, atol=1e-12)
    ok = ok and abs(softmax(np.array([1000.0, 0.0]))[0] - 1.0) < 1e-12
    return ok, "row sums, shift invariance, overflow guard"


def check_metrics_oracle(seed: int, n_instances: int = 50):
    rng = np.random.default_rng(seed)
    for _ in range(n_instances):
        C = int(rng.integers(2, 6))
        cm = rng.integers(0, 5, size=(C, C))
        cm[rng.integers(C)] = 0  # absent class
        if cm.sum() == 0:
            cm[0, 0] = 1
        rep = metrics(ConfusionMatrix(cm, list(range(C))))
        if Fraction(rep.correct, rep.total) != Fraction(int(np.trace(cm)), int(cm.sum())):
            return False, "accuracy is not trace/total"
        for c in range(C):
            col, row = cm[:, c].sum(), cm[c].sum()
            p = cm[c, c] / col if col else 0.0
            r = cm[c, c] / row if row else 0.0
            f = 2 * p * r / (p + r) if p + r else 0.0
            if max(abs(p - rep.precision[c]), abs(r - rep.recall[c]), abs(f - rep.f1[c])) > 1e-12:
                return False, f"class {c} metrics disagree with the hand oracle"
    return True, f"{n_instances} random confusion matrices"


def run_selfcheck(seed: int = 7, quick: bool = False, inject_fault: bool = False) -> list[CheckResult]:
    checks: list[tuple[str, Callable[[], tuple[bool, str]]]] = [
        ("softmax", lambda: check_softmax(seed)),
        ("metrics-oracle", lambda: check_metrics_oracle(seed)),
        ("dense-knn-equivalence", lambda: check_dense_knn_equivalence(seed, 20 if quick else 200)),
        ("attention-contracts", lambda: check_attention_contracts(seed, 100 if quick else 1000)),
        ("layer-gradients", lambda: check_layer_gradients(seed)),
    ]
    if not quick:
        checks.append(("toy-network-gradients", lambda: check_toy_gradients(seed, 3)))
    if inject_fault:
        checks.append(("corrupted-gradient", lambda: check_toy_gradients(seed, 1, corrupt=True)))
    results = []
    for name, fn in checks:
        t0 = time.perf_counter()
        passed, detail = fn()
        results.append(CheckResult(name, bool(passed), detail, time.perf_counter() - t0))
    return results
