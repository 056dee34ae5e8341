"""Central finite-difference gradient checks."""

from __future__ import annotations

import numpy as np

from .layers import Layer


def relative_error(analytic, numeric, floor: float = 1e-8):
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def grad_check(model, x, label, eps: float = 1e-4) -> float:
    """Max relative error between backprop and central differences.

    Runs on a float64 copy of ``model`` and perturbs every scalar of every
    non-frozen layer, so the cost is two loss evaluations per parameter.
    """
    net = model.astype(np.float64)
    x = np.asarray(x, dtype=np.float64)
    _, grads = net.loss_and_grads(x, label)
    worst = 0.0
    for layer, g in zip(net.layers, grads):
        if layer.frozen:
            continue
        for name, p in layer.params.items():
            numeric = np.empty_like(p)
            flat, nflat = p.reshape(-1), numeric.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                up = net.loss(x, label)
                flat[i] = orig - eps
                down = net.loss(x, label)
                flat[i] = orig
                nflat[i] = (up - down) / (2 * eps)
            worst = max(worst, float(relative_error(g[name], numeric).max(initial=0.0)))
    return worst


def layer_grad_check(layer: Layer, x, eps: float = 1e-4, seed: int = 0) -> float:
    """Check one layer against the scalar loss ``sum(out * R)`` for a fixed random ``R``.

    Covers the input gradient and every parameter gradient.
    """
    layer = layer.astype(np.float64)
    x = np.array(x, dtype=np.float64)
    out, cache = layer.forward(x)
    weights = np.random.default_rng(seed).standard_normal(out.shape)
    dx, grads = layer.backward(cache, weights)

    def loss():
        return float(np.sum(layer(x) * weights))

    worst = 0.0
    targets = [(x, dx)] + [(layer.params[n], grads[n]) for n in layer.params]
    for arr, analytic in targets:
        numeric = np.empty_like(arr)
        flat, nflat = arr.reshape(-1), numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = loss()
            flat[i] = orig - eps
            down = loss()
            flat[i] = orig
            nflat[i] = (up - down) / (2 * eps)
        worst = max(worst, float(relative_error(analytic, numeric).max(initial=0.0)))
    return worst
