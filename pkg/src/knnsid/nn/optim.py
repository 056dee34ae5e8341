"""Adam with per-layer freezing."""

from __future__ import annotations

import numpy as np

from ..errors import DimensionError


def adam_step(param, grad, m, v, step_count, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; returns ``(param, m, v)`` as new arrays.

    ``step_count`` is 1 for the first update.
    """
    if not (param.shape == grad.shape == m.shape == v.shape):
        raise DimensionError(f"adam: shapes differ {param.shape}, {grad.shape}, {m.shape}, {v.shape}")
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**step_count)
    v_hat = v / (1.0 - beta2**step_count)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.step_count = 0
        self._m: dict[tuple[int, str], np.ndarray] = {}
        self._v: dict[tuple[int, str], np.ndarray] = {}

    def step(self, network, grads):
        """Apply one update; layers flagged ``frozen`` are skipped entirely."""
        self.step_count += 1
        for i, (layer, g) in enumerate(zip(network.layers, grads)):
            if layer.frozen or not layer.params:
                continue
            for name, p in layer.params.items():
                key = (i, name)
                m = self._m.get(key)
                if m is None:
                    m = self._m[key] = np.zeros_like(p)
                    self._v[key] = np.zeros_like(p)
                cast = p.dtype.type
                new_p, self._m[key], self._v[key] = adam_step(
                    p, g[name].astype(p.dtype, copy=False), m, self._v[key], self.step_count,
                    cast(self.lr), cast(self.beta1), cast(self.beta2), cast(self.eps),
                )
                p[...] = new_p
            layer.mark_updated()
