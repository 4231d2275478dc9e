"""Adam with bias correction, updating numpy parameter arrays in place."""

from __future__ import annotations

import numpy as np

from .exceptions import NonFiniteGradient, ShapeMismatch

__all__ = ["Adam", "adam_step"]


class Adam:
    """Adam optimizer over a dict of named arrays.

    Moments are created lazily per parameter name and kept in the parameter's
    dtype. No weight decay, schedule or clipping.
    """

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, params, grads):
        """Apply one update to ``params[name]`` for every ``name`` in ``grads``.

        Raises :class:`NonFiniteGradient` before touching any state if a
        gradient contains NaN or Inf.
        """
        for name, g in grads.items():
            if g.shape != params[name].shape:
                raise ShapeMismatch(f"{name}: gradient {g.shape} vs parameter {params[name].shape}")
            if not np.all(np.isfinite(g)):
                bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
                raise NonFiniteGradient(f"step {self.t + 1}: gradient of {name} has {bad} non-finite entries")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            p = params[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= (self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)).astype(p.dtype, copy=False)

    def state_dict(self):
        return {"t": self.t, "m": {k: v.copy() for k, v in self.m.items()},
                "v": {k: v.copy() for k, v in self.v.items()}}


def adam_step(params, grads, state):
    """Functional spelling of ``state.step(params, grads)``; returns ``(params, state)``."""
    state.step(params, grads)
    return params, state
