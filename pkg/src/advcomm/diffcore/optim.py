"""Gradient-ascent optimizers over ParamTrees.

Both optimizers ASCEND (theta <- theta + lr * step); callers that minimize a
loss pass gradients of its negation. Updates are functional: untouched
parameters are carried over by reference, so frozen subtrees stay bitwise
identical objects.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .params import ParamTree
from .tensor import Tensor


@dataclass
class OptimConfig:
    kind: str = "adam"  # "adam" | "sgd"
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def clip_by_global_norm(grads: ParamTree, max_norm: float) -> tuple[ParamTree, float]:
    """Scale all gradients so their joint L2 norm is at most `max_norm`."""
    sq = 0.0
    for _, g in grads.items():
        sq += float(np.sum(g.data.astype(np.float64) ** 2))
    norm = float(np.sqrt(sq))
    if norm <= max_norm or norm == 0.0:
        return grads, norm
    s = max_norm / norm
    return grads.map(lambda t: Tensor(t.data * np.asarray(s, dtype=t.dtype))), norm


class Sgd:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: ParamTree, grads: ParamTree) -> ParamTree:
        """Apply theta <- theta + lr*g on paths present in `grads`."""
        _check_subset(params, grads)
        out = ParamTree()
        for p, t in params.items():
            if p in grads:
                out[p] = Tensor(t.data + np.asarray(self.lr, dtype=t.dtype) * grads[p].data)
            else:
                out[p] = t
        return out


class Adam:
    """First/second-moment adaptive ascent with bias correction."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._t = 0

    def step(self, params: ParamTree, grads: ParamTree) -> ParamTree:
        _check_subset(params, grads)
        self._t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self._t
        bc2 = 1.0 - b2 ** self._t
        out = ParamTree()
        for p, t in params.items():
            if p not in grads:
                out[p] = t
                continue
            g = grads[p].data
            m = self._m.get(p)
            v = self._v.get(p)
            if m is None:
                m = np.zeros_like(g)
                v = np.zeros_like(g)
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * g * g
            self._m[p] = m
            self._v[p] = v
            step = self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            out[p] = Tensor(t.data + step.astype(t.dtype))
        return out


def make_optimizer(cfg: OptimConfig):
    if cfg.kind == "sgd":
        return Sgd(cfg.lr)
    if cfg.kind == "adam":
        return Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    raise ValueError(f"unknown optimizer kind {cfg.kind!r}")


def _check_subset(params: ParamTree, grads: ParamTree) -> None:
    for p, g in grads.items():
        if p not in params:
            raise ValueError(f"gradient for unknown parameter {p!r}")
        if g.shape != params[p].shape:
            raise ValueError(
                f"gradient shape {g.shape} != parameter shape {params[p].shape} at {p!r}")
