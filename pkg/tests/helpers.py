"""Shared test utilities."""

import numpy as np

from advcomm import diffcore as dc


def jitter_biases(params: dc.ParamTree, rng: np.random.Generator,
                  lo: float = 0.05, hi: float = 0.15) -> dc.ParamTree:
    """Move biases off zero so no pre-activation sits exactly on a
    leaky-relu kink (zero biases + sparse binary inputs produce exact-zero
    pre-activations, where finite differences and any subgradient
    convention must disagree)."""
    out = dc.ParamTree()
    for p, t in params.items():
        if p.endswith(".b"):
            off = rng.uniform(lo, hi, size=t.shape) * rng.choice([-1.0, 1.0], size=t.shape)
            out[p] = dc.Tensor((t.data + off).astype(t.data.dtype))
        else:
            out[p] = t
    return out
