"""Tensors, the computation record (tape) and primitive operations.

Conventions:
    * Activations and parameters are float32; reductions accumulate in
      float64 before casting back. A `precision` context switches the whole
      engine to float64 (used by the finite-difference checker).
    * Primitives accept Tensors or plain numpy arrays / scalars; non-Tensor
      operands are constants and receive no gradient.
    * Nothing is recorded unless a ComputationRecord is active, so rollout /
      inference code pays no tape overhead.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_LOG_EPS = 1e-12
_BCE_EPS = 1e-7


class ShapeError(ValueError):
    """Raised when an operation receives incompatible shapes."""


_dtype_stack: list[type] = [np.float32]


def active_dtype():
    return _dtype_stack[-1]


class precision:
    """Context manager selecting the dtype newly created tensors use."""

    def __init__(self, dtype):
        self.dtype = dtype

    def __enter__(self):
        _dtype_stack.append(self.dtype)
        return self

    def __exit__(self, *exc):
        _dtype_stack.pop()
        return False


class Tensor:
    """A shaped array of reals. Identity (not value) keyed on the tape."""

    __slots__ = ("data",)

    def __init__(self, data, dtype=None):
        self.data = np.asarray(data, dtype=dtype or active_dtype())

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(()))

    def copy(self) -> "Tensor":
        return Tensor._wrap(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


class _Node:
    __slots__ = ("op", "inputs", "output", "grad_fn")

    def __init__(self, op, inputs, output, grad_fn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.grad_fn = grad_fn


class ComputationRecord:
    """Ordered list of primitive applications, replayable in reverse."""

    def __init__(self):
        self.entries: list[_Node] = []

    def __enter__(self):
        _record_stack.append(self)
        return self

    def __exit__(self, *exc):
        _record_stack.pop()
        return False

    def __len__(self):
        return len(self.entries)


_record_stack: list[ComputationRecord] = []


def _active_record() -> ComputationRecord | None:
    return _record_stack[-1] if _record_stack else None


def _d(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _emit(op: str, inputs: tuple, out: Tensor,
          grad_fn: Callable[[np.ndarray], tuple]) -> Tensor:
    rec = _active_record()
    if rec is not None and any(isinstance(i, Tensor) for i in inputs):
        rec.entries.append(_Node(op, inputs, out, grad_fn))
    return out


def backward(record: ComputationRecord, loss: Tensor, params) -> "ParamTree":
    """Reverse traversal of `record` from scalar `loss`.

    Returns a gradient tree with the structure of `params`; parameters that
    do not reach the loss get exact-zero gradients. Accumulation is additive
    when a tensor feeds several operations.
    """
    from .params import ParamTree

    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(record.entries):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.grad_fn(g)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not isinstance(inp, Tensor):
                continue
            acc = grads.get(id(inp))
            grads[id(inp)] = gi if acc is None else acc + gi
    out = ParamTree()
    for path, t in params.items():
        g = grads.get(id(t))
        out[path] = Tensor(np.zeros_like(t.data) if g is None else g.astype(t.dtype, copy=False))
    return out


def assert_all_finite(x, context: str = "") -> None:
    arrs = x.tensors() if hasattr(x, "tensors") else [x]
    for t in arrs:
        if not np.all(np.isfinite(_d(t))):
            raise FloatingPointError(f"non-finite values detected {context}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce gradient `g` back to `shape` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    ad, bd = _d(a), _d(b)
    try:
        out = Tensor._wrap(ad + bd)
    except ValueError:
        raise ShapeError(f"add: cannot broadcast {ad.shape} with {bd.shape}")
    ash, bsh = ad.shape, bd.shape

    def grad(g):
        return (_unbroadcast(g, ash) if isinstance(a, Tensor) else None,
                _unbroadcast(g, bsh) if isinstance(b, Tensor) else None)

    return _emit("add", (a, b), out, grad)


def sub(a, b) -> Tensor:
    ad, bd = _d(a), _d(b)
    try:
        out = Tensor._wrap(ad - bd)
    except ValueError:
        raise ShapeError(f"sub: cannot broadcast {ad.shape} with {bd.shape}")
    ash, bsh = ad.shape, bd.shape

    def grad(g):
        return (_unbroadcast(g, ash) if isinstance(a, Tensor) else None,
                _unbroadcast(-g, bsh) if isinstance(b, Tensor) else None)

    return _emit("sub", (a, b), out, grad)


def mul(a, b) -> Tensor:
    ad, bd = _d(a), _d(b)
    try:
        out = Tensor._wrap(ad * bd)
    except ValueError:
        raise ShapeError(f"mul: cannot broadcast {ad.shape} with {bd.shape}")
    ash, bsh = ad.shape, bd.shape

    def grad(g):
        return (_unbroadcast(g * bd, ash) if isinstance(a, Tensor) else None,
                _unbroadcast(g * ad, bsh) if isinstance(b, Tensor) else None)

    return _emit("mul", (a, b), out, grad)


def scale(x, c: float) -> Tensor:
    xd = _d(x)
    c = float(c)
    out = Tensor._wrap(xd * c)

    def grad(g):
        return (g * c,)

    return _emit("scale", (x,), out, grad)


def minimum(a, b) -> Tensor:
    ad, bd = _d(a), _d(b)
    try:
        out = Tensor._wrap(np.minimum(ad, bd))
    except ValueError:
        raise ShapeError(f"minimum: cannot broadcast {ad.shape} with {bd.shape}")
    ash, bsh = ad.shape, bd.shape

    def grad(g):
        take_a = ad <= bd  # ties route to the first operand
        return (_unbroadcast(g * take_a, ash) if isinstance(a, Tensor) else None,
                _unbroadcast(g * ~take_a, bsh) if isinstance(b, Tensor) else None)

    return _emit("minimum", (a, b), out, grad)


def clip(x, lo: float, hi: float) -> Tensor:
    xd = _d(x)
    out = Tensor._wrap(np.clip(xd, lo, hi))

    def grad(g):
        return (g * ((xd >= lo) & (xd <= hi)),)

    return _emit("clip", (x,), out, grad)


# ---------------------------------------------------------------------------
# nonlinearities


def relu(x) -> Tensor:
    xd = _d(x)
    out = Tensor._wrap(np.maximum(xd, 0))

    def grad(g):
        return (g * (xd > 0),)

    return _emit("relu", (x,), out, grad)


def leaky_relu(x, negative_slope: float = 0.01) -> Tensor:
    xd = _d(x)
    out = Tensor._wrap(np.where(xd > 0, xd, xd * negative_slope))

    def grad(g):
        return (g * np.where(xd > 0, 1.0, negative_slope).astype(xd.dtype),)

    return _emit("leaky_relu", (x,), out, grad)


def sigmoid(x) -> Tensor:
    xd = _d(x)
    s = np.where(xd >= 0, 1.0 / (1.0 + np.exp(-np.abs(xd))),
                 np.exp(-np.abs(xd)) / (1.0 + np.exp(-np.abs(xd)))).astype(xd.dtype)
    out = Tensor._wrap(s)

    def grad(g):
        return (g * s * (1.0 - s),)

    return _emit("sigmoid", (x,), out, grad)


def exp(x) -> Tensor:
    xd = _d(x)
    e = np.exp(xd)
    out = Tensor._wrap(e)

    def grad(g):
        return (g * e,)

    return _emit("exp", (x,), out, grad)


def log(x) -> Tensor:
    xd = _d(x)
    safe = np.maximum(xd, _LOG_EPS)
    out = Tensor._wrap(np.log(safe))

    def grad(g):
        return (g / safe,)

    return _emit("log", (x,), out, grad)


def softmax(x) -> Tensor:
    """Softmax over the last axis."""
    xd = _d(x)
    z = xd - xd.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    out = Tensor._wrap(s.astype(xd.dtype, copy=False))

    def grad(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        return ((g - dot) * s,)

    return _emit("softmax", (x,), out, grad)


def log_softmax(x) -> Tensor:
    xd = _d(x)
    z = xd - xd.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    lsm = z - lse
    out = Tensor._wrap(lsm.astype(xd.dtype, copy=False))
    sm = np.exp(lsm)

    def grad(g):
        return (g - sm * g.sum(axis=-1, keepdims=True),)

    return _emit("log_softmax", (x,), out, grad)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    ad, bd = _d(a), _d(b)
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul: operands must be >=2-D, got {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {ad.shape} @ {bd.shape}")
    try:
        out = Tensor._wrap(ad @ bd)
    except ValueError:
        raise ShapeError(f"matmul: batch dims incompatible, {ad.shape} @ {bd.shape}")
    ash, bsh = ad.shape, bd.shape

    def grad(g):
        ga = gb = None
        if isinstance(a, Tensor):
            ga = _unbroadcast(g @ bd.swapaxes(-1, -2), ash)
        if isinstance(b, Tensor):
            gb = _unbroadcast(ad.swapaxes(-1, -2) @ g, bsh)
        return ga, gb

    return _emit("matmul", (a, b), out, grad)


def dense(x, w, b=None) -> Tensor:
    """Affine map on the last axis: y = x @ w + b."""
    xd, wd = _d(x), _d(w)
    if wd.ndim != 2 or xd.shape[-1] != wd.shape[0]:
        raise ShapeError(f"dense: input {xd.shape} incompatible with weight {wd.shape}")
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, xd.shape[-1])
    y2 = x2 @ wd
    if b is not None:
        bd = _d(b)
        if bd.shape != (wd.shape[1],):
            raise ShapeError(f"dense: bias {bd.shape} incompatible with weight {wd.shape}")
        y2 = y2 + bd
    out = Tensor._wrap(y2.reshape(*lead, wd.shape[1]))
    inputs = (x, w) if b is None else (x, w, b)

    def grad(g):
        g2 = g.reshape(-1, wd.shape[1])
        gx = (g2 @ wd.T).reshape(xd.shape) if isinstance(x, Tensor) else None
        gw = x2.T @ g2 if isinstance(w, Tensor) else None
        gs = (gx, gw)
        if b is not None:
            gs = gs + (g2.sum(axis=0) if isinstance(b, Tensor) else None,)
        return gs

    return _emit("dense", inputs, out, grad)


def conv2d(x, w, b=None, padding: int = 0) -> Tensor:
    """2-D correlation, stride 1, zero padding. x: (B,C,H,W), w: (O,C,kh,kw)."""
    xd, wd = _d(x), _d(w)
    if xd.ndim != 4 or wd.ndim != 4:
        raise ShapeError(f"conv2d: need 4-D input/weight, got {xd.shape}, {wd.shape}")
    if xd.shape[1] != wd.shape[1]:
        raise ShapeError(f"conv2d: channel mismatch, input {xd.shape} vs weight {wd.shape}")
    kh, kw = wd.shape[2], wd.shape[3]
    p = int(padding)
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise ShapeError(f"conv2d: kernel {wd.shape} larger than padded input {xp.shape}")
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # (B,C,Ho,Wo,kh,kw)
    y = np.einsum("bchwuv,ocuv->bohw", win, wd, optimize=True)
    if b is not None:
        bd = _d(b)
        if bd.shape != (wd.shape[0],):
            raise ShapeError(f"conv2d: bias {bd.shape} incompatible with weight {wd.shape}")
        y = y + bd[None, :, None, None]
    out = Tensor._wrap(y)
    inputs = (x, w) if b is None else (x, w, b)
    ho, wo = y.shape[2], y.shape[3]

    def grad(g):
        gx = gw = None
        if isinstance(w, Tensor):
            gw = np.einsum("bchwuv,bohw->ocuv", win, g, optimize=True)
        if isinstance(x, Tensor):
            gxp = np.zeros_like(xp)
            for u in range(kh):
                for v in range(kw):
                    gxp[:, :, u:u + ho, v:v + wo] += np.einsum(
                        "bohw,oc->bchw", g, wd[:, :, u, v], optimize=True)
            gx = gxp[:, :, p:p + xd.shape[2], p:p + xd.shape[3]] if p else gxp
        gs = (gx, gw)
        if b is not None:
            gs = gs + (g.sum(axis=(0, 2, 3)) if isinstance(b, Tensor) else None,)
        return gs

    return _emit("conv2d", inputs, out, grad)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(x, shape) -> Tensor:
    xd = _d(x)
    shape = tuple(int(s) for s in shape)
    try:
        out = Tensor._wrap(xd.reshape(shape))
    except ValueError:
        raise ShapeError(f"reshape: {xd.shape} -> {shape} changes element count")

    def grad(g):
        return (g.reshape(xd.shape),)

    return _emit("reshape", (x,), out, grad)


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    datas = [_d(p) for p in parts]
    try:
        out = Tensor._wrap(np.concatenate(datas, axis=axis))
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[d.shape for d in datas]} on axis {axis}")
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def grad(g):
        slc = [slice(None)] * g.ndim
        gs = []
        for i, p in enumerate(parts):
            if isinstance(p, Tensor):
                slc[axis] = slice(offsets[i], offsets[i + 1])
                gs.append(g[tuple(slc)])
            else:
                gs.append(None)
        return tuple(gs)

    return _emit("concat", tuple(parts), out, grad)


def take(x, indices, axis: int = 0) -> Tensor:
    """Gather rows along `axis` (indices may repeat; gradients accumulate)."""
    xd = _d(x)
    idx = np.asarray(indices, dtype=np.intp)
    axis = axis % xd.ndim
    out = Tensor._wrap(np.take(xd, idx, axis=axis))

    def grad(g):
        gx = np.zeros_like(xd)
        sel = (slice(None),) * axis + (idx,)
        np.add.at(gx, sel, g)
        return (gx,)

    return _emit("take", (x,), out, grad)


def gather_last(x, idx) -> Tensor:
    """Pick one element per row along the last axis. idx shape = x.shape[:-1]."""
    xd = _d(x)
    ind = np.asarray(idx, dtype=np.intp)
    if ind.shape != xd.shape[:-1]:
        raise ShapeError(f"gather_last: index shape {ind.shape} vs input {xd.shape}")
    out = Tensor._wrap(np.take_along_axis(xd, ind[..., None], axis=-1)[..., 0])

    def grad(g):
        gx = np.zeros_like(xd)
        np.put_along_axis(gx, ind[..., None], g[..., None], axis=-1)
        return (gx,)

    return _emit("gather_last", (x,), out, grad)


def stop_gradient(x) -> Tensor:
    return Tensor._wrap(_d(x).copy())


# ---------------------------------------------------------------------------
# reductions (float64 accumulation)


def reduce_sum(x, axis=None) -> Tensor:
    xd = _d(x)
    out = Tensor._wrap(np.sum(xd, axis=axis, dtype=np.float64).astype(xd.dtype))

    def grad(g):
        if axis is None:
            return (np.broadcast_to(g, xd.shape).astype(xd.dtype, copy=False) * np.ones_like(xd),)
        return (np.broadcast_to(np.expand_dims(g, axis), xd.shape).copy(),)

    return _emit("sum", (x,), out, grad)


def reduce_mean(x, axis=None) -> Tensor:
    xd = _d(x)
    out = Tensor._wrap(np.mean(xd, axis=axis, dtype=np.float64).astype(xd.dtype))
    n = xd.size if axis is None else xd.shape[axis]

    def grad(g):
        if axis is None:
            return ((np.broadcast_to(g, xd.shape) / n).astype(xd.dtype, copy=False) * np.ones_like(xd),)
        return ((np.broadcast_to(np.expand_dims(g, axis), xd.shape) / n).astype(xd.dtype),)

    return _emit("mean", (x,), out, grad)


def upsample2x(x) -> Tensor:
    """Nearest-neighbour 2x upsampling of the trailing two axes."""
    xd = _d(x)
    if xd.ndim < 2:
        raise ShapeError(f"upsample2x: need >=2-D, got {xd.shape}")
    out = Tensor._wrap(np.repeat(np.repeat(xd, 2, axis=-2), 2, axis=-1))
    h, w = xd.shape[-2], xd.shape[-1]

    def grad(g):
        lead = g.shape[:-2]
        return (g.reshape(*lead, h, 2, w, 2).sum(axis=(-3, -1)).astype(xd.dtype),)

    return _emit("upsample2x", (x,), out, grad)


def avgpool2x(x) -> Tensor:
    """2x2 mean pooling on the trailing two axes; odd edges are cropped."""
    xd = _d(x)
    if xd.ndim < 2:
        raise ShapeError(f"avgpool2x: need >=2-D, got {xd.shape}")
    h, w = xd.shape[-2], xd.shape[-1]
    he, we = (h // 2) * 2, (w // 2) * 2
    if he == 0 or we == 0:
        raise ShapeError(f"avgpool2x: spatial dims too small in {xd.shape}")
    lead = xd.shape[:-2]
    blocks = xd[..., :he, :we].reshape(*lead, he // 2, 2, we // 2, 2)
    out = Tensor._wrap(blocks.mean(axis=(-3, -1)))

    def grad(g):
        gx = np.zeros_like(xd)
        gx[..., :he, :we] = np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1) / 4.0
        return (gx,)

    return _emit("avgpool2x", (x,), out, grad)


# ---------------------------------------------------------------------------
# losses


def mse(pred, target) -> Tensor:
    """Mean squared error over all elements (scalar output)."""
    pd, td = _d(pred), _d(target)
    if pd.shape != td.shape:
        raise ShapeError(f"mse: shapes differ, {pd.shape} vs {td.shape}")
    diff = pd.astype(np.float64) - td.astype(np.float64)
    out = Tensor._wrap(np.asarray(np.mean(diff * diff), dtype=pd.dtype))
    n = pd.size

    def grad(g):
        gp = (2.0 / n) * diff * g
        return (gp.astype(pd.dtype) if isinstance(pred, Tensor) else None,
                (-gp).astype(td.dtype) if isinstance(target, Tensor) else None)

    return _emit("mse", (pred, target), out, grad)


def bce_with_mask(pred, target, mask) -> Tensor:
    """Binary cross entropy on probabilities, averaged over masked elements.

    `target` and `mask` are constants; an all-zero mask yields exactly 0.
    """
    pd, td, md = _d(pred), _d(target), _d(mask)
    if pd.shape != td.shape or pd.shape != md.shape:
        raise ShapeError(f"bce_with_mask: shapes differ, {pd.shape}/{td.shape}/{md.shape}")
    p = np.clip(pd.astype(np.float64), _BCE_EPS, 1.0 - _BCE_EPS)
    t = td.astype(np.float64)
    m = md.astype(np.float64)
    denom = max(float(m.sum()), 1.0)
    elem = -(t * np.log(p) + (1.0 - t) * np.log(1.0 - p))
    out = Tensor._wrap(np.asarray((elem * m).sum() / denom, dtype=pd.dtype))

    def grad(g):
        gp = m * (p - t) / (p * (1.0 - p)) / denom * g
        return (gp.astype(pd.dtype), None, None)

    return _emit("bce_with_mask", (pred, target, mask), out, grad)
