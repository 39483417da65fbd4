"""Primitive tensor ops with forward values and tape-recorded backwards.

Covers elementwise arithmetic, matmul, shape ops, reductions, min/max with a
deterministic subgradient (ties route to the first/lowest-index achiever),
the neural-net nonlinearities, and row gather/replace. Dropout-style masking
is plain multiplication by a constant mask. ``log`` clips its argument at
1e-12 instead of raising; the gradient is zero in the clipped region.
"""

from __future__ import annotations

import numpy as np

from sonomim import kernels
from sonomim.autodiff.tensor import AutodiffError, Tensor, active_tape

LOG_FLOOR = 1e-12


def constant(x, dtype=None) -> Tensor:
    return Tensor(np.asarray(x, dtype=dtype), requires_grad=False)


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        a2, b2 = a, _lift(b, a)
    else:
        b2 = _lift(b)
        a2 = _lift(a, b2)
    if a2.data.dtype != b2.data.dtype:
        raise AutodiffError(
            f"mixed dtypes {a2.data.dtype} and {b2.data.dtype}; cast explicitly"
        )
    return a2, b2


def _record(out: Tensor, inputs, backward_fn, op: str) -> Tensor:
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, backward_fn, op)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = Tensor(a.data + b.data)

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _record(out, (a, b), bwd, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = Tensor(a.data - b.data)

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _record(out, (a, b), bwd, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = Tensor(a.data * b.data)

    def bwd(g):
        ga = _unbroadcast(g * b.data, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.data.shape) if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), bwd, "mul")


def abs_(a) -> Tensor:
    a = _lift(a)
    out = Tensor(np.abs(a.data))

    def bwd(g):
        return (g * np.sign(a.data),)

    return _record(out, (a,), bwd, "abs")


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient passes through inside the range."""
    a = _lift(a)
    out = Tensor(np.clip(a.data, lo, hi))

    def bwd(g):
        inside = (a.data >= lo) & (a.data <= hi)
        return (g * inside,)

    return _record(out, (a,), bwd, "clip")


# ---------------------------------------------------------------------------
# matmul and shape ops

def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise AutodiffError("matmul requires >= 2-d operands")
    out = Tensor(a.data @ b.data)

    def bwd(g):
        ad, bd = a.data, b.data
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                # collapse leading dims into one efficient GEMM
                k, n = ad.shape[-1], g.shape[-1]
                gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _record(out, (a, b), bwd, "matmul")


def transpose(a, axes) -> Tensor:
    a = _lift(a)
    axes = tuple(axes)
    out = Tensor(np.ascontiguousarray(a.data.transpose(axes)))
    inv = tuple(np.argsort(axes))

    def bwd(g):
        return (g.transpose(inv),)

    return _record(out, (a,), bwd, "transpose")


def reshape(a, shape) -> Tensor:
    a = _lift(a)
    out = Tensor(a.data.reshape(shape))

    def bwd(g):
        return (g.reshape(a.data.shape),)

    return _record(out, (a,), bwd, "reshape")


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [_lift(t) for t in tensors]
    if not ts:
        raise AutodiffError("concat of empty sequence")
    out = Tensor(np.concatenate([t.data for t in ts], axis=axis))
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _record(out, tuple(ts), bwd, "concat")


def slice_(a, key) -> Tensor:
    """Basic (non-fancy) slicing."""
    a = _lift(a)
    out = Tensor(a.data[key])

    def bwd(g):
        z = np.zeros_like(a.data)
        z[key] = g.reshape(z[key].shape)
        return (z,)

    return _record(out, (a,), bwd, "slice")


def broadcast_to(a, shape) -> Tensor:
    a = _lift(a)
    out = Tensor(np.broadcast_to(a.data, shape))

    def bwd(g):
        return (_unbroadcast(g, a.data.shape),)

    return _record(out, (a,), bwd, "broadcast")


# ---------------------------------------------------------------------------
# reductions

def _norm_axes(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    axes = _norm_axes(axis, a.ndim)
    out = Tensor(a.data.sum(axis=axes, keepdims=keepdims))

    def bwd(g):
        if axes is None:
            return (np.broadcast_to(g.reshape((1,) * a.ndim), a.data.shape),)
        gg = g if keepdims else np.expand_dims(g, axes)
        return (np.broadcast_to(gg, a.data.shape),)

    return _record(out, (a,), bwd, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    axes = _norm_axes(axis, a.ndim)
    out = Tensor(a.data.mean(axis=axes, keepdims=keepdims))
    if axes is None:
        count = a.size
    else:
        count = int(np.prod([a.data.shape[ax] for ax in axes]))

    def bwd(g):
        gs = g / count
        if axes is None:
            return (np.broadcast_to(gs.reshape((1,) * a.ndim), a.data.shape),)
        gg = gs if keepdims else np.expand_dims(gs, axes)
        return (np.broadcast_to(gg, a.data.shape),)

    return _record(out, (a,), bwd, "mean")


# ---------------------------------------------------------------------------
# min/max with deterministic subgradients

def minimum(a, b) -> Tensor:
    """Elementwise min; on ties the gradient routes entirely to ``a``."""
    a, b = _pair(a, b)
    take_a = a.data <= b.data
    out = Tensor(np.where(take_a, a.data, b.data))

    def bwd(g):
        return (
            _unbroadcast(g * take_a, a.data.shape),
            _unbroadcast(g * ~take_a, b.data.shape),
        )

    return _record(out, (a, b), bwd, "minimum")


def maximum(a, b) -> Tensor:
    """Elementwise max; on ties the gradient routes entirely to ``a``."""
    a, b = _pair(a, b)
    take_a = a.data >= b.data
    out = Tensor(np.where(take_a, a.data, b.data))

    def bwd(g):
        return (
            _unbroadcast(g * take_a, a.data.shape),
            _unbroadcast(g * ~take_a, b.data.shape),
        )

    return _record(out, (a, b), bwd, "maximum")


def _group_extremum(s: Tensor, idx: np.ndarray, valid: np.ndarray, mode: str):
    if s.ndim not in (1, 2):
        raise AutodiffError("group reduction supports 1-d or 2-d scores only")
    sentinel = np.inf if mode == "min" else -np.inf
    gathered = s.data[..., idx]  # (..., K, L)
    masked = np.where(valid, gathered, s.data.dtype.type(sentinel))
    pos = masked.argmin(axis=-1) if mode == "min" else masked.argmax(axis=-1)
    k = idx.shape[0]
    achiever = idx[np.arange(k), pos]  # (..., K); ties hit the lowest index
    out = Tensor(np.take_along_axis(masked, pos[..., None], axis=-1)[..., 0])

    def bwd(g):
        ds = np.zeros_like(s.data)
        if s.ndim == 1:
            np.add.at(ds, achiever, g)
        else:
            rows = np.arange(s.data.shape[0])[:, None]
            np.add.at(ds, (rows, achiever), g)
        return (ds,)

    return _record(out, (s,), bwd, f"group_{mode}"), achiever


def group_min(s, idx: np.ndarray, valid: np.ndarray):
    """Per-entry min of ``s`` over index groups.

    ``idx``/``valid`` are (K, L) padded group tables with rows sorted
    ascending; returns (values, achiever) where achiever holds the index
    whose score realized each min (lowest index on ties) and receives the
    whole subgradient.
    """
    return _group_extremum(_lift(s), idx, valid, "min")


def group_max(s, idx: np.ndarray, valid: np.ndarray):
    return _group_extremum(_lift(s), idx, valid, "max")


# ---------------------------------------------------------------------------
# nonlinearities

def exp(a) -> Tensor:
    a = _lift(a)
    out = Tensor(np.exp(a.data))

    def bwd(g):
        return (g * out.data,)

    return _record(out, (a,), bwd, "exp")


def log(a) -> Tensor:
    """Natural log with the argument clipped below at 1e-12 (never raises)."""
    a = _lift(a)
    floored = np.maximum(a.data, LOG_FLOOR)
    out = Tensor(np.log(floored))

    def bwd(g):
        gx = g / floored
        gx *= a.data >= LOG_FLOOR
        return (gx,)

    return _record(out, (a,), bwd, "log")


def sigmoid(a) -> Tensor:
    a = _lift(a)
    flat = kernels.sigmoid_fwd(a.data.reshape(-1))
    out = Tensor(flat.reshape(a.data.shape))

    def bwd(g):
        return (g * out.data * (1.0 - out.data),)

    return _record(out, (a,), bwd, "sigmoid")


def gelu(a) -> Tensor:
    a = _lift(a)
    xf = a.data.reshape(-1)
    yf, uf = kernels.gelu_fwd(xf)
    out = Tensor(yf.reshape(a.data.shape))

    def bwd(g):
        gf = np.ascontiguousarray(g.reshape(-1))
        return (kernels.gelu_bwd(xf, uf, gf).reshape(a.data.shape),)

    return _record(out, (a,), bwd, "gelu")


def softmax(a) -> Tensor:
    """Softmax over the last axis."""
    a = _lift(a)
    cols = a.data.shape[-1]
    y2 = kernels.softmax_fwd(a.data.reshape(-1, cols))
    out = Tensor(y2.reshape(a.data.shape))

    def bwd(g):
        g2 = np.ascontiguousarray(g.reshape(-1, cols))
        return (kernels.softmax_bwd(y2, g2).reshape(a.data.shape),)

    return _record(out, (a,), bwd, "softmax")


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x, gamma = _pair(x, gamma)
    beta = _lift(beta, x)
    cols = x.data.shape[-1]
    if gamma.data.shape != (cols,) or beta.data.shape != (cols,):
        raise AutodiffError("layer_norm scale/shift must match the last axis")
    x2 = x.data.reshape(-1, cols)
    y2, xhat, rstd = kernels.layernorm_fwd(x2, gamma.data, beta.data, eps)
    out = Tensor(y2.reshape(x.data.shape))

    def bwd(g):
        g2 = np.ascontiguousarray(g.reshape(-1, cols))
        dx = kernels.layernorm_bwd(xhat, rstd, gamma.data, g2)
        dgamma = (g2 * xhat).sum(axis=0) if gamma.requires_grad else None
        dbeta = g2.sum(axis=0) if beta.requires_grad else None
        return dx.reshape(x.data.shape), dgamma, dbeta

    return _record(out, (x, gamma, beta), bwd, "layer_norm")


# ---------------------------------------------------------------------------
# gather / replace

def gather_rows(a, idx) -> Tensor:
    """Select rows along the first axis; repeated indices accumulate grads."""
    a = _lift(a)
    idx = np.asarray(idx, dtype=np.int64)
    out = Tensor(a.data[idx])

    def bwd(g):
        z = np.zeros_like(a.data)
        np.add.at(z, idx, g)
        return (z,)

    return _record(out, (a,), bwd, "gather_rows")


def mask_rows_replace(x, mask: np.ndarray, row) -> Tensor:
    """Replace rows selected by a boolean mask with a single learnable row.

    ``x`` is (N, D) or (B, N, D) with ``mask`` of shape (N,) or (B, N).
    Unselected rows pass through bit-identically; the row's gradient is the
    sum of the upstream gradients of all selected rows.
    """
    x = _lift(x)
    row = _lift(row, x)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.data.shape[:-1]:
        raise AutodiffError(
            f"mask shape {mask.shape} must match row layout {x.data.shape[:-1]}"
        )
    if row.data.shape != (x.data.shape[-1],):
        raise AutodiffError("replacement row must be a vector matching the last axis")
    out = Tensor(np.where(mask[..., None], row.data, x.data))

    def bwd(g):
        gx = g * ~mask[..., None] if x.requires_grad else None
        grow = None
        if row.requires_grad:
            picked = g[mask]
            grow = picked.reshape(-1, row.data.shape[0]).sum(axis=0)
            grow = grow.astype(row.data.dtype, copy=False)
        return gx, grow

    return _record(out, (x, row), bwd, "mask_rows_replace")
