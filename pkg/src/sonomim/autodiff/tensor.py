"""Dense tensors and the reverse-mode tape.

A ``Tape`` records primitive ops in execution order while it is the active
context; ``backward`` replays the records in exact reverse, accumulating
gradients across fan-out. Running ``backward`` twice on the same tape gives
identical results: the tape itself is never mutated by a backward pass.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

FLOAT_DTYPES = (np.float32, np.float64)


class AutodiffError(ValueError):
    pass


class Tensor:
    """Contiguous row-major float32/float64 n-d array, optionally tracked."""

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # arithmetic sugar; the real work lives in ops.py
    def __add__(self, other):
        from sonomim.autodiff import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from sonomim.autodiff import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from sonomim.autodiff import ops

        return ops.sub(other, self)

    def __mul__(self, other):
        from sonomim.autodiff import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from sonomim.autodiff import ops

        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from sonomim.autodiff import ops

        return ops.matmul(self, other)

    def reshape(self, *shape):
        from sonomim.autodiff import ops

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, axes):
        from sonomim.autodiff import ops

        return ops.transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        from sonomim.autodiff import ops

        return ops.sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from sonomim.autodiff import ops

        return ops.mean(self, axis=axis, keepdims=keepdims)


class _TapeNode:
    __slots__ = ("out", "inputs", "backward_fn", "op")

    def __init__(self, out, inputs, backward_fn, op):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.op = op


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Execution-ordered record of primitive ops."""

    def __init__(self):
        self._nodes: list[_TapeNode] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self._nodes)

    def record(
        self,
        out: Tensor,
        inputs: Sequence[Tensor],
        backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]],
        op: str = "",
    ) -> None:
        self._nodes.append(_TapeNode(out, tuple(inputs), backward_fn, op))


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class GradMap:
    """Gradients keyed by tensor identity."""

    def __init__(self, grads: dict[int, np.ndarray], tensors: dict[int, Tensor]):
        self._grads = grads
        self._tensors = tensors  # keeps ids alive

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._grads

    def __getitem__(self, t: Tensor) -> Tensor:
        try:
            return Tensor(self._grads[id(t)])
        except KeyError:
            raise KeyError("no gradient recorded for this tensor") from None

    def get(self, t: Tensor, default=None):
        return self[t] if t in self else default

    def raw(self, t: Tensor) -> np.ndarray:
        return np.ascontiguousarray(self._grads[id(t)])


def backward(loss: Tensor, tape: Tape) -> GradMap:
    """Gradient of a scalar loss w.r.t. every tensor reached on the tape."""
    if loss.data.size != 1:
        raise AutodiffError(f"loss must be scalar, got shape {loss.data.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    tensors: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape._nodes):
        g = grads.get(id(node.out))
        if g is None:
            continue
        input_grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, input_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            acc = grads.get(key)
            if acc is None:
                # Returned grads may alias the upstream grad (identity-like
                # ops return g for several inputs), so never mutate in place.
                grads[key] = gi
                tensors[key] = t
            else:
                grads[key] = acc + gi
    return GradMap(grads, tensors)
