"""Dense float64 tensors on a reverse-mode autodiff tape.

The core is deliberately small: a ``Tensor`` wraps a numpy array, each
primitive computes its result eagerly and, when a tape is active and any
input tracks gradients, appends a node holding per-input vector-Jacobian
callbacks.  ``Tape.backward`` sweeps the node list once in reverse append
order, which is a valid topological order by construction.

Elementwise binary ops broadcast only over leading batch axes (the smaller
operand's shape must be a suffix of the larger one's).  Everything is
float64: the gradient checker drives the test suite and needs the headroom.
"""
from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

Array = np.ndarray


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested primitive."""


class NumericError(FloatingPointError):
    """A value or primitive output contains NaN or Inf."""


class GraphError(RuntimeError):
    """Tape misuse: non-scalar loss, detached loss, or repeated backward."""


_TLS = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_TLS, "stack", None)
    if stack is None:
        stack = []
        _TLS.stack = stack
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Dense array, immutable by convention once created.

    Only ``grad`` buffers and optimizer-owned leaf parameters are ever
    mutated in place.  ``requires_grad`` on a leaf marks it as a target for
    gradient accumulation; on intermediates it is set by the recording
    machinery.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor created with non-finite values")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Array | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Operator sugar over the primitives below.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return subtract(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return multiply(self, other)
        return scale(self, float(other))

    def __rmul__(self, other) -> "Tensor":
        return scale(self, float(other))

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


_Node = tuple  # (out: Tensor, parents: tuple[Tensor, ...], vjps: tuple[Callable|None, ...])


class Tape:
    """Append-only record of primitive applications for one forward pass.

    Confined to a single thread; independent tapes may run concurrently.
    A tape is consumed by ``backward`` and cannot be swept twice.
    """

    __slots__ = ("_nodes", "_out_ids", "_consumed")

    def __init__(self) -> None:
        self._nodes: list[_Node] = []
        self._out_ids: set[int] = set()
        self._consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise GraphError("tape context exited out of order")
        stack.pop()

    @property
    def node_count(self) -> int:
        return len(self._nodes)

    def _record(self, out: Tensor, parents: tuple, vjps: tuple) -> None:
        self._nodes.append((out, parents, vjps))
        self._out_ids.add(id(out))

    def backward(self, loss: Tensor) -> None:
        """Populate ``grad`` on every requires-grad tensor reachable from ``loss``."""
        if self._consumed:
            raise GraphError("backward already ran on this tape; re-record the graph first")
        if loss.data.shape != ():
            raise GraphError(f"loss must be a scalar, got shape {loss.data.shape}")
        if id(loss) not in self._out_ids:
            raise GraphError("loss is detached from this tape")
        self._consumed = True
        loss.grad = np.ones((), dtype=np.float64)
        for out, parents, vjps in reversed(self._nodes):
            g = out.grad
            if g is None:
                continue
            for parent, vjp in zip(parents, vjps):
                if vjp is None or not parent.requires_grad:
                    continue
                contrib = vjp(g)
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += contrib
        self._nodes.clear()
        self._out_ids.clear()


def _make(out_data: Array, op: str, parents: Sequence[Tensor], vjps: Sequence[Callable | None]) -> Tensor:
    """Wrap a primitive result, validating finiteness and recording on the tape."""
    if not np.all(np.isfinite(out_data)):
        raise NumericError(f"{op}: non-finite values in output")
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.requires_grad = False
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape._record(out, tuple(parents), tuple(vjps))
    return out


def _reduce_to(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum a gradient over the leading axes introduced by broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    return grad


def _check_leading_broadcast(a: Array, b: Array, op: str) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    if len(sa) > len(sb) and sa[len(sa) - len(sb):] == sb:
        return
    if len(sb) > len(sa) and sb[len(sb) - len(sa):] == sa:
        return
    raise ShapeError(f"{op}: shapes {sa} and {sb} only broadcast over a leading batch axis")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_leading_broadcast(a.data, b.data, "add")
    return _make(
        a.data + b.data, "add", (a, b),
        (lambda g: _reduce_to(g, a.data.shape), lambda g: _reduce_to(g, b.data.shape)),
    )


def subtract(a: Tensor, b: Tensor) -> Tensor:
    _check_leading_broadcast(a.data, b.data, "subtract")
    return _make(
        a.data - b.data, "subtract", (a, b),
        (lambda g: _reduce_to(g, a.data.shape), lambda g: _reduce_to(-g, b.data.shape)),
    )


def multiply(a: Tensor, b: Tensor) -> Tensor:
    _check_leading_broadcast(a.data, b.data, "multiply")
    ad, bd = a.data, b.data
    return _make(
        ad * bd, "multiply", (a, b),
        (lambda g: _reduce_to(g * bd, ad.shape), lambda g: _reduce_to(g * ad, bd.shape)),
    )


def scale(a: Tensor, s: float) -> Tensor:
    return _make(a.data * s, "scale", (a,), (lambda g: g * s,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim == 2 and bd.ndim == 2:
        if ad.shape[1] != bd.shape[0]:
            raise ShapeError(f"matmul: inner dimensions differ: {ad.shape} @ {bd.shape}")
        return _make(
            ad @ bd, "matmul", (a, b),
            (lambda g: g @ bd.T, lambda g: ad.T @ g),
        )
    if ad.ndim == 3 and bd.ndim == 3:
        if ad.shape[0] != bd.shape[0] or ad.shape[2] != bd.shape[1]:
            raise ShapeError(f"matmul: batched shapes do not conform: {ad.shape} @ {bd.shape}")
        return _make(
            ad @ bd, "matmul", (a, b),
            (lambda g: g @ bd.transpose(0, 2, 1), lambda g: ad.transpose(0, 2, 1) @ g),
        )
    if ad.ndim == 3 and bd.ndim == 2:
        if ad.shape[2] != bd.shape[0]:
            raise ShapeError(f"matmul: inner dimensions differ: {ad.shape} @ {bd.shape}")
        k, n = bd.shape
        return _make(
            ad @ bd, "matmul", (a, b),
            (lambda g: g @ bd.T, lambda g: ad.reshape(-1, k).T @ g.reshape(-1, n)),
        )
    raise ShapeError(f"matmul: unsupported operand ranks {ad.ndim} and {bd.ndim}")


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.data.shape}")
    return _make(a.data.T, "transpose", (a,), (lambda g: g.T,))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    if int(np.prod(shape)) != a.data.size:
        raise ShapeError(f"reshape: cannot view {a.data.shape} as {shape}")
    old = a.data.shape
    return _make(a.data.reshape(shape), "reshape", (a,), (lambda g: g.reshape(old),))


def sum_axis(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        return _make(
            np.asarray(a.data.sum()), "sum", (a,),
            (lambda g: np.full(a.data.shape, g),),
        )
    _check_axis(a, axis, "sum")
    return _make(
        a.data.sum(axis=axis), "sum", (a,),
        (lambda g: np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy(),),
    )


def mean_axis(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        n = a.data.size
        return _make(
            np.asarray(a.data.mean()), "mean", (a,),
            (lambda g: np.full(a.data.shape, g / n),),
        )
    _check_axis(a, axis, "mean")
    n = a.data.shape[axis]
    return _make(
        a.data.mean(axis=axis), "mean", (a,),
        (lambda g: np.broadcast_to(np.expand_dims(g / n, axis), a.data.shape).copy(),),
    )


def _check_axis(a: Tensor, axis: int, op: str) -> None:
    if not -a.data.ndim <= axis < a.data.ndim:
        raise ShapeError(f"{op}: axis {axis} out of range for shape {a.data.shape}")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeError("concat: need at least one input")
    datas = [t.data for t in tensors]
    base = list(datas[0].shape)
    for d in datas[1:]:
        other = list(d.shape)
        if len(other) != len(base) or any(
            i != axis % len(base) and other[i] != base[i] for i in range(len(base))
        ):
            raise ShapeError(f"concat: incompatible shapes {[d.shape for d in datas]} along axis {axis}")
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i: int):
        lo, hi = offsets[i], offsets[i + 1]

        def vjp(g):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            return g[tuple(index)]

        return vjp

    return _make(out, "concat", tuple(tensors), tuple(make_vjp(i) for i in range(len(datas))))


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    _check_axis(a, axis, "slice")
    extent = a.data.shape[axis]
    if not 0 <= start <= stop <= extent:
        raise ShapeError(f"slice: window [{start}, {stop}) outside axis {axis} of shape {a.data.shape}")
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def vjp(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return full

    return _make(a.data[index], "slice", (a,), (vjp,))


def stack(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeError("stack: need at least one input")
    shape = tensors[0].data.shape
    for t in tensors[1:]:
        if t.data.shape != shape:
            raise ShapeError(f"stack: mismatched input shapes {shape} vs {t.data.shape}")
    out = np.stack([t.data for t in tensors], axis=axis)

    def make_vjp(i: int):
        return lambda g: np.take(g, i, axis=axis)

    return _make(out, "stack", tuple(tensors), tuple(make_vjp(i) for i in range(len(tensors))))


def sigmoid(a: Tensor) -> Tensor:
    out = np.exp(-np.logaddexp(0.0, -a.data))

    def vjp(g):
        return g * out * (1.0 - out)

    return _make(out, "sigmoid", (a,), (vjp,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def vjp(g):
        return g * (1.0 - out * out)

    return _make(out, "tanh", (a,), (vjp,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def vjp(g):
        return g * mask

    return _make(np.where(mask, a.data, 0.0), "relu", (a,), (vjp,))


def absolute(a: Tensor) -> Tensor:
    sign = np.sign(a.data)

    def vjp(g):
        return g * sign

    return _make(np.abs(a.data), "abs", (a,), (vjp,))


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    ad = a.data

    def vjp(g):
        return g / ad

    return _make(out, "log", (a,), (vjp,))


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by max subtraction."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return p * (g - (g * p).sum(axis=-1, keepdims=True))

    return _make(p, "softmax", (a,), (vjp,))


# Binary serialization: u32 rank, u32 extents, little-endian f64 payload.
# Checkpoint files are built from these blocks.


def write_array(buf: bytearray, arr: Array) -> None:
    buf += np.uint32(arr.ndim).tobytes()
    buf += np.asarray(arr.shape, dtype="<u4").tobytes()
    buf += np.ascontiguousarray(arr, dtype="<f8").tobytes()


def read_array(blob: bytes, pos: int) -> tuple[Array, int]:
    ndim = int(np.frombuffer(blob, "<u4", 1, pos)[0])
    pos += 4
    shape = tuple(int(x) for x in np.frombuffer(blob, "<u4", ndim, pos))
    pos += 4 * ndim
    n = int(np.prod(shape)) if shape else 1
    arr = np.frombuffer(blob, "<f8", n, pos).reshape(shape).copy()
    pos += 8 * n
    return arr, pos
