"""Dense NCHW tensors with tape-based reverse-mode differentiation.

Operations are recorded only while a :class:`Tape` is active and at least one
input requires a gradient. Without an active tape every op is a plain numpy
computation, which is what inference and evaluation use.
"""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "ShapeError", "GradientError", "backward", "current_tape",
    "record_op", "elementwise", "add", "sub", "mul", "div", "neg", "relu",
    "sigmoid", "log", "clip", "sum", "mean", "reshape", "concat", "matmul_1x1",
]

DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    pass


class GradientError(RuntimeError):
    pass


_TAPES: list["Tape"] = []


def current_tape() -> Optional["Tape"]:
    return _TAPES[-1] if _TAPES else None


class Tensor:
    """A numpy array plus the bookkeeping needed to take part in a tape.

    ``grad`` stays ``None`` until a backward pass reaches this tensor as a
    leaf; detached tensors never allocate one.
    """

    __slots__ = ("data", "requires_grad", "grad", "node_id", "tape", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None and not isinstance(data, (np.ndarray, np.generic)):
            dtype = np.float32
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in DTYPES:
            arr = arr.astype(np.float32 if dtype is None else dtype)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node_id: Optional[int] = None
        self.tape: Optional[Tape] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, retain_graph: bool = False) -> None:
        backward(self, retain_graph=retain_graph)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Ordered record of differentiable operations for one step.

    Use as a context manager; ops executed inside the block are recorded in
    execution order, so the list is topologically sorted by construction.
    """

    def __init__(self):
        self.ops: list[tuple[tuple[Tensor, ...], int, BackwardFn]] = []
        self.leaves: dict[int, Tensor] = {}
        self._next_id = 0
        self.freed = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.ops)

    def record(self, inputs: Sequence[Tensor], out: Tensor, fn: BackwardFn) -> None:
        if self.freed:
            raise GradientError("cannot record on a tape that was already freed")
        for t in inputs:
            if t.requires_grad and t.node_id is None:
                self.leaves[id(t)] = t
        out.node_id = self._next_id
        out.tape = self
        self._next_id += 1
        self.ops.append((tuple(inputs), out.node_id, fn))

    def backward(self, root: Tensor, retain_graph: bool = False) -> None:
        if root.tape is not self or root.node_id is None:
            raise GradientError("backward root is not attached to this tape")
        if root.data.size != 1:
            raise GradientError(f"backward root must be scalar, got shape {root.shape}")
        if self.freed:
            raise GradientError("tape was freed by an earlier backward pass")
        grads: dict[int, np.ndarray] = {root.node_id: np.ones_like(root.data)}
        leaf_acc: dict[int, np.ndarray] = {}
        for inputs, out_id, fn in reversed(self.ops):
            g = grads.pop(out_id, None)
            if g is None:
                continue
            for t, gi in zip(inputs, fn(g)):
                if gi is None or not t.requires_grad:
                    continue
                if gi.shape != t.shape:
                    raise GradientError(
                        f"backward produced grad of shape {gi.shape} for input {t.shape}")
                if t.node_id is None:
                    key, store = id(t), leaf_acc
                else:
                    key, store = t.node_id, grads
                prev = store.get(key)
                store[key] = gi if prev is None else prev + gi
        for key, leaf in self.leaves.items():
            acc = leaf_acc.get(key)
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)
            if acc is not None:
                leaf.grad = leaf.grad + acc.astype(leaf.data.dtype, copy=False)
        if not retain_graph:
            self.ops = []
            self.freed = True


def backward(root: Tensor, retain_graph: bool = False) -> None:
    """Populate ``.grad`` on every leaf recorded on ``root``'s tape."""
    if root.tape is None or root.node_id is None:
        raise GradientError("backward root is detached (not produced under a Tape)")
    root.tape.backward(root, retain_graph=retain_graph)


def record_op(out_data: np.ndarray, inputs: Sequence[Tensor], fn: BackwardFn) -> Tensor:
    """Wrap ``out_data`` as a tensor and record ``fn`` if a tape wants it."""
    tape = current_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data)
    if needs:
        out.requires_grad = True
        tape.record(inputs, out, fn)
    return out


def _as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_pair(a, b) -> tuple[Tensor, Tensor, tuple]:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    try:
        shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"shapes {a.shape} and {b.shape} are not broadcastable") from None
    return a, b, shape


def add(a, b) -> Tensor:
    a, b, _ = _broadcast_pair(a, b)
    return record_op(a.data + b.data, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b, _ = _broadcast_pair(a, b)
    return record_op(a.data - b.data, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b, _ = _broadcast_pair(a, b)

    def fn(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return record_op(a.data * b.data, (a, b), fn)


def div(a, b) -> Tensor:
    a, b, _ = _broadcast_pair(a, b)
    out = a.data / b.data

    def fn(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return record_op(out, (a, b), fn)


def neg(a: Tensor) -> Tensor:
    return record_op(-a.data, (a,), lambda g: (-g,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return record_op(np.where(mask, a.data, 0).astype(a.dtype, copy=False), (a,),
                     lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    # tanh form: no overflow for large |x|, and sigmoid(0) is exactly 0.5
    s = (0.5 * (1.0 + np.tanh(0.5 * a.data))).astype(a.dtype, copy=False)
    return record_op(s, (a,), lambda g: (g * s * (1 - s),))


def log(a: Tensor) -> Tensor:
    return record_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    return record_op(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=a.dtype)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return record_op(out, (a,), fn)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    return record_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = list(tensors)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
                s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)):
            raise ShapeError(f"cannot concatenate shapes {ref} and {t.shape} on axis {axis}")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return record_op(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                     lambda g: tuple(np.ascontiguousarray(p)
                                     for p in np.split(g, bounds, axis=axis)))


_KINDS = {"add": add, "sub": sub, "mul": mul, "div": div}
_UNARY = {"relu": relu, "sigmoid": sigmoid, "neg": neg, "log": log}


def elementwise(kind: str, a: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Dispatch an elementwise op by name (``add``, ``mul``, ``relu``, ...)."""
    if kind in _UNARY:
        return _UNARY[kind](a)
    if kind in _KINDS:
        if b is None:
            raise ValueError(f"elementwise {kind!r} needs two operands")
        return _KINDS[kind](a, b)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def matmul_1x1(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Channel mixing: ``out[n,j,h,w] = sum_i x[n,i,h,w] * w[i,j] + b[j]``."""
    n, c, h, wd = x.shape
    if w.ndim != 2 or w.shape[0] != c:
        raise ShapeError(f"input has {c} channels but weight has shape {w.shape}")
    cout = w.shape[1]
    x3 = x.data.reshape(n, c, h * wd)
    out = np.matmul(w.data.T, x3)
    if b is not None:
        if b.shape != (cout,):
            raise ShapeError(f"bias shape {b.shape} does not match {cout} output channels")
        out += b.data[:, None]
    inputs = (x, w) if b is None else (x, w, b)

    def fn(g):
        g3 = g.reshape(n, cout, h * wd)
        gx = np.matmul(w.data, g3).reshape(x.shape) if x.requires_grad else None
        gw = np.tensordot(x3, g3, axes=([0, 2], [0, 2])) if w.requires_grad else None
        grads = [gx, gw]
        if b is not None:
            grads.append(g3.sum(axis=(0, 2)) if b.requires_grad else None)
        return grads

    return record_op(out.reshape(n, cout, h, wd), inputs, fn)
