"""
Dense float64 tensors with tape-based reverse-mode differentiation.

A ``Tape`` is opened as a context manager; while it is active, every primitive whose
inputs include a tensor with ``requires_grad`` is recorded together with its
vector-Jacobian product. ``Tape.backward(loss)`` replays the record in reverse.
Outside a tape (or inside ``no_grad()``) the same primitives just compute values, which
is how inference and the pseudo molecule estimation branch run.
"""
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from pocketdiff.api.dependencies.custom_exception import (
    EmptyTapeError,
    NonFiniteError,
    NonScalarLossError,
    ShapeMismatchError,
)
from pocketdiff.schemas.enums import OpKind


ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]
VJP = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

_active_tape: ContextVar[Optional["Tape"]] = ContextVar("active_tape", default=None)


class Tensor:
    """Immutable float64 array that may participate in a recorded computation."""

    __slots__ = ("data", "requires_grad", "name")
    __array_priority__ = 1000

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.array(data, dtype=np.float64)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        out = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64).view()
        arr.flags.writeable = False
        out.data = arr
        out.requires_grad = False
        out.name = None
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeMismatchError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        if np.isscalar(other):
            return scalar_mul(self, float(other))
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        if np.isscalar(other):
            return scalar_mul(self, float(other))
        return mul(other, self)

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        if np.isscalar(other):
            return scalar_mul(self, 1.0 / float(other))
        return div(self, other)

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return div(other, self)

    def __neg__(self) -> "Tensor":
        return scalar_mul(self, -1.0)

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, key) -> "Tensor":
        return slice_(self, key)


@dataclass(eq=False)
class Node:
    """One recorded primitive: its inputs, its output and the local gradient rule."""
    op: OpKind
    inputs: Tuple[Tensor, ...]
    output: Tensor
    vjp: VJP


class Gradients:
    """Gradient buffers produced by a backward pass, keyed by tensor identity."""

    def __init__(self, buffers: Dict[int, np.ndarray], tensors: Dict[int, Tensor]):
        self._buffers = buffers
        self._tensors = tensors

    def __getitem__(self, tensor: Tensor) -> np.ndarray:
        grad = self._buffers.get(id(tensor))
        if grad is None or self._tensors.get(id(tensor)) is not tensor:
            return np.zeros(tensor.shape)
        return grad

    def __contains__(self, tensor: Tensor) -> bool:
        return self._tensors.get(id(tensor)) is tensor

    def __len__(self) -> int:
        return len(self._buffers)


class Tape:
    """Ordered record of primitives executed while the tape is active."""

    def __init__(self):
        self.nodes: List[Node] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> Gradients:
        """
        Propagate d(loss)/d(·) to every tensor reachable from ``loss``.

        Raises:
            NonScalarLossError: loss has more than one element.
            EmptyTapeError: nothing was recorded.
        """
        if loss.size != 1:
            raise NonScalarLossError(
                f"backward() needs a scalar loss, got shape {loss.shape}",
                errors={"shape": list(loss.shape)},
            )
        if not self.nodes:
            raise EmptyTapeError("backward() called on an empty tape")

        buffers: Dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
        tensors: Dict[int, Tensor] = {id(loss): loss}
        for node in reversed(self.nodes):
            upstream = buffers.get(id(node.output))
            if upstream is None:
                continue
            for inp, grad in zip(node.inputs, node.vjp(upstream)):
                if grad is None or not inp.requires_grad:
                    continue
                grad = _unbroadcast(grad, inp.shape)
                key = id(inp)
                if key in buffers:
                    buffers[key] = buffers[key] + grad
                else:
                    buffers[key] = grad
                    tensors[key] = inp
        return Gradients(buffers, tensors)


@contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording; primitives still compute values."""
    token = _active_tape.set(None)
    try:
        yield
    finally:
        _active_tape.reset(token)


def as_tensor(value: ArrayLike) -> Tensor:
    if isinstance(value, Tensor):
        return value
    # private copy; the caller's array stays writable
    return Tensor._wrap(np.array(value, dtype=np.float64))


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(op: OpKind, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(
            f"{op.value}: cannot combine shapes {a.shape} and {b.shape}",
            errors={"op": op.value, "left": list(a.shape), "right": list(b.shape)},
        )


def _emit(op: OpKind, value: np.ndarray, inputs: Tuple[Tensor, ...], vjp: VJP) -> Tensor:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(
            f"{op.value} produced a non-finite value",
            errors={"op": op.value, "shapes": [list(t.shape) for t in inputs]},
        )
    out = Tensor._wrap(value)
    tape = _active_tape.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(Node(op, inputs, out, vjp))
    return out


def primitive_forward(op: Union[OpKind, str], *inputs: ArrayLike, **kwargs) -> Tensor:
    """Dispatch a primitive by kind; the typed functions below are the usual entry points."""
    op = OpKind(op)
    return _PRIMITIVES[op](*inputs, **kwargs)


# elementwise binary

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(OpKind.ADD, a, b)
    return _emit(OpKind.ADD, a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(OpKind.SUB, a, b)
    return _emit(OpKind.SUB, a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(OpKind.MUL, a, b)
    return _emit(OpKind.MUL, a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(OpKind.DIV, a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        value = a.data / b.data
    return _emit(
        OpKind.DIV,
        value,
        (a, b),
        lambda g: (g / b.data, -g * a.data / (b.data * b.data)),
    )


def scalar_mul(a: ArrayLike, c: float) -> Tensor:
    a = as_tensor(a)
    return _emit(OpKind.SCALAR_MUL, a.data * c, (a,), lambda g: (g * c,))


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(
            f"matmul: cannot multiply shapes {a.shape} and {b.shape}",
            errors={"op": "matmul", "left": list(a.shape), "right": list(b.shape)},
        )
    return _emit(OpKind.MATMUL, a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


# reductions

def _expand_reduced(g: np.ndarray, shape: Tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum_(a: ArrayLike, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    return _emit(
        OpKind.SUM,
        np.sum(a.data, axis=axis, keepdims=keepdims),
        (a,),
        lambda g: (_expand_reduced(g, a.shape, axis, keepdims),),
    )


def mean(a: ArrayLike, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else a.shape[axis]
    return _emit(
        OpKind.MEAN,
        np.mean(a.data, axis=axis, keepdims=keepdims),
        (a,),
        lambda g: (_expand_reduced(g, a.shape, axis, keepdims) / count,),
    )


def squared_norm(a: ArrayLike, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    return _emit(
        OpKind.SQUARED_NORM,
        np.sum(a.data * a.data, axis=axis, keepdims=keepdims),
        (a,),
        lambda g: (2.0 * a.data * _expand_reduced(g, a.shape, axis, keepdims),),
    )


def segment_sum(a: ArrayLike, index: np.ndarray, num_segments: int) -> Tensor:
    """Sum rows of ``a`` into ``num_segments`` buckets given by ``index`` (scatter-add)."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    if index.shape != (a.shape[0],):
        raise ShapeMismatchError(
            f"segment-sum: index shape {index.shape} does not match rows of {a.shape}",
            errors={"op": "segment-sum", "left": list(a.shape), "right": list(index.shape)},
        )
    out = np.zeros((num_segments,) + a.shape[1:])
    np.add.at(out, index, a.data)
    return _emit(OpKind.SEGMENT_SUM, out, (a,), lambda g: (g[index],))


# structural

def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    parts = tuple(as_tensor(t) for t in tensors)
    try:
        value = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        raise ShapeMismatchError(
            f"concat: incompatible shapes {[p.shape for p in parts]} along axis {axis}",
            errors={"op": "concat", "shapes": [list(p.shape) for p in parts]},
        )
    splits = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return _emit(OpKind.CONCAT, value, parts, lambda g: tuple(np.split(g, splits, axis=axis)))


def slice_(a: ArrayLike, key) -> Tensor:
    """Basic or integer-array indexing; repeated indices accumulate in the gradient."""
    a = as_tensor(a)
    try:
        value = a.data[key]
    except IndexError as e:
        raise ShapeMismatchError(f"slice: {e} for shape {a.shape}", errors={"op": "slice"})

    def vjp(g: np.ndarray):
        grad = np.zeros(a.shape)
        np.add.at(grad, key, g)
        return (grad,)

    return _emit(OpKind.SLICE, np.array(value), (a,), vjp)


# elementwise unary

def relu(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    mask = (a.data > 0).astype(np.float64)
    return _emit(OpKind.RELU, a.data * mask, (a,), lambda g: (g * mask,))


def silu(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    sig = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    value = a.data * sig
    return _emit(OpKind.SILU, value, (a,), lambda g: (g * (sig + value * (1.0 - sig)),))


def tanh(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    value = np.tanh(a.data)
    return _emit(OpKind.TANH, value, (a,), lambda g: (g * (1.0 - value * value),))


def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        value = np.exp(a.data)
    return _emit(OpKind.EXP, value, (a,), lambda g: (g * value,))


def log(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        value = np.log(a.data)
    return _emit(OpKind.LOG, value, (a,), lambda g: (g / a.data,))


def sqrt(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        value = np.sqrt(a.data)
    return _emit(OpKind.SQRT, value, (a,), lambda g: (g * 0.5 / value,))


def softmax(a: ArrayLike, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = np.exp(a.data - np.max(a.data, axis=axis, keepdims=True))
    value = shifted / np.sum(shifted, axis=axis, keepdims=True)

    def vjp(g: np.ndarray):
        return (value * (g - np.sum(g * value, axis=axis, keepdims=True)),)

    return _emit(OpKind.SOFTMAX, value, (a,), vjp)


_PRIMITIVES: Dict[OpKind, Callable[..., Tensor]] = {
    OpKind.ADD: add,
    OpKind.SUB: sub,
    OpKind.MUL: mul,
    OpKind.DIV: div,
    OpKind.SCALAR_MUL: scalar_mul,
    OpKind.MATMUL: matmul,
    OpKind.SUM: sum_,
    OpKind.MEAN: mean,
    OpKind.SEGMENT_SUM: segment_sum,
    OpKind.CONCAT: concat,
    OpKind.SLICE: slice_,
    OpKind.RELU: relu,
    OpKind.SILU: silu,
    OpKind.TANH: tanh,
    OpKind.EXP: exp,
    OpKind.LOG: log,
    OpKind.SQRT: sqrt,
    OpKind.SOFTMAX: softmax,
    OpKind.SQUARED_NORM: squared_norm,
}


def finite_difference_check(
    f: Callable[[Tensor], Tensor],
    x: ArrayLike,
    h: float = 1e-5,
) -> float:
    """
    Compare the taped gradient of scalar ``f`` at ``x`` against central differences.

    Returns:
        float: max over components of |analytic - numeric| / (|analytic| + |numeric| + 1e-12)
    """
    if h <= 0:
        raise ShapeMismatchError("finite_difference_check: step h must be positive", errors={"h": h})
    base = np.array(as_tensor(x).data, dtype=np.float64)

    with Tape() as tape:
        leaf = Tensor(base, requires_grad=True)
        out = f(leaf)
        if out.requires_grad:
            analytic = tape.backward(out)[leaf]
        else:
            analytic = np.zeros(base.shape)

    numeric = np.zeros(base.shape)
    flat = numeric.reshape(-1)
    with no_grad():
        for i in range(base.size):
            plus = base.copy().reshape(-1)
            minus = base.copy().reshape(-1)
            plus[i] += h
            minus[i] -= h
            f_plus = f(Tensor(plus.reshape(base.shape))).item()
            f_minus = f(Tensor(minus.reshape(base.shape))).item()
            flat[i] = (f_plus - f_minus) / (2.0 * h)

    rel = np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-12)
    return float(np.max(rel)) if rel.size else 0.0
