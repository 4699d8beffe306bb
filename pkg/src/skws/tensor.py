"""Dense tensors with reverse-mode automatic differentiation.

Storage is a flat row-major numpy array (float32 by default, float64 for
verification runs). Every operation whose inputs require gradients records a
backward rule on the active :class:`Tape`; ``backward(loss)`` replays the tape
in reverse and accumulates adjoints into ``.grad`` buffers. The tape is a
plain Wengert list: execution order is already a topological order, so no
graph traversal is needed.

Broadcasting is deliberately limited to numpy's trailing-dimension alignment
plus scalar broadcast, which covers everything the model needs.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError, StateError

Array = np.ndarray

_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """N-dimensional float array, optionally tracked by the autodiff tape.

    Attributes:
        data: the value, a C-contiguous numpy array.
        requires_grad: whether backward() accumulates adjoints here.
        grad: adjoint buffer of identical shape. Leaf tensors created with
            requires_grad=True hold a zero buffer from the start; op outputs
            receive theirs lazily during backward and release them as soon
            as their producer's rule has run.
        name: optional label used in diagnostics.
    """

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = ""):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in _FLOAT_DTYPES:
                dtype = data.dtype
            else:
                dtype = np.float32
        self.data: Array = np.ascontiguousarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[Array] = np.zeros_like(self.data) if requires_grad else None
        self.name = name

    @property
    def shape(self) -> tuple:
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
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """View of the same values outside the autodiff graph."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"

    # operator sugar; all dispatch to the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("out", "inputs", "bwd", "label")

    def __init__(self, out, inputs, bwd, label):
        self.out = out
        self.inputs = inputs
        self.bwd = bwd
        self.label = label


class Tape:
    """Ordered record of differentiable operations for one forward pass.

    Replaying the recorded backward rules in reverse order yields adjoints for
    every requires_grad tensor reachable from the loss. ``backward`` consumes
    the tape; calling it again before new operations are recorded is an error.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._spent = False

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, out: Tensor, inputs: Sequence[Tensor], bwd: Callable, label: str) -> None:
        self._nodes.append(_Node(out, tuple(inputs), bwd, label))
        self._spent = False

    def clear(self) -> None:
        self._nodes.clear()

    def first_nonfinite(self) -> Optional[tuple[str, Tensor]]:
        """Earliest recorded output containing NaN/Inf, if any."""
        for node in self._nodes:
            if not np.isfinite(node.out.data).all():
                return node.label, node.out
        return None

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ContractError(f"backward expects a scalar loss, got shape {loss.shape}")
        if self._spent and not self._nodes:
            raise StateError("backward called twice on a consumed tape; run a new forward first")
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data)
            for node in reversed(self._nodes):
                out_grad = node.out.grad
                if out_grad is None:
                    continue  # no gradient reached this output
                grads = node.bwd(out_grad)
                for tensor, g in zip(node.inputs, grads):
                    if g is not None and tensor.requires_grad:
                        g = g.astype(tensor.data.dtype, copy=False)
                        if tensor.grad is None:
                            tensor.grad = g.copy()
                        else:
                            tensor.grad += g
                # intermediate adjoints are complete once their producer runs
                node.out.grad = None
        self._nodes.clear()
        self._spent = True


class _TapeState(threading.local):
    def __init__(self):
        self.tape = Tape()
        self.enabled = True


_STATE = _TapeState()


def active_tape() -> Tape:
    return _STATE.tape


def is_recording() -> bool:
    return _STATE.enabled


class use_tape:
    """Context manager installing an independent tape on this thread."""

    def __init__(self, tape: Optional[Tape] = None):
        self.tape = tape if tape is not None else Tape()
        self._prev = None

    def __enter__(self) -> Tape:
        self._prev = _STATE.tape
        _STATE.tape = self.tape
        return self.tape

    def __exit__(self, *exc):
        _STATE.tape = self._prev
        return False


class no_grad:
    """Context manager disabling tape recording (inference mode)."""

    def __enter__(self):
        self._prev = _STATE.enabled
        _STATE.enabled = False
        return self

    def __exit__(self, *exc):
        _STATE.enabled = self._prev
        return False


def record_op(data: Array, inputs: Sequence[Tensor], bwd: Callable, label: str = "op") -> Tensor:
    """Wrap an op result and register its backward rule on the active tape.

    ``bwd(out_grad)`` must return one gradient array (or None) per input,
    already reduced to that input's exact shape. This is the extension point
    used by the convolution, firing and loss ops in the other modules.
    """
    requires = is_recording() and any(t.requires_grad for t in inputs)
    out = Tensor(data)
    if requires:
        # adjoint buffers for intermediates are allocated lazily in backward
        out.requires_grad = True
        _STATE.tape.record(out, inputs, bwd, label)
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into t.grad for every reachable tensor."""
    _STATE.tape.backward(loss)


# ---------------------------------------------------------------------------
# broadcasting helpers

def _check_broadcast(a_shape: tuple, b_shape: tuple) -> None:
    try:
        np.broadcast_shapes(a_shape, b_shape)
    except ValueError:
        raise DimensionError(
            f"shapes {a_shape} and {b_shape} are not broadcast-compatible"
        ) from None


def _unbroadcast(grad: Array, shape: tuple) -> Array:
    """Sum a broadcast gradient back down to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float32))


# ---------------------------------------------------------------------------
# elementwise ops

def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    data = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record_op(data, (a, b), bwd, "add")


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    data = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return record_op(data, (a, b), bwd, "sub")


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, (int, float)):
        return scale(a, float(b))
    b = _as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    data = a.data * b.data
    a_data, b_data = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * b_data, a.shape), _unbroadcast(g * a_data, b.shape)

    return record_op(data, (a, b), bwd, "mul")


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def bwd(g):
        return (g * s,)

    return record_op(a.data * np.asarray(s, dtype=a.dtype), (a,), bwd, "scale")


def div(a: Tensor, b) -> Tensor:
    if isinstance(b, (int, float)):
        return scale(a, 1.0 / float(b))
    b = _as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    data = a.data / b.data
    a_data, b_data = a.data, b.data

    def bwd(g):
        ga = _unbroadcast(g / b_data, a.shape)
        gb = _unbroadcast(-g * a_data / (b_data * b_data), b.shape)
        return ga, gb

    return record_op(data, (a, b), bwd, "div")


def sigmoid(a: Tensor) -> Tensor:
    # naive form is total in IEEE floats: exp overflow saturates to 0/1
    with np.errstate(over="ignore"):
        y = 1.0 / (1.0 + np.exp(-a.data))

    def bwd(g):
        return (g * y * (1.0 - y),)

    return record_op(y, (a,), bwd, "sigmoid")


def relu(a: Tensor) -> Tensor:
    y = np.maximum(a.data, 0)
    mask = a.data > 0

    def bwd(g):
        return (g * mask,)

    return record_op(y, (a,), bwd, "relu")


def sqrt(a: Tensor) -> Tensor:
    y = np.sqrt(a.data)

    def bwd(g):
        return (g * (0.5 / y),)

    return record_op(y, (a,), bwd, "sqrt")


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "scale": scale,
                "sigmoid": sigmoid, "relu": relu}


def elementwise(kind: str, a: Tensor, b=None) -> Tensor:
    """Dispatch an elementwise op by name.

    kind must be one of add, sub, mul, scale, sigmoid, relu; binary kinds
    require b (a tensor, or a float for scale).
    """
    if kind not in _ELEMENTWISE:
        raise ContractError(f"unknown elementwise op kind {kind!r}")
    fn = _ELEMENTWISE[kind]
    if kind in ("sigmoid", "relu"):
        if b is not None:
            raise ContractError(f"{kind} is unary")
        return fn(a)
    if b is None:
        raise ContractError(f"{kind} requires two operands")
    return fn(a, b)


# ---------------------------------------------------------------------------
# linear algebra and shape ops

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} vs {b.shape}")
    data = a.data @ b.data
    a_data, b_data = a.data, b.data

    def bwd(g):
        return g @ b_data.T, a_data.T @ g

    return record_op(data, (a, b), bwd, "matmul")


def _norm_axes(axes, ndim: int) -> tuple:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(ax % ndim for ax in axes)


def reduce_sum(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    """Sum over the given axes (all axes by default), accumulating in float64."""
    axes_t = _norm_axes(axes, a.ndim)
    data = a.data.sum(axis=axes_t, keepdims=keepdims, dtype=np.float64).astype(a.dtype)
    in_shape = a.shape

    def bwd(g):
        if not keepdims:
            expand = list(in_shape)
            for ax in axes_t:
                expand[ax] = 1
            g = g.reshape(expand)
        return (np.broadcast_to(g, in_shape),)

    return record_op(data, (a,), bwd, "reduce_sum")


def reduce_mean(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    axes_t = _norm_axes(axes, a.ndim)
    count = 1
    for ax in axes_t:
        count *= a.shape[ax]
    if count == 0:
        raise ContractError("reduce_mean over zero elements")
    data = a.data.mean(axis=axes_t, keepdims=keepdims, dtype=np.float64).astype(a.dtype)
    in_shape = a.shape
    inv = 1.0 / count

    def bwd(g):
        if not keepdims:
            expand = list(in_shape)
            for ax in axes_t:
                expand[ax] = 1
            g = g.reshape(expand)
        return (np.broadcast_to(g * inv, in_shape),)

    return record_op(data, (a,), bwd, "reduce_mean")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    data = a.data.reshape(shape)
    in_shape = a.shape

    def bwd(g):
        return (g.reshape(in_shape),)

    return record_op(np.ascontiguousarray(data), (a,), bwd, "reshape")


def concat0(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along axis 0; the backward rule splits the gradient."""
    if not parts:
        raise ContractError("concat0 of zero tensors")
    trailing = parts[0].shape[1:]
    for p in parts[1:]:
        if p.shape[1:] != trailing:
            raise DimensionError(
                f"concat0 trailing shapes differ: {parts[0].shape} vs {p.shape}")
    data = np.concatenate([p.data for p in parts], axis=0)
    sizes = [p.shape[0] for p in parts]

    def bwd(g):
        out, off = [], 0
        for n in sizes:
            out.append(g[off:off + n])
            off += n
        return tuple(out)

    return record_op(data, tuple(parts), bwd, "concat0")


def slice0(a: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous slice along axis 0 (copied, so tensors stay immutable)."""
    if not (0 <= start <= stop <= a.shape[0]):
        raise DimensionError(f"slice0 [{start}:{stop}] out of range for shape {a.shape}")
    data = a.data[start:stop].copy()
    in_shape = a.shape

    def bwd(g):
        full = np.zeros(in_shape, dtype=g.dtype)
        full[start:stop] = g
        return (full,)

    return record_op(data, (a,), bwd, "slice0")
