"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`DiffTensor` wraps a numpy array. Operations on tensors that require
gradients are recorded on the active :class:`Tape` of the current execution
context; :func:`backward` walks the tape in reverse recording order.
"""

import contextlib
import contextvars
import logging
from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Sequence, Union

import numpy as np

from .errors import ContractError, DimensionError, StaleHandleError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence]
BackwardFn = Callable[[np.ndarray], tuple[Optional[np.ndarray], ...]]


@dataclass(frozen=True)
class TapeHandle:
    """Reference to a node on a tape, valid for one tape generation."""

    index: int
    generation: int


@dataclass
class TapeNode:
    """One recorded operation."""

    op: str
    output: "DiffTensor"
    inputs: tuple["DiffTensor", ...]
    backward: BackwardFn


class Tape:
    """Ordered record of differentiable operations.

    Recording order is a topological order of the computation graph, so a
    reverse scan visits every node after all of its consumers.
    """

    def __init__(self):
        self._nodes: list[TapeNode] = []
        self.generation = 0

    def __len__(self) -> int:
        return len(self._nodes)

    def record(
        self,
        op: str,
        output: "DiffTensor",
        inputs: Sequence["DiffTensor"],
        backward: BackwardFn,
    ) -> TapeHandle:
        self._nodes.append(TapeNode(op, output, tuple(inputs), backward))
        return TapeHandle(len(self._nodes) - 1, self.generation)

    def node(self, handle: TapeHandle) -> TapeNode:
        """Dereference a handle, rejecting handles from earlier generations."""
        if handle.generation != self.generation or handle.index >= len(self._nodes):
            raise StaleHandleError(
                f"tape handle {handle.index} (generation {handle.generation}) is stale; "
                f"tape is at generation {self.generation} with {len(self._nodes)} nodes"
            )
        return self._nodes[handle.index]

    def reset(self) -> None:
        self._nodes.clear()
        self.generation += 1

    def backward(self, root: "DiffTensor") -> None:
        root_node = self.node(root.tape_id)
        pending: dict[int, np.ndarray] = {root.tape_id.index: np.ones_like(root.values)}
        visited = 0

        for index in range(root.tape_id.index, -1, -1):
            upstream = pending.pop(index, None)
            if upstream is None:
                continue
            node = self._nodes[index]
            node.output.grad = upstream
            visited += 1

            for tensor, grad in zip(node.inputs, node.backward(upstream)):
                if grad is None or not tensor.requires_grad:
                    continue
                if tensor.tape_id is None:
                    tensor.grad += grad
                else:
                    key = tensor.tape_id.index
                    if key in pending:
                        pending[key] = pending[key] + grad
                    else:
                        pending[key] = grad

        logger.debug(f"Backward from '{root_node.op}' visited {visited}/{len(self)} nodes")


_ACTIVE_TAPE: contextvars.ContextVar[Optional[Tape]] = contextvars.ContextVar(
    "avm_active_tape", default=None
)
_GRAD_ENABLED: contextvars.ContextVar[bool] = contextvars.ContextVar(
    "avm_grad_enabled", default=True
)


def get_tape() -> Tape:
    """Return the active tape of this execution context, creating one on demand."""
    tape = _ACTIVE_TAPE.get()
    if tape is None:
        tape = Tape()
        _ACTIVE_TAPE.set(tape)
    return tape


@contextlib.contextmanager
def tape_scope() -> Iterator[Tape]:
    """Run a block on a fresh tape; the tape is reset when the block exits."""
    tape = Tape()
    token = _ACTIVE_TAPE.set(tape)
    try:
        yield tape
    finally:
        tape.reset()
        _ACTIVE_TAPE.reset(token)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable recording; every op result is a constant."""
    token = _GRAD_ENABLED.set(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.reset(token)


class DiffTensor:
    """Dense float64 array participating in reverse-mode differentiation."""

    __array_priority__ = 100

    def __init__(self, values: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        self.values = np.array(values, dtype=np.float64)
        self._grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.tape: Optional[Tape] = None
        self.tape_id: Optional[TapeHandle] = None
        self.name = name

    @classmethod
    def _wrap(cls, values: np.ndarray) -> "DiffTensor":
        tensor = cls.__new__(cls)
        tensor.values = np.asarray(values, dtype=np.float64)
        tensor._grad = None
        tensor.requires_grad = False
        tensor.tape = None
        tensor.tape_id = None
        tensor.name = None
        return tensor

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.values)
        return self._grad

    @grad.setter
    def grad(self, value: np.ndarray) -> None:
        self._grad = np.asarray(value, dtype=np.float64).reshape(self.values.shape)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def zero_grad(self) -> None:
        self._grad = None

    def item(self) -> float:
        return float(self.values)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"DiffTensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

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
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> "DiffTensor":
        return reduce(self, "sum", axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "DiffTensor":
        return reduce(self, "mean", axis, keepdims)

    def reshape(self, *shape) -> "DiffTensor":
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes) -> "DiffTensor":
        return transpose(self, axes if axes else None)


def as_tensor(value: Union[DiffTensor, ArrayLike]) -> DiffTensor:
    if isinstance(value, DiffTensor):
        return value
    return DiffTensor._wrap(np.asarray(value, dtype=np.float64))


def _result(
    op: str,
    values: np.ndarray,
    inputs: Sequence[DiffTensor],
    backward_fn: BackwardFn,
) -> DiffTensor:
    out = DiffTensor._wrap(values)
    if not _GRAD_ENABLED.get() or not any(t.requires_grad for t in inputs):
        return out

    tape = get_tape()
    for tensor in inputs:
        if tensor.tape_id is not None:
            if tensor.tape is not tape:
                raise ContractError(f"{op}: input was recorded on a different tape")
            tape.node(tensor.tape_id)

    out.requires_grad = True
    out.tape = tape
    out.tape_id = tape.record(op, out, inputs, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: DiffTensor, b: DiffTensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise DimensionError(op, a.shape, b.shape, "not broadcastable") from e


def add(a, b) -> DiffTensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result("add", a.values + b.values, (a, b), backward_fn)


def sub(a, b) -> DiffTensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result("sub", a.values - b.values, (a, b), backward_fn)


def mul(a, b) -> DiffTensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def backward_fn(g):
        return _unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)

    return _result("mul", a.values * b.values, (a, b), backward_fn)


def div(a, b) -> DiffTensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.values / b.values

    def backward_fn(g):
        return _unbroadcast(g / b.values, a.shape), _unbroadcast(-g * out / b.values, b.shape)

    return _result("div", out, (a, b), backward_fn)


def power(x, exponent: float) -> DiffTensor:
    x = as_tensor(x)
    exponent = float(exponent)
    out = np.power(x.values, exponent)

    def backward_fn(g):
        return (g * exponent * np.power(x.values, exponent - 1.0),)

    return _result("power", out, (x,), backward_fn)


def exp(x) -> DiffTensor:
    x = as_tensor(x)
    out = np.exp(x.values)
    return _result("exp", out, (x,), lambda g: (g * out,))


def log(x) -> DiffTensor:
    x = as_tensor(x)
    return _result("log", np.log(x.values), (x,), lambda g: (g / x.values,))


def matmul(a, b) -> DiffTensor:
    """Matrix product over the last two axes, broadcasting leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul", a.shape, b.shape, "operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError("matmul", a.shape, b.shape, "inner extents differ")
    try:
        out = np.matmul(a.values, b.values)
    except ValueError as e:
        raise DimensionError("matmul", a.shape, b.shape, "batch extents differ") from e

    def backward_fn(g):
        grad_a = np.matmul(g, np.swapaxes(b.values, -1, -2))
        grad_b = np.matmul(np.swapaxes(a.values, -1, -2), g)
        return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)

    return _result("matmul", out, (a, b), backward_fn)


def activation(x, kind: str) -> DiffTensor:
    """Elementwise ``relu`` or ``elu``; relu'(0) is 0."""
    x = as_tensor(x)
    v = x.values
    if kind == "relu":
        mask = v > 0
        out = np.where(mask, v, 0.0)
        return _result("relu", out, (x,), lambda g: (g * mask,))
    if kind == "elu":
        negative = np.expm1(np.minimum(v, 0.0))
        out = np.where(v >= 0, v, negative)
        slope = np.where(v >= 0, 1.0, negative + 1.0)
        return _result("elu", out, (x,), lambda g: (g * slope,))
    raise ContractError(f"unknown activation kind '{kind}' (expected 'relu' or 'elu')")


def relu(x) -> DiffTensor:
    return activation(x, "relu")


def elu(x) -> DiffTensor:
    return activation(x, "elu")


def elu_plus_one(x) -> DiffTensor:
    """``elu(x) + 1`` evaluated as ``exp(x)`` on the negative side so it stays positive."""
    x = as_tensor(x)
    v = x.values
    negative = np.exp(np.minimum(v, 0.0))
    out = np.where(v >= 0, v + 1.0, negative)
    slope = np.where(v >= 0, 1.0, negative)
    return _result("elu_plus_one", out, (x,), lambda g: (g * slope,))


def softplus(x) -> DiffTensor:
    x = as_tensor(x)
    out = np.logaddexp(0.0, x.values)
    sigmoid = np.exp(-np.logaddexp(0.0, -x.values))
    return _result("softplus", out, (x,), lambda g: (g * sigmoid,))


def softmax_lastdim(x) -> DiffTensor:
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] < 1:
        raise ContractError(f"softmax_lastdim needs a last extent >= 1, got shape {x.shape}")
    shifted = x.values - x.values.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward_fn(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _result("softmax", out, (x,), backward_fn)


def _normalize_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    normalized = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise IndexError(f"axis {ax} is out of range for a tensor with {ndim} dimensions")
        normalized.append(ax % ndim)
    return tuple(sorted(set(normalized)))


def reduce(x, kind: str, axis=None, keepdims: bool = False) -> DiffTensor:
    """``sum`` or ``mean`` along ``axis`` (int, tuple, or None for all axes)."""
    x = as_tensor(x)
    axes = _normalize_axes(axis, x.ndim)
    if kind == "sum":
        out = x.values.sum(axis=axes, keepdims=keepdims)
        scale = 1.0
    elif kind == "mean":
        out = x.values.mean(axis=axes, keepdims=keepdims)
        count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
        scale = 1.0 / count
    else:
        raise ContractError(f"unknown reduction kind '{kind}' (expected 'sum' or 'mean')")

    def backward_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g * scale, x.shape).copy(),)

    return _result(kind, out, (x,), backward_fn)


def reshape(x, shape) -> DiffTensor:
    x = as_tensor(x)
    out = x.values.reshape(shape)
    return _result("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None) -> DiffTensor:
    x = as_tensor(x)
    perm = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(perm))
    out = np.transpose(x.values, perm)
    return _result("transpose", out, (x,), lambda g: (np.transpose(g, inverse),))


def _grid_coordinate(p: np.ndarray, extent: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Map normalized coordinates to (lower index, upper index, fraction)."""
    grid = (p + 1.0) * 0.5 * (extent - 1)
    lower = np.minimum(np.floor(grid).astype(np.int64), extent - 1)
    upper = np.minimum(lower + 1, extent - 1)
    return lower, upper, grid - lower


def bilinear_sample(fmap, pos) -> DiffTensor:
    """Sample ``fmap`` at normalized positions with bilinear interpolation.

    Args:
        fmap: ``[H, W, d]`` or ``[B, H, W, d]`` feature map.
        pos: ``[..., 2]`` positions as (x, y) in [-1, 1]; x runs along W and
            y along H, and -1/+1 address the first/last cell centers. With a
            batched map, ``pos`` is ``[B, N, 2]`` or a shared ``[N, 2]``.

    Returns:
        ``[d]`` for a single position on a single map, otherwise
        ``[..., N, d]`` matching the leading axes of ``pos``.
    """
    fmap, pos = as_tensor(fmap), as_tensor(pos)
    if fmap.ndim not in (3, 4) or pos.shape[-1:] != (2,):
        raise DimensionError("bilinear_sample", fmap.shape, pos.shape)

    batched = fmap.ndim == 4
    f = fmap.values if batched else fmap.values[None]
    batch, height, width, _ = f.shape
    if batched:
        if pos.ndim == 2:
            p = np.broadcast_to(pos.values[None], (batch,) + pos.shape)
        elif pos.ndim == 3 and pos.shape[0] == batch:
            p = pos.values
        else:
            raise DimensionError("bilinear_sample", fmap.shape, pos.shape)
    else:
        p = pos.values.reshape(1, -1, 2)

    raw_x, raw_y = p[..., 0], p[..., 1]
    x0, x1, tx = _grid_coordinate(np.clip(raw_x, -1.0, 1.0), width)
    y0, y1, ty = _grid_coordinate(np.clip(raw_y, -1.0, 1.0), height)
    b = np.arange(batch)[:, None]

    v00, v01 = f[b, y0, x0], f[b, y0, x1]
    v10, v11 = f[b, y1, x0], f[b, y1, x1]
    txe, tye = tx[..., None], ty[..., None]
    top = v00 + txe * (v01 - v00)
    bottom = v10 + txe * (v11 - v10)
    out = top + tye * (bottom - top)

    if batched:
        out_values = out.reshape(pos.shape[:-1] + (f.shape[-1],)) if pos.ndim == 3 else out
    else:
        out_values = out.reshape(pos.shape[:-1] + (f.shape[-1],))

    def backward_fn(g):
        g = g.reshape(out.shape)
        grad_f = np.zeros_like(f)
        w00 = ((1.0 - tx) * (1.0 - ty))[..., None]
        w01 = (tx * (1.0 - ty))[..., None]
        w10 = ((1.0 - tx) * ty)[..., None]
        w11 = (tx * ty)[..., None]
        np.add.at(grad_f, (b, y0, x0), g * w00)
        np.add.at(grad_f, (b, y0, x1), g * w01)
        np.add.at(grad_f, (b, y1, x0), g * w10)
        np.add.at(grad_f, (b, y1, x1), g * w11)

        d_tx = ((1.0 - tye) * (v01 - v00) + tye * (v11 - v10)) * g
        d_ty = (bottom - top) * g
        inside_x = (raw_x > -1.0) & (raw_x < 1.0)
        inside_y = (raw_y > -1.0) & (raw_y < 1.0)
        grad_p = np.stack(
            [
                d_tx.sum(axis=-1) * 0.5 * (width - 1) * inside_x,
                d_ty.sum(axis=-1) * 0.5 * (height - 1) * inside_y,
            ],
            axis=-1,
        )

        if not batched:
            return grad_f[0], grad_p.reshape(pos.shape)
        if pos.ndim == 2:
            return grad_f, grad_p.sum(axis=0)
        return grad_f, grad_p

    return _result("bilinear_sample", out_values, (fmap, pos), backward_fn)


def layer_norm(x, scale, shift, eps: float = 1e-5) -> DiffTensor:
    """Normalize over the last axis, then apply ``scale`` and ``shift``."""
    x = as_tensor(x)
    centered = x - x.mean(axis=-1, keepdims=True)
    variance = (centered * centered).mean(axis=-1, keepdims=True)
    return centered * power(variance + eps, -0.5) * scale + shift


def backward(root: DiffTensor) -> None:
    """Accumulate d(root)/d(leaf) into the ``grad`` of every leaf requiring it."""
    if root.shape != ():
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if root.tape_id is None:
        if root.requires_grad:
            root.grad += 1.0
        return
    root.tape.backward(root)
