"""
Reverse-mode differentiation over dense float64 tensors of rank <= 2.

Every primitive computes its value eagerly with numpy and, when a Tape is
active and one of its inputs requires a gradient, records a closure that
maps the output gradient to the input gradients. ``backward`` replays the
tape in strict reverse order. The operation set is what the graph network
and the GC-FDM loss need: matmul, bias add, SiLU, layer normalization,
row gather/scatter-add for message passing, elementwise arithmetic and
reductions.
"""

import logging
import threading
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from gcfdm.config import settings
from gcfdm.errors import AutodiffError, ShapeError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence[float]]

# grad_check compares gradients below this fraction of max(1, |f|) absolutely
GRAD_CHECK_FLOOR = 1e-3

# A tape belongs to the thread that opened it
_local = threading.local()


class Tensor:
    """Dense double-precision array with an optional gradient slot"""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        array = np.asarray(data, dtype=np.float64)
        if array.ndim > 2:
            raise ShapeError(f"Tensors are limited to rank 2, got shape {array.shape}")
        self.data = array
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return shift(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return shift(self, -np.asarray(other, dtype=np.float64))

    def __rsub__(self, other):
        return shift(neg(self), other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise AutodiffError("Division by a tensor is not supported")
        return scale(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"


class _Record:
    __slots__ = ("output", "inputs", "backward")

    def __init__(self, output: Tensor, inputs: Tuple[Tensor, ...], backward: Callable):
        self.output = output
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of primitive operations, used as a context manager"""

    def __init__(self):
        self.records: List[_Record] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.records)


def current_tape() -> Optional[Tape]:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def _record(output: Tensor, inputs: Tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    tape = current_tape()
    if tape is None or not any(t.requires_grad for t in inputs):
        return output
    output.requires_grad = True
    tape.records.append(_Record(output, inputs, backward_fn))
    return output


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


# ==============================================================================
# Forward primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a row-vector bias for a matrix ``a``"""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape == b.shape:
        out = Tensor(a.data + b.data)
        return _record(out, (a, b), lambda g: (g, g))
    if a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
        out = Tensor(a.data + b.data)
        return _record(out, (a, b), lambda g: (g, g.sum(axis=0)))
    raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    a_data, b_data = a.data, b.data
    out = Tensor(a_data * b_data)
    return _record(out, (a, b), lambda g: (g * b_data, g * a_data))


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    return _record(out, (a,), lambda g: (-g,))


def scale(a: Tensor, factor: ArrayLike) -> Tensor:
    """Multiply by a constant (scalar or array broadcastable to ``a``)"""
    factor = np.asarray(factor, dtype=np.float64)
    value = a.data * factor
    if value.shape != a.shape:
        raise ShapeError(f"scale: factor of shape {factor.shape} changes shape {a.shape}")
    out = Tensor(value)
    return _record(out, (a,), lambda g: (g * factor,))


def shift(a: Tensor, offset: ArrayLike) -> Tensor:
    """Add a constant (scalar or array broadcastable to ``a``)"""
    offset = np.asarray(offset, dtype=np.float64)
    value = a.data + offset
    if value.shape != a.shape:
        raise ShapeError(f"shift: offset of shape {offset.shape} changes shape {a.shape}")
    out = Tensor(value)
    return _record(out, (a,), lambda g: (g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    a_data, b_data = a.data, b.data
    out = Tensor(a_data @ b_data)
    return _record(out, (a, b), lambda g: (g @ b_data.T, a_data.T @ g))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x)"""
    x = a.data
    s = _sigmoid(x)
    out = Tensor(x * s)
    return _record(out, (a,), lambda g: (g * (s * (1.0 + x * (1.0 - s))),))


def layernorm(
    a: Tensor,
    gamma: Optional[Tensor] = None,
    beta: Optional[Tensor] = None,
    eps: Optional[float] = None,
) -> Tensor:
    """Normalize each row over the feature axis, then apply scale and shift"""
    if a.ndim != 2:
        raise ShapeError(f"layernorm expects a matrix, got shape {a.shape}")
    eps = settings.LAYERNORM_EPS if eps is None else eps
    x = a.data
    mu = x.mean(axis=1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    value = xhat
    if gamma is not None:
        value = value * gamma.data
    if beta is not None:
        value = value + beta.data
    out = Tensor(value)

    inputs: Tuple[Tensor, ...] = (a,)
    if gamma is not None:
        inputs += (gamma,)
    if beta is not None:
        inputs += (beta,)

    def backward(g):
        dxhat = g * gamma.data if gamma is not None else g
        dx = inv_std * (
            dxhat
            - dxhat.mean(axis=1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
        )
        grads = [dx]
        if gamma is not None:
            grads.append((g * xhat).sum(axis=0))
        if beta is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    return _record(out, inputs, backward)


def gather_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """Select rows ``a[index]``; the adjoint is a scatter-add"""
    index = np.asarray(index, dtype=np.int64)
    n_rows = a.shape[0]
    out = Tensor(a.data[index])

    def backward(g):
        grad = np.zeros((n_rows,) + g.shape[1:], dtype=np.float64)
        np.add.at(grad, index, g)
        return (grad,)

    return _record(out, (a,), backward)


def scatter_add_rows(a: Tensor, index: np.ndarray, n_rows: int) -> Tensor:
    """Sum rows of ``a`` into ``n_rows`` slots; the adjoint is a gather"""
    index = np.asarray(index, dtype=np.int64)
    if index.shape[0] != a.shape[0]:
        raise ShapeError(f"scatter_add_rows: {index.shape[0]} indices for {a.shape[0]} rows")
    value = np.zeros((n_rows,) + a.shape[1:], dtype=np.float64)
    np.add.at(value, index, a.data)
    out = Tensor(value)
    return _record(out, (a,), lambda g: (g[index],))


def column(a: Tensor, k: int) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"column expects a matrix, got shape {a.shape}")
    shape = a.shape
    out = Tensor(a.data[:, k].copy())

    def backward(g):
        grad = np.zeros(shape, dtype=np.float64)
        grad[:, k] = g
        return (grad,)

    return _record(out, (a,), backward)


def stack_columns(columns: Sequence[Tensor]) -> Tensor:
    columns = tuple(_as_tensor(c) for c in columns)
    if any(c.ndim != 1 or c.shape != columns[0].shape for c in columns):
        raise ShapeError("stack_columns expects vectors of equal length")
    out = Tensor(np.stack([c.data for c in columns], axis=1))
    return _record(out, columns, lambda g: tuple(g[:, i].copy() for i in range(len(columns))))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    try:
        value = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {e}") from e
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    out = Tensor(value)
    return _record(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    out = Tensor(a.data.sum())
    return _record(out, (a,), lambda g: (np.full(shape, float(g)),))


def mean(a: Tensor) -> Tensor:
    shape, size = a.shape, a.size
    if size == 0:
        raise ShapeError("mean of an empty tensor")
    out = Tensor(a.data.mean())
    return _record(out, (a,), lambda g: (np.full(shape, float(g) / size),))


def sum_of_squares(a: Tensor) -> Tensor:
    x = a.data
    out = Tensor(np.dot(x.reshape(-1), x.reshape(-1)))
    return _record(out, (a,), lambda g: (2.0 * float(g) * x,))


# ==============================================================================
# Reverse pass


def backward(loss: Tensor, tape: Optional[Tape] = None) -> List[Tensor]:
    """
    Propagate d(loss)/d(.) through the tape and accumulate into leaf ``.grad``.

    Args:
        loss (Tensor): scalar produced while ``tape`` was active
        tape (Tape): defaults to the innermost active tape

    Returns:
        list: the leaf tensors whose gradients were updated

    Raises:
        AutodiffError: no recorded forward pass for ``loss`` or tape reuse
    """
    tape = tape if tape is not None else current_tape()
    if tape is None or not tape.records:
        raise AutodiffError("backward called without a recorded forward pass")
    if tape.consumed:
        raise AutodiffError("tape has already been consumed by a backward pass")
    if loss.size != 1:
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.shape}")

    end = None
    for position in range(len(tape.records) - 1, -1, -1):
        if tape.records[position].output is loss:
            end = position
            break
    if end is None:
        raise AutodiffError("loss was not produced under this tape")

    produced = {id(r.output) for r in tape.records[: end + 1]}
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: Dict[int, Tensor] = {}

    for rec in reversed(tape.records[: end + 1]):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        for tensor, grad in zip(rec.inputs, rec.backward(g)):
            if grad is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            grads[key] = grads[key] + grad if key in grads else grad
            if key not in produced:
                leaves[key] = tensor

    tape.consumed = True
    updated = []
    for key, tensor in leaves.items():
        grad = np.asarray(grads[key], dtype=np.float64).reshape(tensor.shape)
        tensor.grad = grad.copy() if tensor.grad is None else tensor.grad + grad
        updated.append(tensor)
    return updated


def grad_check(
    f: Callable[..., Tensor],
    point: Union[np.ndarray, Sequence[np.ndarray]],
    step: float = 1e-5,
    max_coords: Optional[int] = None,
    seed: int = 0,
    floor: Optional[float] = None,
) -> float:
    """
    Compare reverse-mode gradients of a scalar function against central differences.

    Each coordinate's error is |analytic - numeric| over the larger of the
    two magnitudes and ``floor``. Below the floor central differences lose
    their digits to rounding, so such coordinates are held to an absolute
    deviation instead.

    Args:
        f: maps one Tensor per array in ``point`` to a scalar Tensor
        point: array or list of arrays at which to differentiate
        step: finite-difference step
        max_coords: check only a seeded random sample of coordinates per array
        floor: absolute floor on the denominator; 1e-3 max(1, |f(point)|) by default

    Returns:
        float: maximum relative error
    """
    arrays = [np.array(point, dtype=np.float64)] if isinstance(point, np.ndarray) else [
        np.array(p, dtype=np.float64) for p in point
    ]
    inputs = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = f(*inputs)
    backward(out, tape)
    if floor is None:
        floor = GRAD_CHECK_FLOOR * max(1.0, abs(out.item()))

    def evaluate(position: int, array: np.ndarray) -> float:
        args = [Tensor(a) for a in arrays]
        args[position] = Tensor(array)
        return f(*args).item()

    rng = np.random.default_rng(seed)
    error, worst = 0.0, 0.0
    for position, (tensor, array) in enumerate(zip(inputs, arrays)):
        analytic = tensor.grad if tensor.grad is not None else np.zeros_like(array)
        coords = list(np.ndindex(array.shape))
        if max_coords is not None and len(coords) > max_coords:
            picks = rng.choice(len(coords), size=max_coords, replace=False)
            coords = [coords[k] for k in sorted(picks)]
        for idx in coords:
            plus, minus = array.copy(), array.copy()
            plus[idx] += step
            minus[idx] -= step
            numeric = (evaluate(position, plus) - evaluate(position, minus)) / (2.0 * step)
            deviation = abs(analytic[idx] - numeric)
            worst = max(worst, deviation)
            error = max(error, deviation / max(abs(analytic[idx]), abs(numeric), floor))

    logger.debug(f"grad_check: max abs deviation {worst:.3e}, max relative {error:.3e} (floor {floor:.1e})")
    return error
