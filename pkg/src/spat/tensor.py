"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable operation records itself on the active :class:`Tape`;
``Tape.backward`` replays the records in exact reverse order, accumulating
gradients additively into every gradient-requiring input. Data buffers are
row-major ``numpy`` arrays and stay immutable after creation (only ``grad``
is written during backward).

Broadcasting follows numpy's right-aligned rules (leading batch dimensions
or explicit size-1 axes); anything else raises :class:`ShapeError` with both
shapes in the message.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, NumericError, ShapeError

__all__ = [
    "Tape",
    "Tensor",
    "active_tape",
    "concat",
    "dropout",
    "gelu",
    "layer_norm",
    "pad_repeat_last",
    "relu",
    "row_softmax",
    "softmax_lastaxis",
    "stack",
    "unfold_last",
]


class _Record:
    """One recorded op: input/output tensors plus the local gradient rule."""

    __slots__ = ("name", "inputs", "input_ids", "output", "output_id", "grad_fn")

    def __init__(self, name, inputs, input_ids, output, output_id, grad_fn):
        self.name = name
        self.inputs = inputs
        self.input_ids = input_ids
        self.output = output
        self.output_id = output_id
        self.grad_fn = grad_fn


_ACTIVE_TAPE: "Tape | None" = None


def active_tape() -> "Tape | None":
    return _ACTIVE_TAPE


class Tape:
    """Ordered record of differentiable operations.

    Used as a context manager around a forward pass:

        with Tape() as tape:
            loss = ...
        loss.backward()

    Recording order is execution order, which is topological by
    construction; backward visits records in exact reverse order, so two
    backward passes over the same graph are bit-identical.
    """

    def __init__(self):
        self._records: list[_Record] = []
        self._next_id = 0

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise ContractError("a Tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def __len__(self) -> int:
        return len(self._records)

    def _node_id(self, t: "Tensor") -> int:
        if t._tape is not self:
            t._tape = self
            t.node_id = self._next_id
            self._next_id += 1
        return t.node_id

    def record(self, name: str, inputs: Sequence["Tensor"], output: "Tensor",
               grad_fn: Callable[[np.ndarray], tuple]) -> None:
        input_ids = tuple(self._node_id(t) for t in inputs)
        output_id = self._node_id(output)
        self._records.append(
            _Record(name, tuple(inputs), input_ids, output, output_id, grad_fn))

    def release(self) -> None:
        """Drop the recorded graph once its gradients have been consumed.

        Long-lived tensors (parameters) keep a stale pointer to this tape,
        so without an explicit release the previous step's intermediate
        buffers stay reachable through most of the next forward pass.
        """
        self._records.clear()

    def backward(self, loss: "Tensor") -> None:
        """Populate ``grad`` on every gradient-requiring tensor reachable
        from ``loss``, accumulating additively across fan-out."""
        if loss.data.shape != ():
            raise ContractError(
                f"backward requires a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise ContractError("loss does not live on this tape")
        if loss.grad is None:
            loss.grad = np.ones((), dtype=np.float64)
        else:
            loss.grad = loss.grad + 1.0
        for rec in reversed(self._records):
            g_out = rec.output.grad
            if g_out is None:
                continue
            grads = rec.grad_fn(g_out)
            for t, g in zip(rec.inputs, grads):
                if g is None or not t.requires_grad:
                    continue
                if t.grad is None:
                    t.grad = np.array(g, dtype=np.float64)  # owned copy
                else:
                    t.grad += g


class Tensor:
    """N-dimensional float64 array with an optional gradient slot.

    ``node_id`` identifies the tensor on the tape it was last registered
    with; constants that never touch a tape keep ``node_id = None``.
    """

    __slots__ = ("data", "grad", "requires_grad", "node_id", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id: int | None = None
        self._tape: Tape | None = None

    # -- introspection -------------------------------------------------

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

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        """Constant view of the same buffer, off the tape."""
        return Tensor(self.data, requires_grad=False)

    def backward(self) -> None:
        if self._tape is None:
            raise ContractError("tensor is not on a tape; nothing to backpropagate")
        self._tape.backward(self)

    # -- arithmetic ----------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def matmul(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_along_axis(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_along_axis(self, axis, keepdims)

    def std(self, axis=None, keepdims=False):
        return std_along_axis(self, axis, keepdims)

    def abs(self):
        return absolute(self)


# -- helpers -----------------------------------------------------------


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracked(*tensors: Tensor) -> bool:
    return _ACTIVE_TAPE is not None and any(t.requires_grad for t in tensors)


def _emit(name: str, inputs: tuple[Tensor, ...], out_data: np.ndarray,
          grad_fn: Callable[[np.ndarray], tuple]) -> Tensor:
    out = Tensor(out_data)
    if _tracked(*inputs):
        out.requires_grad = True
        _ACTIVE_TAPE.record(name, inputs, out, grad_fn)
    return out


def _check_broadcast(name: str, a_shape: tuple, b_shape: tuple) -> None:
    for da, db in zip(reversed(a_shape), reversed(b_shape)):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"{name}: shapes {a_shape} and {b_shape} "
                             "are not broadcast-compatible")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` over broadcast axes so it matches ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape))
                 if sd == 1 and gd != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _normalize_axis(axis: int, ndim: int, name: str) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"{name}: axis {axis} out of range for ndim {ndim}")
    return axis % ndim


# -- elementwise and reduction primitives ------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a.shape, b.shape)
    out = a.data + b.data
    need_a, need_b = a.requires_grad, b.requires_grad

    def grad_fn(g):
        return (_unbroadcast(g, a.shape) if need_a else None,
                _unbroadcast(g, b.shape) if need_b else None)

    return _emit("add", (a, b), out, grad_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("sub", a.shape, b.shape)
    out = a.data - b.data
    need_a, need_b = a.requires_grad, b.requires_grad

    def grad_fn(g):
        return (_unbroadcast(g, a.shape) if need_a else None,
                _unbroadcast(-g, b.shape) if need_b else None)

    return _emit("sub", (a, b), out, grad_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product with broadcasting."""
    _check_broadcast("mul", a.shape, b.shape)
    out = a.data * b.data
    a_data, b_data = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad

    def grad_fn(g):
        return (_unbroadcast(g * b_data, a.shape) if need_a else None,
                _unbroadcast(g * a_data, b.shape) if need_b else None)

    return _emit("mul", (a, b), out, grad_fn)


def scale(a: Tensor, c: float) -> Tensor:
    out = a.data * c

    def grad_fn(g):
        return (g * c,)

    return _emit("scale", (a,), out, grad_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``[.., m, k] x [.., k, n] -> [.., m, n]``."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul requires ndim >= 2 operands, got shapes "
                         f"{a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree for shapes "
                         f"{a.shape} and {b.shape}")
    _check_broadcast("matmul (batch dims)", a.shape[:-2], b.shape[:-2])
    a_data, b_data = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad
    k, n = b.shape[-2], b.shape[-1]

    if b.ndim == 2:
        # fold leading batch dims into one GEMM; the weight gradient then
        # comes out batch-summed for free
        a2 = a_data.reshape(-1, k)
        out = (a2 @ b_data).reshape(a.shape[:-1] + (n,))

        def grad_fn(g):
            g2 = g.reshape(-1, n)
            ga = (g2 @ b_data.T).reshape(a.shape) if need_a else None
            gb = a2.T @ g2 if need_b else None
            return ga, gb
    else:
        out = np.matmul(a_data, b_data)

        def grad_fn(g):
            ga = gb = None
            if need_a:
                ga = _unbroadcast(np.matmul(g, np.swapaxes(b_data, -1, -2)),
                                  a.shape)
            if need_b:
                gb = _unbroadcast(np.matmul(np.swapaxes(a_data, -1, -2), g),
                                  b.shape)
            return ga, gb

    return _emit("matmul", (a, b), out, grad_fn)


def transpose(a: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    """Permute axes; default swaps the last two."""
    if axes is None:
        if a.ndim < 2:
            raise ShapeError(f"transpose needs ndim >= 2, got shape {a.shape}")
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation of "
                         f"axes for shape {a.shape}")
    out = np.transpose(a.data, axes)
    inverse = np.argsort(axes)

    def grad_fn(g):
        return (np.transpose(g, inverse),)

    return _emit("transpose", (a,), out, grad_fn)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: cannot view shape {a.shape} as {shape}") from e
    in_shape = a.shape

    def grad_fn(g):
        return (g.reshape(in_shape),)

    return _emit("reshape", (a,), out, grad_fn)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    """Concatenate along an existing axis."""
    if not tensors:
        raise ShapeError("concat of zero tensors")
    axis = _normalize_axis(axis, tensors[0].ndim, "concat")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def grad_fn(g):
        return tuple(np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
                     for i in range(len(sizes)))

    return _emit("concat", tuple(tensors), out, grad_fn)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along a new axis (e.g. a new head dimension)."""
    if not tensors:
        raise ShapeError("stack of zero tensors")
    out = np.stack([t.data for t in tensors], axis=axis)

    def grad_fn(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _emit("stack", tuple(tensors), out, grad_fn)


def sum_along_axis(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is not None and not isinstance(axis, tuple):
        axis = (_normalize_axis(axis, a.ndim, "sum"),)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    in_shape = a.shape

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g, in_shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, in_shape).copy(),)

    return _emit("sum", (a,), out, grad_fn)


def mean_along_axis(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is not None and not isinstance(axis, tuple):
        axis = (_normalize_axis(axis, a.ndim, "mean"),)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    in_shape = a.shape
    n = a.size if axis is None else int(np.prod([in_shape[ax] for ax in axis]))

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g / n, in_shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / n, in_shape).copy(),)

    return _emit("mean", (a,), out, grad_fn)


def std_along_axis(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Population standard deviation (divide-by-n convention).

    The gradient at zero variance is defined as 0.
    """
    if axis is not None and not isinstance(axis, tuple):
        axis = (_normalize_axis(axis, a.ndim, "std"),)
    out = a.data.std(axis=axis, keepdims=keepdims)
    in_shape = a.shape
    n = a.size if axis is None else int(np.prod([in_shape[ax] for ax in axis]))
    mu = a.data.mean(axis=axis, keepdims=True)
    centered = a.data - mu

    def grad_fn(g):
        sigma = out if keepdims or axis is None else np.expand_dims(out, axis)
        gg = g if keepdims or axis is None else np.expand_dims(g, axis)
        safe = np.where(sigma == 0.0, 1.0, sigma)
        gx = gg * centered / (n * safe)
        return (np.where(sigma == 0.0, 0.0, gx),)

    return _emit("std", (a,), out, grad_fn)


def absolute(a: Tensor) -> Tensor:
    """|x| with subgradient 0 at x = 0."""
    out = np.abs(a.data)
    sign = np.sign(a.data)

    def grad_fn(g):
        return (g * sign,)

    return _emit("abs", (a,), out, grad_fn)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    mask = a.data > 0.0

    def grad_fn(g):
        return (g * mask,)

    return _emit("relu", (a,), out, grad_fn)


_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) Gaussian error linear unit."""
    phi = 0.5 * (1.0 + erf(a.data / _SQRT2))
    out = a.data * phi
    x = a.data

    def grad_fn(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        return (g * (phi + x * pdf),)

    return _emit("gelu", (a,), out, grad_fn)


def softmax_lastaxis(x: np.ndarray) -> np.ndarray:
    """Numerically stabilized softmax over the last axis (plain numpy)."""
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


def row_softmax(a: Tensor) -> Tensor:
    """Row-wise softmax over the last axis; rows sum to 1."""
    if not np.isfinite(a.data).all():
        raise NumericError("row_softmax: input contains NaN or Inf")
    out = softmax_lastaxis(a.data)
    y = out

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit("row_softmax", (a,), out, grad_fn)


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance (no affine)."""
    mu = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (a.data - mu) * inv

    def grad_fn(g):
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gym),)

    return _emit("layer_norm", (a,), y, grad_fn)


def dropout(a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when rate is 0."""
    if rate == 0.0:
        return a
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate must lie in [0, 1), got {rate}")
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    out = a.data * keep

    def grad_fn(g):
        return (g * keep,)

    return _emit("dropout", (a,), out, grad_fn)


def unfold_last(a: Tensor, size: int, step: int) -> Tensor:
    """Sliding windows over the last axis: ``[.., L] -> [.., W, size]``
    with ``W = floor((L - size) / step) + 1``. Windows may overlap."""
    length = a.shape[-1]
    if size < 1 or step < 1:
        raise ShapeError(f"unfold_last: size {size} and step {step} must be >= 1")
    if length < size:
        raise ShapeError(f"unfold_last: last axis {length} shorter than window {size}")
    n_windows = (length - size) // step + 1
    index = np.arange(n_windows)[:, None] * step + np.arange(size)[None, :]
    out = a.data[..., index]
    in_shape = a.shape

    def grad_fn(g):
        gx = np.zeros(in_shape, dtype=np.float64)
        flat = gx.reshape(-1, length)
        gflat = g.reshape(-1, n_windows, size)
        rows = np.arange(flat.shape[0])[:, None, None]
        np.add.at(flat, (rows, index[None, :, :]), gflat)
        return (gx,)

    return _emit("unfold_last", (a,), out, grad_fn)


def pad_repeat_last(a: Tensor, count: int) -> Tensor:
    """Extend the last axis by repeating its final entry ``count`` times."""
    if count < 0:
        raise ShapeError(f"pad_repeat_last: count must be >= 0, got {count}")
    if count == 0:
        return a
    tail = np.repeat(a.data[..., -1:], count, axis=-1)
    out = np.concatenate([a.data, tail], axis=-1)
    length = a.shape[-1]

    def grad_fn(g):
        gx = g[..., :length].copy()
        gx[..., -1] += g[..., length:].sum(axis=-1)
        return (gx,)

    return _emit("pad_repeat_last", (a,), out, grad_fn)
