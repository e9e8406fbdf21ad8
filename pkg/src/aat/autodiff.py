"""Tape-based reverse-mode automatic differentiation over float64 numpy arrays.

Operations record themselves on the active :class:`Tape` (set with a ``with``
block) whenever at least one input requires gradients. Outside a tape, or when
every input is a constant, operations are plain numpy evaluation.

    >>> w = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = (w * w).sum()
    >>> backward(loss, tape)[w.node].data
    array([2., 4.])
"""

from __future__ import annotations

import contextvars
import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, DimensionError

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "as_tensor",
    "add",
    "sub",
    "multiply",
    "scale",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "slice_along",
    "sum",
    "mean",
    "exp",
    "log",
    "sigmoid",
    "softplus",
    "gelu",
    "layernorm",
    "softmax",
    "log_softmax",
]

_node_ids = itertools.count(1)
_active_tape: contextvars.ContextVar[Tape | None] = contextvars.ContextVar("aat_active_tape", default=None)

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    """Dense float64 array that may participate in a differentiation tape.

    ``node`` is the tape identifier; it is ``None`` for constants. Leaves that
    require gradients get a permanent identifier, op outputs get a fresh one
    when they are recorded.
    """

    __slots__ = ("data", "node", "_requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.node: int | None = None
        self._requires_grad = False
        self.requires_grad = requires_grad

    @property
    def requires_grad(self) -> bool:
        return self._requires_grad

    @requires_grad.setter
    def requires_grad(self, flag: bool) -> None:
        self._requires_grad = bool(flag)
        if self._requires_grad and self.node is None:
            self.node = next(_node_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=4)}{grad})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return multiply(self, as_tensor(1.0 / as_tensor(other).data))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


@dataclass
class Record:
    out: int
    tag: str
    inputs: tuple[int | None, ...]
    backward: Callable[[np.ndarray, tuple[bool, ...]], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered log of recorded operations for one forward pass.

    A tape is owned by one thread of control. Tapes are cheap; build a new one
    for every forward pass.
    """

    records: list[Record] = field(default_factory=list)
    leaves: dict[int, Tensor] = field(default_factory=dict)
    produced: set[int] = field(default_factory=set)
    _token: contextvars.Token | None = field(default=None, repr=False)

    def __enter__(self) -> Tape:
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def watch(self, *tensors: Tensor) -> None:
        """Register leaves so they receive a (possibly zero) gradient."""
        for t in tensors:
            if not t.requires_grad:
                t.requires_grad = True
            if t.node not in self.produced:
                self.leaves[t.node] = t


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _record(tag: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    tape = _active_tape.get()
    if tape is None or not any(t.requires_grad for t in inputs):
        return out
    out.requires_grad = True
    ids = []
    for t in inputs:
        if t.requires_grad:
            if t.node not in tape.produced:
                tape.leaves[t.node] = t
            ids.append(t.node)
        else:
            ids.append(None)
    tape.records.append(Record(out.node, tag, tuple(ids), backward_fn))
    tape.produced.add(out.node)
    return out


def backward(loss: Tensor, tape: Tape, wrt: Iterable[Tensor] = ()) -> dict[int, Tensor]:
    """Reverse sweep over ``tape`` starting from the scalar ``loss``.

    Returns a map from node id to gradient for every requires-grad leaf the
    tape saw plus any tensors in ``wrt``. Leaves the loss does not depend on
    get zero gradients.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None or not loss.requires_grad:
        raise ContractError("loss is not on the tape (no input required gradients)")
    leaves = dict(tape.leaves)
    for t in wrt:
        if t.node is not None:
            leaves.setdefault(t.node, t)
    if loss.node not in tape.produced:
        leaves.setdefault(loss.node, loss)

    grads: dict[int, np.ndarray] = {loss.node: np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        g = grads.get(rec.out)
        if g is None:
            continue
        if rec.out not in leaves:
            del grads[rec.out]
        needs = tuple(i is not None for i in rec.inputs)
        for node, gi in zip(rec.inputs, rec.backward(g, needs)):
            if node is None or gi is None:
                continue
            if node in grads:
                grads[node] = grads[node] + gi
            else:
                grads[node] = gi
    out = {}
    for node, t in leaves.items():
        g = grads.get(node)
        out[node] = Tensor(np.zeros_like(t.data) if g is None else g)
    return out


# ----------------------------------------------------------------------------
# elementwise and shape operations


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g, needs):
        return (
            _unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(g, b.shape) if needs[1] else None,
        )

    return _record("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g, needs):
        return (
            _unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(-g, b.shape) if needs[1] else None,
        )

    return _record("sub", a.data - b.data, (a, b), bw)


def multiply(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g, needs):
        return (
            _unbroadcast(g * b.data, a.shape) if needs[0] else None,
            _unbroadcast(g * a.data, b.shape) if needs[1] else None,
        )

    return _record("multiply", a.data * b.data, (a, b), bw)


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return _record("scale", x.data * c, (x,), lambda g, needs: (g * c,))


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bw(g, needs):
        ga = gb = None
        if needs[0]:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if needs[1]:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _record("matmul", a.data @ b.data, (a, b), bw)


def transpose(x, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; by default swap the last two."""
    x = as_tensor(x)
    if axes is None:
        axes = list(range(x.ndim))
        if x.ndim >= 2:
            axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _record("transpose", np.transpose(x.data, axes), (x,), lambda g, needs: (np.transpose(g, inverse),))


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        data = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {x.shape} to {tuple(shape)}") from exc
    return _record("reshape", data, (x,), lambda g, needs: (g.reshape(x.shape),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat of an empty sequence")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g, needs):
        parts = np.split(g, bounds, axis=axis)
        return tuple(p if n else None for p, n in zip(parts, needs))

    return _record("concat", data, tensors, bw)


def slice_along(x, start: int, stop: int, axis: int = 0) -> Tensor:
    """Rows ``start:stop`` along ``axis``."""
    x = as_tensor(x)
    ax = axis % x.ndim
    index = (slice(None),) * ax + (slice(start, stop),)

    def bw(g, needs):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return _record("slice", x.data[index], (x,), bw)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)

    def bw(g, needs):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record("sum", x.data.sum(axis=axis, keepdims=keepdims), (x,), bw)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))

    def bw(g, needs):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _record("mean", x.data.mean(axis=axis, keepdims=keepdims), (x,), bw)


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return _record("exp", y, (x,), lambda g, needs: (g * y,))


def log(x) -> Tensor:
    x = as_tensor(x)
    return _record("log", np.log(x.data), (x,), lambda g, needs: (g / x.data,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # split by sign so neither branch overflows
    z = np.exp(-np.abs(x.data))
    y = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    return _record("sigmoid", y, (x,), lambda g, needs: (g * y * (1.0 - y),))


def softplus(x) -> Tensor:
    """log(1 + exp(x)), stable for large |x|."""
    x = as_tensor(x)
    y = np.maximum(x.data, 0.0) + np.log1p(np.exp(-np.abs(x.data)))

    def bw(g, needs):
        z = np.exp(-np.abs(x.data))
        s = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
        return (g * s,)

    return _record("softplus", y, (x,), bw)


def gelu_derivative(x: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    return cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def gelu(x) -> Tensor:
    """Exact GELU, x * Phi(x), with Phi the standard normal CDF."""
    x = as_tensor(x)
    y = x.data * 0.5 * (1.0 + erf(x.data / _SQRT2))
    # looked up at call time so a test can swap in a broken rule
    return _record("gelu", y, (x,), lambda g, needs: (g * gelu_derivative(x.data),))


def layernorm(x, gamma, beta, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis with biased variance, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise DimensionError("layernorm over an empty last axis")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layernorm: input {x.shape} with gamma {gamma.shape}, beta {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    y = xhat * gamma.data + beta.data

    def bw(g, needs):
        gx = gg = gb = None
        if needs[0]:
            dxhat = g * gamma.data
            gx = inv_std * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        if needs[1]:
            gg = (g * xhat).reshape(-1, d).sum(axis=0)
        if needs[2]:
            gb = g.reshape(-1, d).sum(axis=0)
        return gx, gg, gb

    return _record("layernorm", y, (x, gamma, beta), bw)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if not -x.ndim <= axis < max(x.ndim, 1):
        raise DimensionError(f"softmax axis {axis} out of range for shape {x.shape}")
    z = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    y = z / z.sum(axis=axis, keepdims=True)
    return _record("softmax", y, (x,), lambda g, needs: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    y = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def bw(g, needs):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _record("log_softmax", y, (x,), bw)
