"""Reverse-mode automatic differentiation over dense float64 arrays.

The graph is built eagerly: each operation that sees a gradient-requiring
input records its parents and a closure that routes the upstream gradient
to them; :func:`backward` then walks the graph once in reverse topological
order. Everything is double precision so finite-difference checks can be
tight, and every source of randomness comes in through an explicit
:class:`~rankdistill.rng.RngState`.
"""

from __future__ import annotations

import contextlib
import math
from collections.abc import Callable, Sequence

import numpy as np

from .errors import (
    ContractError,
    DimensionError,
    NumericError,
    ParameterError,
    VocabularyError,
)
from .rng import RngState

_grad_enabled = True

KL_EPS = 1e-12
_DIST_TOL = 1e-6


@contextlib.contextmanager
def no_grad():
    """Skip graph construction inside the block (inference-only passes)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    """Dense n-dimensional float64 value, optionally tracked for gradients.

    Tensors are treated as immutable once created, except for gradient
    accumulation into ``grad`` and in-place optimizer updates on leaf
    parameters between steps.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)  # 0-d arrays are always contiguous
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

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
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Same values, cut loose from the graph (shares the array)."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # Operator sugar; scalars multiply/divide without entering the graph.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis: int | None = None):
        return sum_along(self, axis)

    def mean(self, axis: int | None = None):
        return mean_along(self, axis)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def _lift(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(np.asarray(value, dtype=np.float64))


def _make(data, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the shape of its source."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, dim in enumerate(shape) if dim == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# Elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}") from exc

    def backward_fn(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.data.shape))

    return _make(data, (a, b), backward_fn)


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    try:
        data = a.data - b.data
    except ValueError as exc:
        raise DimensionError(f"cannot subtract shapes {a.shape} and {b.shape}") from exc

    def backward_fn(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _make(data, (a, b), backward_fn)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc

    def backward_fn(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), backward_fn)


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    try:
        data = a.data / b.data
    except ValueError as exc:
        raise DimensionError(f"cannot divide shapes {a.shape} and {b.shape}") from exc

    def backward_fn(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(data, (a, b), backward_fn)


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)

    def backward_fn(g):
        _accumulate(x, g * s)

    return _make(x.data * s, (x,), backward_fn)


# ---------------------------------------------------------------------------
# Linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(
            f"matmul requires two matrices, got shapes {a.shape} and {b.shape}"
        )
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} vs {b.shape}")
    data = a.data @ b.data

    def backward_fn(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)

    return _make(data, (a, b), backward_fn)


def dot(a: Tensor, b: Tensor) -> Tensor:
    """Inner product of two vectors; returns a scalar tensor."""
    if a.data.ndim != 1 or b.data.ndim != 1:
        raise DimensionError(f"dot requires vectors, got shapes {a.shape} and {b.shape}")
    if a.data.shape != b.data.shape:
        raise DimensionError(f"dot length mismatch: {a.shape} vs {b.shape}")
    return sum_along(mul(a, b))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    data = np.transpose(x.data, axes)
    if axes is None:
        inverse = None
    else:
        inverse = np.argsort(axes)

    def backward_fn(g):
        _accumulate(x, np.transpose(g, inverse))

    return _make(data, (x,), backward_fn)


def reshape(x: Tensor, shape) -> Tensor:
    data = x.data.reshape(shape)

    def backward_fn(g):
        _accumulate(x, g.reshape(x.data.shape))

    return _make(data, (x,), backward_fn)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_lift(p) for p in parts]
    if not parts:
        raise ContractError("concat needs at least one tensor")
    try:
        data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat shapes incompatible: {[p.shape for p in parts]}") from exc
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def backward_fn(g):
        for part, start, stop in zip(parts, offsets[:-1], offsets[1:]):
            if part.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(int(start), int(stop))
                _accumulate(part, g[tuple(sl)])

    return _make(data, tuple(parts), backward_fn)


def stack_scalars(values: Sequence[Tensor]) -> Tensor:
    """Concatenate scalar tensors into a 1-d vector."""
    return concat([reshape(v, (1,)) for v in values], axis=0)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis."""
    if not 0 <= axis < x.data.ndim:
        raise DimensionError(f"axis {axis} invalid for shape {x.shape}")
    if start < 0 or length < 0 or start + length > x.data.shape[axis]:
        raise ContractError(
            f"slice [{start}:{start + length}] out of bounds for axis {axis} of shape {x.shape}"
        )
    sl = [slice(None)] * x.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    data = x.data[sl].copy()

    def backward_fn(g):
        gx = np.zeros_like(x.data)
        gx[sl] = g
        _accumulate(x, gx)

    return _make(data, (x,), backward_fn)


# ---------------------------------------------------------------------------
# Reductions


def sum_along(x: Tensor, axis: int | None = None) -> Tensor:
    data = x.data.sum(axis=axis)

    def backward_fn(g):
        if axis is None:
            _accumulate(x, np.broadcast_to(g, x.data.shape))
        else:
            _accumulate(x, np.broadcast_to(np.expand_dims(g, axis), x.data.shape))

    return _make(data, (x,), backward_fn)


def mean_along(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.data.size if axis is None else x.data.shape[axis]
    return scale(sum_along(x, axis), 1.0 / n)


def max_along(x: Tensor, axis: int) -> Tensor:
    """Maximum along an axis; the gradient routes to the first maximal index."""
    if not 0 <= axis < x.data.ndim:
        raise DimensionError(f"axis {axis} invalid for shape {x.shape}")
    data = x.data.max(axis=axis)
    argmax = np.argmax(x.data, axis=axis)

    def backward_fn(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(
            gx, np.expand_dims(argmax, axis), np.expand_dims(g, axis), axis
        )
        _accumulate(x, gx)

    return _make(data, (x,), backward_fn)


# ---------------------------------------------------------------------------
# Nonlinearities


def exp(x: Tensor) -> Tensor:
    data = np.exp(x.data)

    def backward_fn(g):
        _accumulate(x, g * data)

    return _make(data, (x,), backward_fn)


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0.0):
        raise NumericError("log requires strictly positive inputs")
    data = np.log(x.data)

    def backward_fn(g):
        _accumulate(x, g / x.data)

    return _make(data, (x,), backward_fn)


def sqrt(x: Tensor) -> Tensor:
    if np.any(x.data < 0.0):
        raise NumericError("sqrt requires non-negative inputs")
    data = np.sqrt(x.data)

    def backward_fn(g):
        _accumulate(x, g * 0.5 / data)

    return _make(data, (x,), backward_fn)


def relu(x: Tensor) -> Tensor:
    data = np.maximum(x.data, 0.0)

    def backward_fn(g):
        _accumulate(x, g * (x.data > 0.0))

    return _make(data, (x,), backward_fn)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Gaussian error linear unit (tanh form)."""
    inner = _GELU_C * (x.data + 0.044715 * x.data**3)
    t = np.tanh(inner)
    data = 0.5 * x.data * (1.0 + t)

    def backward_fn(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x.data**2)
        local = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * d_inner
        _accumulate(x, g * local)

    return _make(data, (x,), backward_fn)


def softmax(x: Tensor, axis: int) -> Tensor:
    """Numerically stabilized softmax along ``axis``; slices sum to one."""
    if not -x.data.ndim <= axis < x.data.ndim:
        raise DimensionError(f"axis {axis} invalid for shape {x.shape}")
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax input contains NaN or Inf")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        _accumulate(x, (g - inner) * data)

    return _make(data, (x,), backward_fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale-shift."""
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise DimensionError(
            f"layer_norm gain/bias must have shape ({d},), got {gain.shape} and {bias.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    data = xhat * gain.data + bias.data

    def backward_fn(g):
        if gain.requires_grad:
            _accumulate(gain, _unbroadcast(g * xhat, gain.data.shape))
        if bias.requires_grad:
            _accumulate(bias, _unbroadcast(g, bias.data.shape))
        if x.requires_grad:
            dxhat = g * gain.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            _accumulate(x, inv * (dxhat - m1 - xhat * m2))

    return _make(data, (x, gain, bias), backward_fn)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup into an embedding table; gradients scatter back by id."""
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1 or idx.size == 0:
        raise ContractError("embedding ids must be a non-empty 1-d sequence")
    if idx.min() < 0 or idx.max() >= table.data.shape[0]:
        raise VocabularyError(
            f"token id out of range [0, {table.data.shape[0]}): {idx.min()}..{idx.max()}"
        )
    data = table.data[idx]

    def backward_fn(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        _accumulate(table, gt)

    return _make(data, (table,), backward_fn)


def dropout(x: Tensor, p: float, rng: RngState) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-p).

    With p == 0 the input tensor is returned unchanged and no draws are
    consumed; otherwise the mask is fully determined by ``rng``.
    """
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout rate must be in [0, 1), got {p}")
    if p == 0.0:
        return x
    keep = rng.uniform(x.data.size).reshape(x.data.shape) >= p
    factor = 1.0 / (1.0 - p)
    data = np.where(keep, x.data * factor, 0.0)

    def backward_fn(g):
        _accumulate(x, np.where(keep, g * factor, 0.0))

    return _make(data, (x,), backward_fn)


def kl_divergence(p: Tensor, q: Tensor, eps: float = KL_EPS) -> Tensor:
    """KL(p || q) along the last axis, averaged over all leading axes.

    ``q`` is clamped below at ``eps`` inside the log; entries with p == 0
    contribute zero. Both inputs must be normalized along the last axis.
    """
    p, q = _lift(p), _lift(q)
    if p.data.shape != q.data.shape:
        raise ContractError(f"kl_divergence shape mismatch: {p.shape} vs {q.shape}")
    if p.data.ndim == 0:
        raise ContractError("kl_divergence needs at least one axis")
    for name, t in (("p", p), ("q", q)):
        sums = t.data.sum(axis=-1)
        if np.any(np.abs(sums - 1.0) > _DIST_TOL):
            raise ContractError(
                f"kl_divergence input {name} is not normalized along the last axis"
            )
    qc = np.maximum(q.data, eps)
    mask = p.data > 0.0
    safe_p = np.where(mask, p.data, 1.0)
    log_ratio = np.log(safe_p) - np.log(qc)
    terms = np.where(mask, p.data * log_ratio, 0.0)
    leading = int(np.prod(p.data.shape[:-1])) if p.data.ndim > 1 else 1
    data = np.asarray(terms.sum() / leading)

    def backward_fn(g):
        gs = float(g) / leading
        if p.requires_grad:
            _accumulate(p, np.where(mask, log_ratio + 1.0, 0.0) * gs)
        if q.requires_grad:
            _accumulate(q, np.where(mask & (q.data > eps), -p.data / qc, 0.0) * gs)

    return _make(data, (p, q), backward_fn)


# ---------------------------------------------------------------------------
# Backward pass and gradient verification


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every gradient-requiring tensor reachable from
    ``loss``. Repeated calls accumulate; callers zero grads between steps."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))

    _accumulate(loss, np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)


def gradient_check(f, x: Tensor, h: float = 1e-5) -> float:
    """Compare reverse-mode and central-difference gradients of a scalar
    function of ``x``.

    Returns max over coordinates of |analytic - numeric| divided by
    max(1e-8, |analytic| + |numeric|).
    """
    x.grad = None
    out = f(x)
    if out.data.size != 1:
        raise ContractError("gradient_check requires a scalar-valued function")
    backward(out)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    flat = x.data.reshape(-1)
    numeric = np.zeros(flat.size)
    with no_grad():
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            f_plus = float(f(x).data.reshape(()))
            flat[i] = original - h
            f_minus = float(f(x).data.reshape(()))
            flat[i] = original
            numeric[i] = (f_plus - f_minus) / (2.0 * h)

    a = analytic.reshape(-1)
    denom = np.maximum(1e-8, np.abs(a) + np.abs(numeric))
    return float(np.max(np.abs(a - numeric) / denom))
