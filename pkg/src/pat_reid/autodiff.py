"""Dense tensors with reverse-mode gradients on top of numpy.

Every operation allocates a fresh output array (operands are never
mutated) and, when an operand participates in gradient tracking,
registers a closure that accumulates into the operands' ``.grad``.
Training code runs the same graphs at float32; gradient verification
rebuilds them at float64, where central differences are trustworthy.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, NumericalError, ShapeError

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class Tensor:
    """A dense nd-array plus the bookkeeping needed for ``backward``.

    ``data`` is read-only by convention: no op writes into an operand
    array, and the backward pass only ever touches ``.grad``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
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

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if g.shape != self.data.shape:
            raise ShapeError(
                f"gradient shape {list(g.shape)} does not match value shape {list(self.shape)}"
            )
        self.grad = g if self.grad is None else self.grad + g

    def backward(self) -> None:
        """Run reverse-mode accumulation from this scalar."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar, got shape {list(self.shape)}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={list(self.shape)}, dtype={self.data.dtype}, grad={self.requires_grad})"

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def is_finite(t: Tensor) -> bool:
    """Explicit NaN/Inf check for a tensor value."""
    return bool(np.isfinite(t.data).all())


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    return _make(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(-g, b.shape))

    return _make(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def backward(g):
        a._accumulate(_unbroadcast(g * b.data, a.shape))
        b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(out, (a, b), backward)


def scale(a, s: float) -> Tensor:
    """Multiply by a python scalar (does not change dtype)."""
    a = _as_tensor(a)
    s = float(s)
    out = a.data * s

    def backward(g):
        a._accumulate(g * s)

    return _make(out, (a,), backward)


def matmul(a, b) -> Tensor:
    """Matrix product; batched leading dims broadcast like ``np.matmul``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs 2-d operands, got {list(a.shape)} and {list(b.shape)}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {list(a.shape)} @ {list(b.shape)}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accumulate(_unbroadcast(gb, b.shape))

    return _make(out, (a, b), backward)


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; default swaps the last two."""
    a = _as_tensor(a)
    if axes is None:
        perm = list(range(a.ndim))
        perm[-2], perm[-1] = perm[-1], perm[-2]
    else:
        perm = list(axes)
    inv = np.argsort(perm)
    out = np.transpose(a.data, perm)

    def backward(g):
        a._accumulate(np.transpose(g, inv))

    return _make(out, (a,), backward)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = a.data.reshape(shape)

    def backward(g):
        a._accumulate(g.reshape(a.shape))

    return _make(out, (a,), backward)


def expand(a, shape) -> Tensor:
    """Broadcast to ``shape``; gradient sums over the broadcast axes."""
    a = _as_tensor(a)
    out = np.broadcast_to(a.data, shape)

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))

    return _make(out, (a,), backward)


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    ts = [_as_tensor(p) for p in parts]
    if not ts:
        raise ShapeError("concat of zero tensors")
    out = np.concatenate([t.data for t in ts], axis=axis)
    ax = axis % out.ndim
    sizes = [t.shape[ax] for t in ts]

    def backward(g):
        start = 0
        for t, s in zip(ts, sizes):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[ax] = slice(start, start + s)
                t._accumulate(np.ascontiguousarray(g[tuple(sl)]))
            start += s

    return _make(out, tuple(ts), backward)


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice ``[start, stop)`` along one axis."""
    a = _as_tensor(a)
    ax = axis % a.ndim
    if not (0 <= start <= stop <= a.shape[ax]):
        raise ShapeError(f"slice [{start}, {stop}) out of range for axis {axis} of {list(a.shape)}")
    sl = [slice(None)] * a.ndim
    sl[ax] = slice(start, stop)
    out = np.ascontiguousarray(a.data[tuple(sl)])

    def backward(g):
        ga = np.zeros_like(a.data)
        ga[tuple(sl)] = g
        a._accumulate(ga)

    return _make(out, (a,), backward)


def gather_rows(a, indices, axis: int = -2) -> Tensor:
    """Index-select along ``axis``; duplicate indices sum their gradients."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError("gather_rows expects a flat index list")
    ax = axis % a.ndim
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[ax]):
        raise ShapeError(f"gather index out of range for axis {axis} of {list(a.shape)}")
    out = np.take(a.data, idx, axis=ax)

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, (slice(None),) * ax + (idx,), g)
        a._accumulate(ga)

    return _make(out, (a,), backward)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        gb = g
        if axis is not None and not keepdims:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            axes = tuple(ax % a.ndim for ax in axes)
            gb = np.expand_dims(g, axes)
        a._accumulate(np.broadcast_to(gb, a.shape).astype(a.dtype, copy=True))

    return _make(out, (a,), backward)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = 1
        for ax in axes:
            count *= a.shape[ax % a.ndim]
    return scale(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# nonlinearities and normalizations
# ---------------------------------------------------------------------------


def softmax(a, axis: int = -1) -> Tensor:
    """Stable softmax: slices along ``axis`` sum to 1."""
    a = _as_tensor(a)
    if a.shape[axis % a.ndim] < 1:
        raise ShapeError("softmax over an empty axis")
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        a._accumulate(out * (g - dot))

    return _make(out, (a,), backward)


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))
    soft = np.exp(x - lse)
    out = lse if keepdims else np.squeeze(lse, axis=axis)

    def backward(g):
        gb = g if keepdims else np.expand_dims(g, axis % a.ndim)
        a._accumulate(soft * gb)

    return _make(out, (a,), backward)


def layer_norm(a, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance (no affine part).

    A constant slice maps to zeros: the eps inside the square root keeps
    the zero-variance case finite.
    """
    a = _as_tensor(a)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    out = xhat

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        a._accumulate(inv * (g - gm - xhat * gx))

    return _make(out, (a,), backward)


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(a) -> Tensor:
    """GELU, tanh approximation (smooth, so finite differences apply)."""
    a = _as_tensor(a)
    x = a.data
    u = _GELU_C * (x + _GELU_A * x**3)
    t = np.tanh(u)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * x**2)
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * du
        a._accumulate(g * d)

    return _make(out, (a,), backward)


def l2_normalize(a, axis: int = -1) -> Tensor:
    """Scale slices along ``axis`` to unit L2 norm.

    Zero slices map to zero with zero gradient.
    """
    a = _as_tensor(a)
    x = a.data
    n = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    zero = n == 0.0
    safe = np.where(zero, 1.0, n).astype(x.dtype)
    out = x / safe

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        gx = (g - out * dot) / safe
        a._accumulate(np.where(zero, 0.0, gx).astype(x.dtype))

    return _make(out, (a,), backward)


def softplus(a) -> Tensor:
    """log(1 + exp(x)), computed without overflow."""
    a = _as_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def backward(g):
        sig = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.clip(x, 0, None))),
                       np.exp(np.clip(x, None, 0)) / (1.0 + np.exp(np.clip(x, None, 0))))
        a._accumulate(g * sig.astype(x.dtype))

    return _make(out, (a,), backward)


def cross_entropy(logits, target) -> Tensor:
    """Mean cross-entropy of softmax(logits) against a target distribution.

    ``target`` may be integer class ids (shape = logits.shape[:-1]) or a
    probability array matching ``logits``; it is treated as a constant.
    """
    lt = _as_tensor(logits)
    x = lt.data
    num_classes = x.shape[-1]
    rows = x.reshape(-1, num_classes)
    t = np.asarray(target.data if isinstance(target, Tensor) else target)
    if np.issubdtype(t.dtype, np.integer):
        ids = t.reshape(-1)
        if ids.shape[0] != rows.shape[0]:
            raise ShapeError(f"target count {ids.shape[0]} does not match {rows.shape[0]} logit rows")
        probs = np.zeros_like(rows)
        probs[np.arange(rows.shape[0]), ids] = 1.0
    else:
        if t.shape != x.shape:
            raise ShapeError(f"target shape {list(t.shape)} does not match logits {list(lt.shape)}")
        probs = t.reshape(-1, num_classes).astype(x.dtype)
    m = rows.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(rows - m).sum(axis=1, keepdims=True))
    ce = lse[:, 0] - (probs * rows).sum(axis=1)
    nrows = rows.shape[0]
    out = np.asarray(ce.mean(), dtype=x.dtype)

    def backward(g):
        soft = np.exp(rows - lse)
        gl = (soft - probs) * (float(g) / nrows)
        lt._accumulate(gl.reshape(x.shape).astype(x.dtype))

    return _make(out, (lt,), backward)


def primitive_suite() -> dict[str, Callable]:
    """Differentiable building blocks, keyed by name.

    Shape rules live on each op's docstring; every entry defines forward
    and backward and is covered by the finite-difference suite.
    """
    return {
        "add": add,
        "mul": mul,
        "scale": scale,
        "layer_norm": layer_norm,
        "gelu": gelu,
        "l2_normalize": l2_normalize,
        "concat": concat,
        "slice": slice_axis,
        "transpose": transpose,
        "gather_rows": gather_rows,
        "cross_entropy": cross_entropy,
        "matmul": matmul,
        "softmax": softmax,
        "logsumexp": logsumexp,
        "softplus": softplus,
        "reduce_sum": reduce_sum,
        "reduce_mean": reduce_mean,
    }


def finite_diff_check(
    op: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    epsilon: float = 1e-5,
    seed: int = 0,
    max_coords: int | None = None,
    name: str | None = None,
) -> float:
    """Max relative error between reverse-mode and central-difference grads.

    Inputs are promoted to float64 leaves. Non-scalar outputs are reduced
    with a fixed random linear functional so one backward pass covers
    them. ``max_coords`` caps the coordinates probed per input (all by
    default). Relative error uses |a - n| / max(|a| + |n|, 1e-6).
    """
    if not (1e-6 <= epsilon <= 1e-3):
        raise ConfigError(f"epsilon {epsilon} outside [1e-6, 1e-3]")
    opname = name or getattr(op, "__name__", "op")
    rng = np.random.default_rng(seed)
    leaves = [Tensor(np.asarray(x, dtype=np.float64), requires_grad=True) for x in inputs]
    out = op(*leaves)
    if not is_finite(out):
        raise NumericalError(f"non-finite forward value in {opname}")
    weights = rng.standard_normal(out.shape) if out.size != 1 else np.ones(out.shape)
    loss = reduce_sum(mul(out, Tensor(weights)))
    loss.backward()
    analytic = [
        np.zeros_like(leaf.data) if leaf.grad is None else np.asarray(leaf.grad, dtype=np.float64)
        for leaf in leaves
    ]

    base = [np.array(leaf.data) for leaf in leaves]

    def scalar_at(arrays) -> float:
        value = op(*[Tensor(arr) for arr in arrays]).data
        if not np.isfinite(value).all():
            raise NumericalError(f"non-finite forward value in {opname} during finite differences")
        return float((value * weights).sum())

    worst = 0.0
    for li, arr in enumerate(base):
        flat = arr.reshape(-1)
        n = flat.size
        if max_coords is not None and n > max_coords:
            coords = rng.choice(n, size=max_coords, replace=False)
        else:
            coords = np.arange(n)
        for ci in coords:
            h = epsilon * (1.0 + abs(flat[ci]))
            bumped = [b if i != li else b.copy() for i, b in enumerate(base)]
            bumped[li].reshape(-1)[ci] = flat[ci] + h
            f_plus = scalar_at(bumped)
            bumped[li].reshape(-1)[ci] = flat[ci] - h
            f_minus = scalar_at(bumped)
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = analytic[li].reshape(-1)[ci]
            err = abs(a - numeric) / max(abs(a) + abs(numeric), 1e-6)
            if err > worst:
                worst = err
    return worst
