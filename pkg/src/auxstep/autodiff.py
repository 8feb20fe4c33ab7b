"""Reverse-mode automatic differentiation over dense float64 arrays.

A small tape-based engine: every primitive records its input tensors and a
local-gradient closure on the output, and ``backward`` replays the recorded
graph in reverse topological order. Gradients accumulate additively into
``Tensor.grad`` until cleared, so several backward passes can be combined.

The primitive set is deliberately small: elementwise arithmetic, a pointwise
affine transform, a few activations, log-softmax, axis reductions,
nearest-neighbor 2x upsampling, 2x2 mean pooling, reshape/concat, and masked
reductions. That is enough to express the shared decoder, every task head
and every training loss used in this package.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "no_grad",
    "set_debug_checks",
    "constant",
    "parameter",
    "add",
    "sub",
    "mul",
    "add_scalar",
    "mul_scalar",
    "neg",
    "absolute",
    "affine",
    "channel_affine",
    "permute",
    "relu",
    "sigmoid",
    "softplus",
    "log",
    "clamp",
    "log_softmax",
    "sum_axes",
    "mean_axes",
    "upsample2x",
    "pool2x2",
    "reshape",
    "concat",
    "masked_sum",
    "masked_mean",
    "backward",
    "zero_grad",
    "finite_difference_grad",
    "relative_error",
]


class ShapeError(ValueError):
    """Raised when operand shapes violate a primitive's rule."""


_GRAD_ENABLED = True
_DEBUG_CHECKS = False


def set_debug_checks(enabled: bool) -> None:
    """Toggle finiteness assertions on every forward output (slow; for tests)."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


class no_grad:
    """Context manager suspending tape recording (pure value computation)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    """Dense float64 value grid participating in the differentiation tape.

    ``data`` is immutable by convention once created; only ``grad`` is
    mutated (additively, by ``backward``) after construction.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn: Callable[[np.ndarray], list[tuple["Tensor", np.ndarray]]] | None = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def backward(self) -> None:
        backward(self)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -float(other))

    def __rsub__(self, other):
        return add_scalar(neg(self), float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_scalar(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op}, requires_grad={self.requires_grad})"


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _make(data: np.ndarray, op: str, parents: Sequence[Tensor], grad_fn) -> Tensor:
    if _DEBUG_CHECKS and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite output of primitive '{op}'")
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
        out._op = op
    return out


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)
    return _make(a.data + b.data, "add", (a, b), lambda g: [(a, g), (b, g)])


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)
    return _make(a.data - b.data, "sub", (a, b), lambda g: [(a, g), (b, -g)])


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)
    return _make(a.data * b.data, "mul", (a, b), lambda g: [(a, g * b.data), (b, g * a.data)])


def add_scalar(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _make(a.data + s, "add_scalar", (a,), lambda g: [(a, g)])


def mul_scalar(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _make(a.data * s, "mul_scalar", (a,), lambda g: [(a, g * s)])


def neg(a: Tensor) -> Tensor:
    return mul_scalar(a, -1.0)


def absolute(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return _make(np.abs(a.data), "absolute", (a,), lambda g: [(a, g * sign)])


# ---------------------------------------------------------------------------
# affine transform and activations

def affine(w: Tensor, x: Tensor, b: Tensor) -> Tensor:
    """``w @ x + b[:, None]`` with w (out, in), x (in, n), b (out,)."""
    if w.data.ndim != 2 or x.data.ndim != 2:
        raise ShapeError(f"affine: expected 2-d operands, got {w.data.shape} and {x.data.shape}")
    if w.data.shape[1] != x.data.shape[0]:
        raise ShapeError(f"affine: inner dims differ, {w.data.shape} vs {x.data.shape}")
    if b.data.shape != (w.data.shape[0],):
        raise ShapeError(f"affine: bias shape {b.data.shape} does not match out dim {w.data.shape[0]}")

    def grad_fn(g):
        return [(w, g @ x.data.T), (x, w.data.T @ g), (b, g.sum(axis=1))]

    return _make(w.data @ x.data + b.data[:, None], "affine", (w, x, b), grad_fn)


def channel_affine(w: Tensor, x: Tensor, b: Tensor) -> Tensor:
    """Affine over the last axis: x (..., in) @ w.T + b with w (out, in), b (out,).

    The pointwise layer of the decoder: every leading position (sample, row,
    column) is mixed through the same (out, in) matrix.
    """
    if w.data.ndim != 2 or x.data.ndim < 1:
        raise ShapeError(f"channel_affine: expected (out, in) weight, got {w.data.shape}")
    out_dim, in_dim = w.data.shape
    if x.data.shape[-1] != in_dim:
        raise ShapeError(f"channel_affine: last axis of {x.data.shape} does not match weight {w.data.shape}")
    if b.data.shape != (out_dim,):
        raise ShapeError(f"channel_affine: bias shape {b.data.shape} does not match out dim {out_dim}")
    # one flat GEMM instead of a stack of row-sized ones
    x2 = np.ascontiguousarray(x.data).reshape(-1, in_dim)
    y = (x2 @ w.data.T + b.data).reshape(x.data.shape[:-1] + (out_dim,))

    def grad_fn(g):
        g2 = np.ascontiguousarray(g).reshape(-1, out_dim)
        return [(w, g2.T @ x2), (x, (g2 @ w.data).reshape(x.data.shape)),
                (b, g2.sum(axis=0))]

    return _make(y, "channel_affine", (w, x, b), grad_fn)


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    """Transpose to the given axis order (a materialized copy, not a view)."""
    axes = tuple(axes)
    if sorted(axes) != list(range(a.data.ndim)):
        raise ShapeError(f"permute: axes {axes} are not a permutation for shape {a.data.shape}")
    inverse = tuple(int(i) for i in np.argsort(axes))

    def grad_fn(g):
        return [(a, np.ascontiguousarray(g.transpose(inverse)))]

    return _make(np.ascontiguousarray(a.data.transpose(axes)), "permute", (a,), grad_fn)


def relu(a: Tensor) -> Tensor:
    keep = a.data > 0
    return _make(np.where(keep, a.data, 0.0), "relu", (a,), lambda g: [(a, g * keep)])


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.empty_like(x)
    np.abs(x, out=e)
    np.negative(e, out=e)
    np.exp(e, out=e)  # e = exp(-|x|), never overflows
    num = np.where(x >= 0, 1.0, e)
    e += 1.0
    np.divide(num, e, out=num)
    return num


def sigmoid(a: Tensor) -> Tensor:
    y = _stable_sigmoid(a.data)

    def grad_fn(g):
        t = 1.0 - y
        t *= y
        t *= g
        return [(a, t)]

    return _make(y, "sigmoid", (a,), grad_fn)


def softplus(a: Tensor) -> Tensor:
    x = a.data

    def grad_fn(g):
        return [(a, g * _stable_sigmoid(x))]

    return _make(np.logaddexp(0.0, x), "softplus", (a,), grad_fn)


def log(a: Tensor) -> Tensor:
    x = a.data
    return _make(np.log(x), "log", (a,), lambda g: [(a, g / x)])


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    if not lo < hi:
        raise ValueError(f"clamp: lo {lo} must be < hi {hi}")
    inside = (a.data > lo) & (a.data < hi)
    return _make(np.clip(a.data, lo, hi), "clamp", (a,), lambda g: [(a, g * inside)])


def log_softmax(a: Tensor, axis: int) -> Tensor:
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    s = x - m
    y = s - np.log(np.exp(s).sum(axis=axis, keepdims=True))

    def grad_fn(g):
        return [(a, g - np.exp(y) * g.sum(axis=axis, keepdims=True))]

    return _make(y, "log_softmax", (a,), grad_fn)


# ---------------------------------------------------------------------------
# reductions and spatial ops

def _normalize_axes(axes, ndim: int) -> tuple[int, ...]:
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(ax % ndim for ax in axes)


def sum_axes(a: Tensor, axes) -> Tensor:
    axes = _normalize_axes(axes, a.data.ndim)
    shape = a.data.shape

    def grad_fn(g):
        return [(a, np.broadcast_to(np.expand_dims(g, axes), shape))]

    return _make(a.data.sum(axis=axes), "sum_axes", (a,), grad_fn)


def mean_axes(a: Tensor, axes) -> Tensor:
    axes = _normalize_axes(axes, a.data.ndim)
    shape = a.data.shape
    count = 1
    for ax in axes:
        count *= shape[ax]

    def grad_fn(g):
        return [(a, np.broadcast_to(np.expand_dims(g, axes), shape) / count)]

    return _make(a.data.mean(axis=axes), "mean_axes", (a,), grad_fn)


def _spatial_axes(op: str, shape: tuple[int, ...], axes) -> tuple[int, int]:
    if len(shape) < 2:
        raise ShapeError(f"{op}: need >=2 dims, got {shape}")
    ax0, ax1 = _normalize_axes(axes, len(shape))
    if ax0 == ax1:
        raise ShapeError(f"{op}: axes must be distinct, got {axes}")
    return ax0, ax1


def _halve_axis(g: np.ndarray, axis: int) -> np.ndarray:
    """Sum adjacent pairs along one axis (adjoint of 2x nearest repeat)."""
    shape = g.shape
    split = shape[:axis] + (shape[axis] // 2, 2) + shape[axis + 1:]
    return np.ascontiguousarray(g).reshape(split).sum(axis=axis + 1)


def upsample2x(a: Tensor, axes=(-2, -1)) -> Tensor:
    """Nearest-neighbor 2x upsampling over two axes (default: the last two)."""
    ax0, ax1 = _spatial_axes("upsample2x", a.data.shape, axes)
    lo, hi = sorted((ax0, ax1))
    # duplicate via a broadcast view collapsed in one copy (repeat would take two)
    expanded = np.expand_dims(a.data, (lo + 1, hi + 2))
    wide = list(expanded.shape)
    wide[lo + 1] = wide[hi + 2] = 2
    shape = list(a.data.shape)
    shape[lo] *= 2
    shape[hi] *= 2
    y = np.broadcast_to(expanded, wide).reshape(shape)

    def grad_fn(g):
        return [(a, _halve_axis(_halve_axis(g, ax0), ax1))]

    return _make(y, "upsample2x", (a,), grad_fn)


def pool2x2(a: Tensor, axes=(-2, -1)) -> Tensor:
    """2x2 mean pooling over two axes (extents must be even)."""
    ax0, ax1 = _spatial_axes("pool2x2", a.data.shape, axes)
    h, w = a.data.shape[ax0], a.data.shape[ax1]
    if h % 2 or w % 2:
        raise ShapeError(f"pool2x2: extents on axes {axes} must be even, got {a.data.shape}")
    y = _halve_axis(_halve_axis(a.data, ax0), ax1) * 0.25

    def grad_fn(g):
        return [(a, np.repeat(np.repeat(g, 2, axis=ax0), 2, axis=ax1) * 0.25)]

    return _make(y, "pool2x2", (a,), grad_fn)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = a.data.shape
    try:
        y = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {old} as {shape}") from exc
    return _make(y, "reshape", (a,), lambda g: [(a, g.reshape(old))])


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat: empty input list")
    base = tensors[0].data.shape
    for t in tensors[1:]:
        s = t.data.shape
        if len(s) != len(base) or s[:axis] != base[:axis] or s[axis + 1:] != base[axis + 1:]:
            raise ShapeError(f"concat: incompatible shapes {base} vs {s} on axis {axis}")
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def grad_fn(g):
        parts = []
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            parts.append((t, g[tuple(idx)]))
        return parts

    return _make(np.concatenate([t.data for t in tensors], axis=axis), "concat", tuple(tensors), grad_fn)


def masked_sum(a: Tensor, mask: np.ndarray) -> Tensor:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.data.shape:
        raise ShapeError(f"masked_sum: mask shape {mask.shape} vs data {a.data.shape}")
    return _make(a.data[mask].sum(), "masked_sum", (a,), lambda g: [(a, g * mask)])


def masked_mean(a: Tensor, mask: np.ndarray) -> Tensor:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.data.shape:
        raise ShapeError(f"masked_mean: mask shape {mask.shape} vs data {a.data.shape}")
    count = int(mask.sum())
    if count == 0:
        raise ValueError("masked_mean: mask selects no elements")
    return _make(a.data[mask].sum() / count, "masked_mean", (a,), lambda g: [(a, (g / count) * mask)])


# ---------------------------------------------------------------------------
# backward pass

def backward(loss: Tensor) -> None:
    """Populate ``grad`` of every reachable requires_grad tensor with d(loss)/d(tensor).

    Gradients accumulate additively across calls; use :func:`zero_grad` to clear.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    if loss._grad_fn is None and not loss._parents:
        raise RuntimeError("backward: empty tape (loss has no recorded operations)")

    # reverse topological order via iterative post-order walk
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            if node.grad is None:
                node.grad = g.copy()
            else:
                node.grad += g
        if node._grad_fn is None:
            continue
        for parent, pg in node._grad_fn(g):
            acc = grads.get(id(parent))
            if acc is None:
                grads[id(parent)] = pg
            else:
                grads[id(parent)] = acc + pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# finite-difference oracle

def finite_difference_grad(f: Callable[[np.ndarray], float], x: np.ndarray, epsilon: float = 1e-4) -> np.ndarray:
    """Central finite differences of a scalar function, one coordinate at a time.

    ``f`` must be deterministic and is called on a perturbed copy of ``x``;
    non-finite outputs raise.
    """
    if epsilon <= 0:
        raise ValueError("finite_difference_grad: epsilon must be > 0")
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x)
    flat = out.reshape(-1)
    for i in range(x.size):
        xp = x.copy().reshape(-1)
        xp[i] += epsilon
        hi = float(f(xp.reshape(x.shape)))
        xp[i] -= 2.0 * epsilon
        lo = float(f(xp.reshape(x.shape)))
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise FloatingPointError("finite_difference_grad: non-finite function value")
        flat[i] = (hi - lo) / (2.0 * epsilon)
    return out


def relative_error(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """|a - b| / max(|a|, |b|, 1e-8) elementwise."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
