"""Dense tensors with reverse-mode automatic differentiation.

Every value produced by an op is a :class:`Tensor` that remembers the op kind,
its inputs and a closure that maps the output gradient onto input gradients.
:func:`backward` walks the graph in reverse topological order exactly once.

The element kind (``float32`` or ``float64``) is chosen when leaves are
created and propagated through every op; mixing kinds in one op is an error.
Shapes must match exactly except where an op documents otherwise.
"""

from __future__ import annotations

import contextlib
import functools
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

NORM_EPS = 1e-5

OP_KINDS = frozenset(
    {
        "leaf",
        "matmul",
        "add",
        "mul",
        "scale",
        "transpose",
        "reshape",
        "row_softmax",
        "embedding_gather",
        "layer_norm",
        "rms_norm",
        "silu",
        "rope_apply",
        "cross_entropy_mean",
        "l2_mean",
        "slice",
        "concat",
        "sum",
    }
)

_FLOAT_KINDS = (np.float32, np.float64)


class TensorError(ValueError):
    """Shape, dtype or precondition violation in a tensor op."""


class NonFiniteError(ArithmeticError):
    """A forward value or accumulated gradient contains NaN or Inf."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block; used for frozen-teacher forwards."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "inputs", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.type not in _FLOAT_KINDS:
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self.inputs: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, op={self.op})"

    __matmul__ = lambda self, other: matmul(self, other)  # noqa: E731
    __add__ = lambda self, other: add(self, other)  # noqa: E731
    __mul__ = lambda self, other: mul(self, other) if isinstance(other, Tensor) else scale(self, other)  # noqa: E731
    __rmul__ = lambda self, other: scale(self, other)  # noqa: E731
    __neg__ = lambda self: scale(self, -1.0)  # noqa: E731
    __sub__ = lambda self, other: add(self, scale(other, -1.0))  # noqa: E731


def _raise_not_scalar(t: Tensor):
    raise TensorError(f"item() needs a single element, got shape {t.shape}")


def tensor(data, requires_grad: bool = False, dtype=np.float32) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=requires_grad)


def _check_finite(arr: np.ndarray, what: str) -> None:
    # a NaN/Inf anywhere makes the sum non-finite; one reduction is much cheaper than isfinite().all()
    if not np.isfinite(arr.sum()) and not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {what}")


def _same_kind(*ts: Tensor) -> np.dtype:
    kinds = {t.dtype for t in ts}
    if len(kinds) != 1:
        raise TensorError(f"mixed element kinds {sorted(k.name for k in kinds)}")
    return ts[0].dtype


def _make(data: np.ndarray, op: str, inputs: Sequence[Tensor], backward) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.op = op
        out.inputs = tuple(inputs)
        out._backward = backward
    else:
        out.op = op
    return out


# ---------------------------------------------------------------------------
# linear algebra and elementwise ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for equal-rank batched operands, or batched ``a`` times a 2-D ``b``."""
    _same_kind(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise TensorError("matmul needs rank >= 2 operands")
    if a.shape[-1] != b.shape[-2]:
        raise TensorError(f"matmul inner mismatch {a.shape} @ {b.shape}")
    if b.ndim == 2:
        shared = False
    elif a.ndim == b.ndim and a.shape[:-2] == b.shape[:-2]:
        shared = True
    else:
        raise TensorError(f"matmul batch mismatch {a.shape} @ {b.shape}")
    A, B = a.data, b.data
    out = A @ B

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ np.swapaxes(B, -1, -2)
        if b.requires_grad:
            if shared:
                gb = np.swapaxes(A, -1, -2) @ g
            else:
                gb = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _make(out, "matmul", (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_kind(a, b)
    if a.shape != b.shape:
        raise TensorError(f"add shape mismatch {a.shape} vs {b.shape}")
    return _make(a.data + b.data, "add", (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_kind(a, b)
    if a.shape != b.shape:
        raise TensorError(f"mul shape mismatch {a.shape} vs {b.shape}")
    A, B = a.data, b.data
    return _make(A * B, "mul", (a, b), lambda g: (g * B, g * A))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _make(a.data * c, "scale", (a,), lambda g: (g * c,))


def total(a: Tensor) -> Tensor:
    """Sum of all elements as a scalar (shape ``()``)."""
    shape = a.shape
    out = np.asarray(a.data.sum(), dtype=a.dtype)
    return _make(out, "sum", (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def silu(x: Tensor) -> Tensor:
    X = x.data
    with np.errstate(over="ignore"):
        sig = 1.0 / (1.0 + np.exp(-X))
    out = X * sig

    def backward(g):
        return (g * (sig * (1.0 + X * (1.0 - sig))),)

    return _make(out.astype(x.dtype, copy=False), "silu", (x,), backward)


# ---------------------------------------------------------------------------
# shape ops


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise TensorError(f"bad permutation {axes} for rank {a.ndim}")
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), "transpose", (a,), lambda g: (np.transpose(g, inverse),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if math.prod(shape) != a.size:
        raise TensorError(f"cannot reshape {a.shape} to {shape}")
    orig = a.shape
    return _make(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(orig),))


def slice_(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    axis = axis % a.ndim
    if not 0 <= start < stop <= a.shape[axis]:
        raise TensorError(f"slice [{start}:{stop}] out of range for extent {a.shape[axis]}")
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    shape = a.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return _make(a.data[index], "slice", (a,), backward)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    if not parts:
        raise TensorError("concat of nothing")
    _same_kind(*parts)
    axis = axis % parts[0].ndim
    out = np.concatenate([p.data for p in parts], axis=axis)
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return _make(out, "concat", tuple(parts), lambda g: tuple(np.split(g, bounds, axis=axis)))


# ---------------------------------------------------------------------------
# fused neural-net kernels


@functools.lru_cache(maxsize=64)
def _causal_mask(n: int) -> np.ndarray:
    return np.triu(np.ones((n, n), dtype=bool), k=1)


def row_softmax(x: Tensor, causal: bool = False) -> Tensor:
    """Softmax over the last axis with row-max subtraction.

    With ``causal`` the last two axes are (query, key) and keys after the
    query position get probability exactly zero.
    """
    X = x.data
    if causal:
        if X.shape[-1] != X.shape[-2]:
            raise TensorError("causal softmax needs square trailing axes")
        X = np.where(_causal_mask(X.shape[-1]), -np.inf, X)
        y = np.subtract(X, X.max(axis=-1, keepdims=True), out=X)
    else:
        y = X - X.max(axis=-1, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=-1, keepdims=True)

    def backward(g):
        gy = g * y
        gy -= y * gy.sum(axis=-1, keepdims=True)
        return (gy,)

    return _make(y.astype(x.dtype, copy=False), "row_softmax", (x,), backward)


def embedding_gather(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise TensorError("token ids must be integers")
    if table.ndim != 2:
        raise TensorError("embedding table must be 2-D")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise TensorError(f"token id out of range [0, {table.shape[0]})")
    shape = table.shape

    def backward(g):
        gt = np.zeros(shape, dtype=g.dtype)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (gt,)

    return _make(table.data[ids], "embedding_gather", (table,), backward)


def _quiet():
    # overflow surfaces as a non-finite output, which _make reports
    return np.errstate(over="ignore", invalid="ignore")


def _check_norm_args(x: Tensor, *vecs: Tensor) -> None:
    _same_kind(x, *vecs)
    for v in vecs:
        if v.shape != (x.shape[-1],):
            raise TensorError(f"norm parameter shape {v.shape} does not match width {x.shape[-1]}")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = NORM_EPS) -> Tensor:
    """``(x - mean) / sqrt(var + eps) * gamma + beta`` over the last axis."""
    if eps <= 0:
        raise TensorError("eps must be positive")
    _check_norm_args(x, gamma, beta)
    _check_finite(x.data, "layer_norm input")
    X, G = x.data, gamma.data
    with _quiet():
        xc = X - X.mean(axis=-1, keepdims=True)
        rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
        xhat = xc * rstd
        out = xhat * G + beta.data
    lead = tuple(range(X.ndim - 1))

    def backward(g):
        gx = None
        if x.requires_grad:
            with _quiet():
                gh = g * G
                gx = rstd * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out.astype(x.dtype, copy=False), "layer_norm", (x, gamma, beta), backward)


def rms_norm(x: Tensor, theta: Tensor, eps: float = NORM_EPS) -> Tensor:
    """``x / sqrt(mean(x^2) + eps) * theta`` over the last axis."""
    if eps <= 0:
        raise TensorError("eps must be positive")
    _check_norm_args(x, theta)
    _check_finite(x.data, "rms_norm input")
    X, T = x.data, theta.data
    with _quiet():
        rinv = 1.0 / np.sqrt((X * X).mean(axis=-1, keepdims=True) + eps)
        xhat = X * rinv
        out = xhat * T
    lead = tuple(range(X.ndim - 1))

    def backward(g):
        gx = None
        if x.requires_grad:
            with _quiet():
                gh = g * T
                gx = rinv * (gh - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead)

    return _make(out.astype(x.dtype, copy=False), "rms_norm", (x, theta), backward)


@functools.lru_cache(maxsize=64)
def _rope_tables(n_pos: int, head_dim: int, base: float, offset: int, dtype: str):
    inv_freq = base ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    angles = np.arange(offset, offset + n_pos, dtype=np.float64)[:, None] * inv_freq[None, :]
    return np.cos(angles).astype(dtype), np.sin(angles).astype(dtype)


def rope_apply(x: Tensor, base: float, position_offset: int = 0) -> Tensor:
    """Rotate each pair ``(x[2k], x[2k+1])`` at position ``m`` by ``m * base**(-2k/head_dim)``.

    ``x`` is ``[..., positions, head_dim]``; positions start at ``position_offset``.
    """
    if x.ndim < 2:
        raise TensorError("rope_apply needs [..., positions, head_dim]")
    n_pos, head_dim = x.shape[-2], x.shape[-1]
    if head_dim % 2:
        raise TensorError(f"head_dim must be even, got {head_dim}")
    if base <= 1:
        raise TensorError("rope base must exceed 1")
    if position_offset < 0:
        raise TensorError("position_offset must be nonnegative")
    cos, sin = _rope_tables(n_pos, head_dim, float(base), int(position_offset), x.dtype.name)

    def rotate(v, s):
        even, odd = v[..., 0::2], v[..., 1::2]
        out = np.empty_like(v)
        out[..., 0::2] = even * cos - odd * s
        out[..., 1::2] = even * s + odd * cos
        return out

    return _make(rotate(x.data, sin), "rope_apply", (x,), lambda g: (rotate(g, -sin),))


def cross_entropy_mean(logits: Tensor, targets) -> Tensor:
    """Mean over positions of ``-log softmax(logits)[target]`` (fused log-softmax)."""
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise TensorError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    V = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= V):
        raise TensorError("target id out of range")
    Z = logits.data.reshape(-1, V)
    t = targets.reshape(-1)
    n = t.size
    shifted = Z - Z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = np.asarray((lse - shifted[rows, t]).mean(), dtype=logits.dtype)

    def backward(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, t] -= 1.0
        return ((p * (g / n)).reshape(logits.shape).astype(logits.dtype, copy=False),)

    return _make(loss, "cross_entropy_mean", (logits,), backward)


def l2_mean(a: Tensor, b: Tensor | float | np.ndarray) -> Tensor:
    """Squared L2 distance along the last axis, averaged over all other positions.

    A scalar ``b`` is treated as a constant filled to ``a``'s shape.
    """
    if not isinstance(b, Tensor):
        b = Tensor(np.broadcast_to(np.asarray(b, dtype=a.dtype), a.shape).copy())
    _same_kind(a, b)
    if a.shape != b.shape:
        raise TensorError(f"l2_mean shape mismatch {a.shape} vs {b.shape}")
    diff = a.data - b.data
    rows = a.size // a.shape[-1] if a.ndim else 1
    out = np.asarray((diff * diff).sum() / rows, dtype=a.dtype)

    def backward(g):
        ga = diff * (2.0 * g / rows)
        return ga, -ga

    return _make(out, "l2_mean", (a, b), backward)


# ---------------------------------------------------------------------------
# reverse pass


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.inputs:
            if id(parent) not in seen and parent.requires_grad:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, wrt: Mapping[str, Tensor] | None = None) -> dict[str, np.ndarray] | None:
    """Reverse-mode sweep from a scalar ``loss``.

    Every reachable node gets ``.grad`` set (not accumulated across calls).
    When ``wrt`` is given, returns ``{name: grad}`` with zeros for leaves the
    loss does not reach.
    """
    if loss.size != 1:
        raise TensorError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topo_order(loss) if loss.requires_grad else []
    reached = {id(node) for node in order}
    for node in order:
        node.grad = None
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)} if order else {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        _check_finite(g, f"gradient at {node.op}")
        node.grad = g
        if node._backward is None:
            continue
        for parent, pg in zip(node.inputs, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    if wrt is None:
        return None
    return {
        name: t.grad if id(t) in reached and t.grad is not None else np.zeros_like(t.data)
        for name, t in wrt.items()
    }


# ---------------------------------------------------------------------------
# gradient checking


def finite_diff_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    h: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` maps Tensors (built from ``inputs``, double precision) to a scalar
    Tensor. The error at each coordinate is
    ``|a - n| / max(|a|, |n|, 1e-3 * max|a|)``: relative where the gradient is
    not tiny, and scale-relative for coordinates near zero, where central
    differences are limited by rounding rather than by the derivative.
    """
    if not 0 < h <= 1e-3:
        raise ValueError("h must be in (0, 1e-3]")
    points = [np.array(x, dtype=np.float64) for x in inputs]
    for p in points:
        if not np.isfinite(p).all():
            raise ValueError("finite_diff_check inputs must be finite")
    leaves = [Tensor(p.copy(), requires_grad=True) for p in points]
    loss = fn(*leaves)
    named = {str(i): t for i, t in enumerate(leaves)}
    analytic = backward(loss, named)

    def evaluate(values):
        with no_grad():
            return float(fn(*[Tensor(v) for v in values]).data)

    scale = max((float(np.abs(g).max()) for g in analytic.values() if g.size), default=0.0)
    floor = max(1e-3 * scale, 1e-12)
    worst = 0.0
    for i, p in enumerate(points):
        flat = p.reshape(-1)
        ga = analytic[str(i)].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            f_plus = evaluate(points)
            flat[j] = orig - h
            f_minus = evaluate(points)
            flat[j] = orig
            numeric = (f_plus - f_minus) / (2 * h)
            worst = max(worst, abs(ga[j] - numeric) / max(abs(ga[j]), abs(numeric), floor))
    return worst


# ---------------------------------------------------------------------------
# activation statistics


@dataclass(frozen=True)
class ActivationStats:
    mean: float
    std: float
    rms: float


def activation_stats(x) -> ActivationStats:
    """Mean, population std and RMS of one activation vector."""
    v = np.asarray(x, dtype=np.float64).reshape(-1)
    if v.size == 0:
        raise TensorError("empty activation vector")
    mu = v.mean()
    return ActivationStats(
        mean=float(mu),
        std=float(np.sqrt(((v - mu) ** 2).mean())),
        rms=float(np.sqrt((v * v).mean())),
    )


def as_tensors(arrays: Iterable[np.ndarray], requires_grad: bool = False) -> list[Tensor]:
    return [Tensor(a, requires_grad=requires_grad) for a in arrays]
