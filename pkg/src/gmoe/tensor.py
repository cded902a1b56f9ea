"""Dense tensors with reverse-mode automatic differentiation.

Every operation builds its output with :func:`_record`, which checks the
result for non-finite values and, when any input participates in the graph,
stores the inputs together with a closure that maps the output gradient to
input gradients.  :meth:`Tensor.backward` replays those closures in reverse
topological order.

Broadcasting is deliberately narrow: elementwise binary ops accept equal
shapes or a scalar operand.  Row-wise bias addition has its own op
(:func:`add_bias`).
"""

from __future__ import annotations

import contextlib
import logging
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf, ndtr

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float64

_GRAD_ENABLED = True


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


class ShapeError(ValueError):
    """Raised on incompatible operand extents."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """An n-dimensional array that can take part in backpropagation."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind not in "f":
            arr = arr.astype(DEFAULT_DTYPE if dtype is None else dtype)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    # -- basic accessors -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def zero_grad(self) -> None:
        self.grad = None

    # -- autodiff ----------------------------------------------------------
    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf that requires it."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not (parent.requires_grad or parent._backward is not None):
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- operator sugar ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def sum(self, axis=None) -> Tensor:
        return tsum(self, axis)

    def mean(self, axis=None) -> Tensor:
        return mean(self, axis)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _topological_order(root: Tensor) -> list[Tensor]:
    # Iterative DFS; deep graphs from long sequential models would blow the recursion limit.
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def _record(op: str, data: np.ndarray, parents: Iterable[Tensor], backward) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite value produced by '{op}'")
    out = Tensor(data)
    out.op = op
    parents = tuple(parents)
    if _GRAD_ENABLED and any(p.requires_grad or p._backward is not None for p in parents):
        out._parents = parents
        out._backward = backward
    return out


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.array(data, dtype=dtype or DEFAULT_DTYPE), requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def parameter(data, dtype=None) -> Tensor:
    return Tensor(np.array(data, dtype=dtype or DEFAULT_DTYPE), requires_grad=True)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def _binary_shapes(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and a.data.size != 1 and b.data.size != 1:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ and neither is a scalar")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a, b) -> Tensor:
    a = _as_tensor(a, getattr(b, "dtype", None))
    b = _as_tensor(b, a.dtype)
    _binary_shapes("add", a, b)
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)))


def sub(a, b) -> Tensor:
    a = _as_tensor(a, getattr(b, "dtype", None))
    b = _as_tensor(b, a.dtype)
    _binary_shapes("sub", a, b)
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape)))


def mul(a, b) -> Tensor:
    a = _as_tensor(a, getattr(b, "dtype", None))
    b = _as_tensor(b, a.dtype)
    _binary_shapes("mul", a, b)
    return _record("mul", a.data * b.data, (a, b),
                   lambda g: (_reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a = _as_tensor(a, getattr(b, "dtype", None))
    b = _as_tensor(b, a.dtype)
    _binary_shapes("div", a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data
    return _record("div", out, (a, b),
                   lambda g: (_reduce_to(g / b.data, a.shape),
                              _reduce_to(-g * out / b.data, b.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    return _record("scale", a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _record("relu", np.where(mask, a.data, 0.0).astype(a.dtype), (a,), lambda g: (g * mask,))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    return _record("gelu", x * cdf, (a,), lambda g: (g * (cdf + x * pdf),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _record("log", out, (a,), lambda g: (g / a.data,))


def square(a: Tensor) -> Tensor:
    return _record("square", a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _record("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def normal_cdf(a: Tensor) -> Tensor:
    x = a.data
    return _record("normal_cdf", ndtr(x), (a,),
                   lambda g: (g * _INV_SQRT2PI * np.exp(-0.5 * x * x),))


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def _expand_reduced(g: np.ndarray, shape, axis) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape).copy()
    return np.broadcast_to(np.expand_dims(g, axis), shape).copy()


def tsum(a: Tensor, axis=None) -> Tensor:
    return _record("sum", np.asarray(a.data.sum(axis=axis)), (a,),
                   lambda g: (_expand_reduced(g, a.shape, axis),))


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return _record("mean", np.asarray(a.data.mean(axis=axis)), (a,),
                   lambda g: (_expand_reduced(g, a.shape, axis) / n,))


def tmax(a: Tensor, axis: int) -> Tensor:
    """Maximum along ``axis``; the gradient goes to the first maximal entry."""
    axis = axis % a.ndim
    idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    out = np.take_along_axis(a.data, idx, axis=axis).squeeze(axis)

    def backward(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, idx, np.expand_dims(g, axis), axis=axis)
        return (ga,)
    return _record("max", out, (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _record("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _record("transpose", out, (a,), lambda g: (np.transpose(g, inv),))


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _record("getitem", np.array(out), (a,), backward)


def index_add(n: int, index: np.ndarray, values: Tensor) -> Tensor:
    """Rows of ``values`` summed into a zero tensor of ``n`` rows at ``index``."""
    index = np.asarray(index, dtype=np.intp)
    if values.shape[0] != index.shape[0]:
        raise ShapeError(f"index_add: {index.shape[0]} indices for {values.shape[0]} rows")
    out = np.zeros((n,) + values.shape[1:], dtype=values.dtype)
    np.add.at(out, index, values.data)
    return _record("index_add", out, (values,), lambda g: (g[index],))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _record("concat", out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of ``a[..., m, k]`` with a 2-D ``b[k, n]``."""
    if b.ndim != 2 or a.ndim < 2:
        raise ShapeError(f"matmul: expected a[...,m,k] @ b[k,n], got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")

    def backward(g):
        ga = g @ b.data.T
        a2 = a.data.reshape(-1, a.shape[-1])
        gb = a2.T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _record("matmul", a.data @ b.data, (a, b), backward)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """``x + b`` where ``b`` matches the trailing extents of ``x``."""
    if b.ndim > x.ndim or x.shape[x.ndim - b.ndim:] != b.shape:
        raise ShapeError(f"add_bias: bias {b.shape} does not match trailing extents of {x.shape}")
    lead = tuple(range(x.ndim - b.ndim))
    return _record("add_bias", x.data + b.data, (x, b), lambda g: (g, g.sum(axis=lead)))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for ``weight[out, in]``."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    w = weight.data
    # always one 2-D product so results do not depend on the leading layout
    out = (x.data.reshape(-1, x.shape[-1]) @ w.T).reshape(x.shape[:-1] + (w.shape[0],))
    if bias is not None:
        out = out + bias.data

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ w
        gw = g2.T @ x.data.reshape(-1, x.shape[-1])
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _record("linear", out, parents, backward)


def scale_rows(x: Tensor, w: Tensor) -> Tensor:
    """Multiply row ``i`` of ``x[n, d]`` by scalar ``w[i]``."""
    if x.ndim != 2 or w.shape != (x.shape[0],):
        raise ShapeError(f"scale_rows: x {x.shape} with weights {w.shape}")
    wc = w.data[:, None]
    return _record("scale_rows", x.data * wc, (x, w),
                   lambda g: (g * wc, (g * x.data).sum(axis=1)))


def l2_norm(x: Tensor) -> Tensor:
    """Euclidean norm of all elements; zero vector maps to 0 with zero gradient."""
    n = float(np.sqrt(np.sum(x.data * x.data)))

    def backward(g):
        if n == 0.0:
            return (np.zeros_like(x.data),)
        return (g * x.data / n,)

    return _record("l2_norm", np.asarray(n, dtype=x.dtype), (x,), backward)


def normalize_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each row of a 2-D tensor to unit Euclidean length; norms clamp at ``eps``."""
    norms = np.sqrt(np.sum(x.data * x.data, axis=-1, keepdims=True))
    clamped = norms < eps
    if np.any(clamped):
        logger.warning("normalize_rows: %d row(s) below norm %g were clamped", int(clamped.sum()), eps)
    denom = np.maximum(norms, eps)
    y = x.data / denom

    def backward(g):
        proj = np.sum(g * y, axis=-1, keepdims=True)
        gx = np.where(clamped, g / denom, (g - y * proj) / denom)
        return (gx,)

    return _record("normalize_rows", y, (x,), backward)


# ---------------------------------------------------------------------------
# normalization and probability
# ---------------------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] == 0:
        raise ShapeError("softmax over an empty axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    return _record("softmax", s, (x,),
                   lambda g: (s * (g - np.sum(g * s, axis=axis, keepdims=True)),))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] == 0:
        raise ShapeError("log_softmax over an empty axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)
    return _record("log_softmax", out, (x,),
                   lambda g: (g - sm * g.sum(axis=axis, keepdims=True),))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then apply ``gamma * xhat + beta``."""
    d = x.shape[-1]
    if d == 0:
        raise ShapeError("layer_norm over a zero-length feature axis")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gamma {gamma.shape}/beta {beta.shape} vs features {d}")
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        gxhat = g * gamma.data
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _record("layer_norm", out, (x, gamma, beta), backward)


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int) -> tuple[Tensor, np.ndarray]:
    """Scaled dot-product attention over ``[B, T, d]`` inputs split into ``heads``.

    Returns the concatenated head outputs ``[B, T, d]`` and the attention
    weights ``[B, heads, T, T]`` (a plain array, for inspection).
    """
    if not (q.shape == k.shape == v.shape) or q.ndim != 3:
        raise ShapeError(f"attention: q {q.shape}, k {k.shape}, v {v.shape}")
    B, T, d = q.shape
    if d % heads:
        raise ShapeError(f"attention: width {d} not divisible by {heads} heads")
    hd = d // heads

    def split(a):
        return a.reshape(B, T, heads, hd).transpose(0, 2, 1, 3)

    qh, kh, vh = split(q.data), split(k.data), split(v.data)
    s = 1.0 / math.sqrt(hd)
    scores = np.einsum("bhqd,bhkd->bhqk", qh, kh) * s
    scores -= scores.max(axis=-1, keepdims=True)
    att = np.exp(scores)
    att /= att.sum(axis=-1, keepdims=True)
    oh = np.einsum("bhqk,bhkd->bhqd", att, vh)
    out = oh.transpose(0, 2, 1, 3).reshape(B, T, d)

    def merge(a):
        return a.transpose(0, 2, 1, 3).reshape(B, T, d)

    def backward(g):
        gh = split(g)
        gatt = np.einsum("bhqd,bhkd->bhqk", gh, vh)
        gv = np.einsum("bhqk,bhqd->bhkd", att, gh)
        gscores = att * (gatt - np.sum(gatt * att, axis=-1, keepdims=True)) * s
        gq = np.einsum("bhqk,bhkd->bhqd", gscores, kh)
        gk = np.einsum("bhqk,bhqd->bhkd", gscores, qh)
        return merge(gq), merge(gk), merge(gv)

    return _record("attention", out, (q, k, v), backward), att


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    labels = np.asarray(labels, dtype=np.intp)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} with labels {labels.shape}")
    K = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ValueError(f"cross_entropy: labels must lie in [0, {K})")
    lp = log_softmax(logits, axis=1)
    picked = lp[np.arange(labels.shape[0]), labels]
    return scale(tsum(picked), -1.0 / labels.shape[0])


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------

def gradient_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-6) -> float:
    """Largest relative error between autodiff and central differences.

    ``f`` is re-evaluated with each entry of each parameter nudged by ``±h``;
    the relative error per entry is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    for p in params:
        p.grad = None
    out = f()
    if out.data.size != 1 or not np.isfinite(out.data).all():
        raise NonFiniteError("gradient_check: f must return a finite scalar")
    out.backward()
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            with no_grad():
                flat[i] = orig + h
                fp = float(f().data)
                flat[i] = orig - h
                fm = float(f().data)
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * h)
            a = float(analytic.reshape(-1)[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
