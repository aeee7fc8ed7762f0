"""Dense tensors with a small reverse-mode autodiff engine.

Only the operations needed for MLP / residual-MLP training and the
distillation loss are provided. Every op records its parents and a closure
that pushes the output gradient back to them; :meth:`Tensor.backward` walks
the graph in reverse topological order.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, DomainError, NonFiniteError, UsageError

LN_EPS = 1e-5


class Tensor:
    """A node in the computation graph.

    Args:
        data: array-like values. Stored as float32 unless ``dtype`` says otherwise
            (or the input is already float64).
        requires_grad: whether gradients should be accumulated into ``grad``.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None, *, _parents=(), _op: str = "leaf"):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op = _op
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    # -- arithmetic sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other, self.dtype)))

    def __rsub__(self, other):
        return add(_lift(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise UsageError("division is only supported by a constant")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def sum(self) -> Tensor:
        return sum_all(self)

    def mean(self) -> Tensor:
        return mean_all(self)

    # -- autodiff ---------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf with ``requires_grad``."""
        if self.data.size != 1:
            raise UsageError(f"backward() needs a scalar root, got shape {self.shape}")
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
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in node._backward(g):
                if parent is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    def zero_grad(self) -> None:
        self.grad = None


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _lift(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _check_finite(out: np.ndarray, inputs: Iterable[Tensor], op: str) -> None:
    if np.isfinite(out).all():
        return
    if all(np.isfinite(t.data).all() for t in inputs):
        raise NonFiniteError(f"{op} produced non-finite values from finite inputs")
    raise NonFiniteError(f"non-finite values propagated through {op}")


def _make(out: np.ndarray, parents: Sequence[Tensor], op: str, backward) -> Tensor:
    _check_finite(out, parents, op)
    rg = any(p.requires_grad for p in parents)
    t = Tensor(out, requires_grad=rg, _parents=tuple(parents) if rg else (), _op=op)
    if rg:
        t._backward = backward
    return t


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise ----------------------------------------------------------
def add(a, b) -> Tensor:
    a = _lift(a, getattr(b, "dtype", None))
    b = _lift(b, a.dtype)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {a.shape} with {b.shape}") from exc

    def backward(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape)))

    return _make(out, (a, b), "add", backward)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), "neg", lambda g: ((a, -g),))


def mul(a, b) -> Tensor:
    a = _lift(a, getattr(b, "dtype", None))
    b = _lift(b, a.dtype)
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            out = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {a.shape} with {b.shape}") from exc

    def backward(g):
        return (
            (a, _unbroadcast(g * b.data, a.shape)),
            (b, _unbroadcast(g * a.data, b.shape)),
        )

    return _make(out.astype(a.dtype, copy=False), (a, b), "mul", backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, (x,), "relu", lambda g: ((x, g * mask),))


def log(x: Tensor) -> Tensor:
    if (x.data <= 0).any():
        raise DomainError("log of non-positive value")
    return _make(np.log(x.data), (x,), "log", lambda g: ((x, g / x.data),))


# -- shape / reductions ---------------------------------------------------
def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise DimensionError("transpose expects a 2-D tensor")
    return _make(x.data.T, (x,), "transpose", lambda g: ((x, g.T),))


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(np.asarray(x.data.sum()), (x,), "sum", lambda g: ((x, np.broadcast_to(g, shape).copy()),))


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    return _make(
        np.asarray(x.data.mean()),
        (x,),
        "mean",
        lambda g: ((x, np.full(shape, g / n, dtype=x.dtype)),),
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of 2-D tensors ``a[m×k] @ b[k×n]``."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} @ {b.shape}")

    def backward(g):
        return ((a, g @ b.data.T), (b, a.data.T @ g))

    with np.errstate(over="ignore", invalid="ignore"):
        out = a.data @ b.data
    return _make(out, (a, b), "matmul", backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` as one node; ``weight`` has shape (out, in)."""
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear: input width {x.shape[-1]} != weight fan-in {weight.shape[1]}")
    # overflow surfaces as NonFiniteError in _make
    with np.errstate(over="ignore", invalid="ignore"):
        out = x.data @ weight.data.T
        if bias is not None:
            out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        grads = [(x, g @ weight.data), (weight, g.T @ x.data)]
        if bias is not None:
            grads.append((bias, g.sum(axis=0)))
        return grads

    return _make(out, parents, "linear", backward)


# -- normalisation and probabilities --------------------------------------
def _require_last_axis(x: Tensor, op: str) -> None:
    if x.data.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError(f"{op} over an empty last axis")


def layer_norm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None, eps: float = LN_EPS) -> Tensor:
    """Normalise over the last axis, then apply the affine ``gain``/``bias``."""
    _require_last_axis(x, "layer_norm")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat
    if gain is not None:
        out = out * gain.data
    if bias is not None:
        out = out + bias.data
    parents = tuple(p for p in (x, gain, bias) if p is not None)

    def backward(g):
        gx = g * gain.data if gain is not None else g
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        grads = [(x, dx.astype(xd.dtype, copy=False))]
        if gain is not None:
            grads.append((gain, _unbroadcast(g * xhat, gain.shape)))
        if bias is not None:
            grads.append((bias, _unbroadcast(g, bias.shape)))
        return grads

    return _make(out.astype(xd.dtype, copy=False), parents, "layer_norm", backward)


def _softmax_array(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax_array(z: np.ndarray) -> np.ndarray:
    s = z - z.max(axis=-1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def softmax(x: Tensor) -> Tensor:
    _require_last_axis(x, "softmax")
    p = _softmax_array(x.data)

    def backward(g):
        return ((x, p * (g - (g * p).sum(axis=-1, keepdims=True))),)

    return _make(p, (x,), "softmax", backward)


def log_softmax(x: Tensor) -> Tensor:
    _require_last_axis(x, "log_softmax")
    out = _log_softmax_array(x.data)

    def backward(g):
        p = np.exp(out)
        return ((x, g - p * g.sum(axis=-1, keepdims=True)),)

    return _make(out, (x,), "log_softmax", backward)


def _check_labels(labels, n: int, k: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.ndim != 1 or y.shape[0] != n:
        raise DimensionError(f"expected {n} labels, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        raise DomainError("labels must be integers")
    if n and (y.min() < 0 or y.max() >= k):
        raise DomainError(f"labels must lie in [0, {k - 1}]")
    return y


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    _require_last_axis(logits, "cross_entropy")
    n, k = logits.shape
    y = _check_labels(labels, n, k)
    logp = _log_softmax_array(logits.data)
    rows = np.arange(n)
    loss = -logp[rows, y].mean()

    def backward(g):
        grad = np.exp(logp)
        grad[rows, y] -= 1.0
        return ((logits, grad * (g / n)),)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), "cross_entropy", backward)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def kl_divergence(p, q) -> Tensor:
    """Row-mean of ``sum_k p_k log(p_k / q_k)`` with ``0 log 0 = 0``.

    Both arguments hold probability rows. Gradients flow to whichever
    argument requires them.
    """
    p, q = _as_tensor(p), _as_tensor(q)
    if p.shape != q.shape:
        raise DimensionError(f"kl_divergence shapes differ: {p.shape} vs {q.shape}")
    _require_last_axis(p, "kl_divergence")
    for name, t in (("p", p), ("q", q)):
        rows = t.data.sum(axis=-1)
        if (t.data < 0).any() or np.abs(rows - 1.0).max() > 1e-6:
            raise DomainError(f"{name} rows must be probability vectors")
    pd, qd = p.data, q.data
    support = pd > 0
    if (support & (qd <= 0)).any():
        raise DomainError("q is zero where p is positive")
    n = pd.shape[0] if pd.ndim > 1 else 1
    ratio = np.where(support, pd / np.where(support, qd, 1.0), 1.0)
    terms = np.where(support, pd * np.log(ratio), 0.0)
    out = np.asarray(terms.sum() / n, dtype=pd.dtype)

    def backward(g):
        grads = []
        if p.requires_grad:
            grads.append((p, np.where(support, np.log(ratio) + 1.0, 0.0) * (g / n)))
        if q.requires_grad:
            grads.append((q, np.where(support, -pd / np.where(support, qd, 1.0), 0.0) * (g / n)))
        return grads

    return _make(out, (p, q), "kl_divergence", backward)


def softmax_kl(teacher_logits, student_logits: Tensor, temperature: float = 1.0) -> Tensor:
    """Row-mean ``KL(softmax(teacher/T) || softmax(student/T))``.

    Fused and computed in log space, so saturated student probabilities do not
    trip the zero-support check of :func:`kl_divergence`. Gradient flows to the
    student only.
    """
    t = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    s = student_logits.data
    if t.shape != s.shape:
        raise DimensionError(f"teacher/student logits differ: {t.shape} vs {s.shape}")
    n = s.shape[0]
    log_pt = _log_softmax_array(t.astype(s.dtype, copy=False) / temperature)
    log_ps = _log_softmax_array(s / temperature)
    pt = np.exp(log_pt)
    out = np.asarray((pt * (log_pt - log_ps)).sum() / n, dtype=s.dtype)

    def backward(g):
        return ((student_logits, (np.exp(log_ps) - pt) * (g / (n * temperature))),)

    return _make(out, (student_logits,), "softmax_kl", backward)
