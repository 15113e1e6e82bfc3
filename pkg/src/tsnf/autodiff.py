"""Reverse-mode automatic differentiation over dense float64 arrays.

Every op produces a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to parent gradients. Calling
:func:`backward` on a scalar root orders the reachable graph topologically
(the tape) and replays it in reverse, visiting each node once.

Gradients on leaves *accumulate* across backward calls; call
:func:`zero_grads` before each optimizer step.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "DomainError",
    "NonFiniteError",
    "ShapeError",
    "TapeError",
    "tensor",
    "constant",
    "no_grad",
    "backward",
    "zero_grads",
    "finite_diff_gradcheck",
    "record",
]


class DomainError(ValueError):
    """An operand lies outside the domain of an op (log of <= 0, division by zero, ...)."""

    def __init__(self, op: str, operand: int, message: str):
        super().__init__(f"{op}: operand {operand}: {message}")
        self.op = op
        self.operand = operand


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf. ``index`` locates the first bad entry when known."""

    def __init__(self, message: str, index: tuple[int, ...] | None = None):
        super().__init__(message)
        self.index = index


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording them."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self):
        return len(self.data)

    def is_leaf(self) -> bool:
        return not self._parents

    def detach(self) -> Tensor:
        return Tensor(self.data)

    # operators
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad)


def constant(data) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op: str, data: np.ndarray, parents: tuple[Tensor, ...], grad_fn) -> Tensor:
    # a finite sum implies finite entries; only fall back to the full scan otherwise
    if not math.isfinite(np.sum(data)) and not np.all(np.isfinite(data)):
        bad = tuple(int(i) for i in np.argwhere(~np.isfinite(np.atleast_1d(data)))[0])
        raise NonFiniteError(f"{op}: non-finite result at index {bad}", bad)
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = grad_fn
    return out


# --- broadcasting -------------------------------------------------------------


def _broadcast_shape(op: str, a: tuple, b: tuple) -> tuple:
    # Only scalars and trailing-suffix operands broadcast: (N, D) + (D,) is fine,
    # (N, D) + (N, 1) is not.
    if a == b:
        return a
    big, small = (a, b) if len(a) >= len(b) else (b, a)
    if small in ((), (1,)):
        return big
    if big[len(big) - len(small) :] == small:
        return big
    raise ShapeError(f"{op}: shape {small} is not a trailing suffix of {big}")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# --- elementwise binary -------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make("add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("sub", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make("sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("mul", a.shape, b.shape)
    ad, bd = a.data, b.data
    return _make(
        "mul",
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("div", a.shape, b.shape)
    if np.any(b.data == 0.0):
        raise DomainError("div", 1, "division by zero")
    ad, bd = a.data, b.data
    out = ad / bd

    def grad_fn(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _make("div", out, (a, b), grad_fn)


def where(cond, a, b) -> Tensor:
    """Select ``a`` where ``cond`` holds, else ``b``. ``cond`` is a constant boolean array."""
    a, b = _as_tensor(a), _as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    shape = _broadcast_shape("where", a.shape, b.shape)
    if np.broadcast_shapes(cond.shape, shape) != shape:
        raise ShapeError(f"where: condition shape {cond.shape} does not fit {shape}")
    sa, sb = a.shape, b.shape
    return _make(
        "where",
        np.where(cond, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(np.where(cond, g, 0.0), sa), _unbroadcast(np.where(cond, 0.0, g), sb)),
    )


# --- elementwise unary --------------------------------------------------------


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0.0):
        raise DomainError("log", 0, "argument must be positive")
    ad = a.data
    return _make("log", np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data < 0.0):
        raise DomainError("sqrt", 0, "argument must be nonnegative")
    out = np.sqrt(a.data)

    def grad_fn(g):
        if np.any(out == 0.0):
            raise DomainError("sqrt", 0, "gradient undefined at 0")
        return (g * 0.5 / out,)

    return _make("sqrt", out, (a,), grad_fn)


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _make("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -x))


def softplus(a) -> Tensor:
    """log(1 + e^x), evaluated as max(x, 0) + log1p(e^-|x|)."""
    a = _as_tensor(a)
    ad = a.data
    out = np.maximum(ad, 0.0) + np.log1p(np.exp(-np.abs(ad)))
    return _make("softplus", out, (a,), lambda g: (g * sigmoid_np(ad),))


def abs_(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    return _make("abs", np.abs(ad), (a,), lambda g: (g * np.sign(ad),))


def square(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    return _make("square", ad * ad, (a,), lambda g: (2.0 * g * ad,))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; the gradient is zero where clamping is active."""
    a = _as_tensor(a)
    ad = a.data
    inside = (ad >= lo) & (ad <= hi)
    return _make("clip", np.clip(ad, lo, hi), (a,), lambda g: (np.where(inside, g, 0.0),))


# --- reductions ---------------------------------------------------------------


def _expand(g: np.ndarray, shape: tuple, axis) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape
    return _make("sum", np.sum(a.data, axis=axis), (a,), lambda g: (_expand(g, shape, axis),))


def mean(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape
    n = a.data.size if axis is None else shape[axis]
    return _make("mean", np.mean(a.data, axis=axis), (a,), lambda g: (_expand(g, shape, axis) / n,))


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make("softmax", out, (a,), grad_fn)


def logsumexp(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    s = np.exp(a.data - m).sum(axis=axis, keepdims=True)
    out = np.squeeze(m + np.log(s), axis=axis)
    weights = np.exp(a.data - m) / s
    return _make("logsumexp", out, (a,), lambda g: (np.expand_dims(g, axis) * weights,))


# --- linear algebra and shape -------------------------------------------------


def matmul(a, b) -> Tensor:
    """(..., K) @ (K, M) -> (..., M). The right operand must be 2-D."""
    a, b = _as_tensor(a), _as_tensor(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def grad_fn(g):
        ga = g @ bd.T
        if ad.ndim == 1:
            gb = np.outer(ad, g)
        else:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _make("matmul", ad @ bd, (a, b), grad_fn)


def linear(x, w, b, mask: np.ndarray | None = None) -> Tensor:
    """x @ (w * mask) + b as one tape node; (..., K) x (K, M) + (M,)."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if w.ndim != 2 or x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"linear: incompatible shapes {x.shape}, {w.shape}, {b.shape}")
    if mask is not None and mask.shape != w.shape:
        raise ShapeError(f"linear: mask shape {mask.shape} does not match weight {w.shape}")
    wd = w.data if mask is None else w.data * mask
    xd = x.data

    def grad_fn(g):
        gx = g @ wd.T if x.requires_grad else None
        gw = gb = None
        if w.requires_grad:
            gw = xd.reshape(-1, xd.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            if mask is not None:
                gw = gw * mask
        if b.requires_grad:
            gb = g.reshape(-1, g.shape[-1]).sum(axis=0)
        return gx, gw, gb

    return _make("linear", xd @ wd + b.data, (x, w, b), grad_fn)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    return _make("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum(sizes)[:-1]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    return _make("concat", out, tuple(ts), lambda g: tuple(np.split(g, bounds, axis=axis)))


def slice_(a, index) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape

    parts = index if isinstance(index, tuple) else (index,)
    basic = all(p is Ellipsis or p is None or isinstance(p, (int, np.integer, slice)) for p in parts)

    def grad_fn(g):
        full = np.zeros(shape)
        if basic:  # basic indexing never repeats an element
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make("slice", np.array(a.data[index]), (a,), grad_fn)


def index_select(a, indices, axis: int = 0) -> Tensor:
    """Gather whole slices along ``axis`` (indices may repeat)."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    shape = a.shape

    def grad_fn(g):
        full = np.zeros(shape)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (full,)

    return _make("gather", np.take(a.data, idx, axis=axis), (a,), grad_fn)


def take_along_axis(a, indices, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    shape = a.shape

    ax = axis % a.ndim

    def grad_fn(g):
        full = np.zeros(shape)
        grids = list(np.ix_(*[np.arange(n) for n in idx.shape]))
        grids[ax] = idx
        np.add.at(full, tuple(grids), g)
        return (full,)

    return _make("gather", np.take_along_axis(a.data, idx, axis=axis), (a,), grad_fn)


_OPS = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "matmul": matmul,
    "linear": linear,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "tanh": tanh,
    "softplus": softplus,
    "softmax": softmax,
    "logsumexp": logsumexp,
    "sum": sum_,
    "mean": mean,
    "abs": abs_,
    "square": square,
    "clip": clip,
    "where": where,
    "concat": lambda *ts, axis=0: concat(ts, axis=axis),
    "slice": slice_,
    "reshape": reshape,
    "gather": index_select,
    "take_along_axis": take_along_axis,
}


def record(op_kind: str, *inputs, **kwargs) -> Tensor:
    """Apply the op named ``op_kind``; it is taped when any input requires grad."""
    try:
        fn = _OPS[op_kind]
    except KeyError:
        raise ValueError(f"unknown op kind {op_kind!r}") from None
    return fn(*inputs, **kwargs)


# --- tape replay --------------------------------------------------------------


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Populate ``.grad`` of every requires_grad leaf reachable from ``root``.

    Leaf gradients are added to any existing ``.grad``.
    """
    if root.shape != ():
        raise TapeError(f"backward root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        raise TapeError("backward root is not on the tape (no input requires grad)")
    order = _topological(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones(())}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.asarray(pg, dtype=np.float64)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def finite_diff_gradcheck(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-6,
    entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` takes no arguments and reads ``params`` by closure; it must be
    deterministic. Error per entry is |analytic - numeric| / max(1, |numeric|).
    With ``entries`` set, only that many randomly chosen scalar coordinates
    (across all params) are differenced.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    zero_grads(params)
    out = f()
    if not np.isfinite(out.data):
        raise NonFiniteError("gradcheck: f returned a non-finite value")
    if out.requires_grad:
        backward(out)
    coords = [(k, i) for k, p in enumerate(params) for i in range(p.data.size)]
    if entries is not None and entries < len(coords):
        rng = np.random.default_rng(0) if rng is None else rng
        coords = [coords[j] for j in np.sort(rng.choice(len(coords), entries, replace=False))]
    worst = 0.0
    for k, i in coords:
        p = params[k]
        analytic = np.zeros(p.shape) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        orig = flat[i]
        flat[i] = orig + eps
        with no_grad():
            up = f().item()
        flat[i] = orig - eps
        with no_grad():
            down = f().item()
        flat[i] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NonFiniteError("gradcheck: f returned a non-finite value")
        numeric = (up - down) / (2.0 * eps)
        err = abs(analytic.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
        worst = max(worst, err)
    zero_grads(params)
    return worst
