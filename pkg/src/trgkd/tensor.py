"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every primitive records a node holding its parents and a closure mapping the
output gradient to input gradients. ``backward`` orders the recorded nodes
topologically, visits each exactly once and writes ``.grad`` on every leaf
that requires a gradient. The tape is consumed by the call.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, NumericError, UsageError


def _frozen(arr) -> np.ndarray:
    arr = np.asarray(arr)
    arr.flags.writeable = False
    return arr


class _Node:
    __slots__ = ("op", "parents", "backward_fn")

    def __init__(self, op, parents, backward_fn):
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn


class Tensor:
    """Immutable n-dimensional float64 array that can take part in a gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "tape_node", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        self.data = _frozen(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.tape_node: _Node | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        arr = np.asarray(arr)
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        t.data = _frozen(arr)
        t.requires_grad = False
        t.grad = None
        t.tape_node = None
        t.name = None
        return t

    # -- basic properties -------------------------------------------------

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
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def assign(self, values: np.ndarray) -> None:
        """Replace the stored values of a leaf (used by optimizers)."""
        if self.tape_node is not None:
            raise UsageError("assign() is only valid on leaf tensors")
        values = np.array(values, dtype=np.float64)
        if values.shape != self.data.shape:
            raise DimensionError(f"assign: shape {values.shape} does not match {self.shape}")
        self.data = _frozen(values)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operator sugar ---------------------------------------------------

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

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes or None)

    @property
    def T(self):
        return swap_last(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor._wrap(np.array(x, dtype=np.float64))


def _record(out: np.ndarray, op: str, parents: Sequence[Tensor], backward_fn) -> Tensor:
    t = Tensor._wrap(out)
    if any(p.requires_grad for p in parents):
        t.requires_grad = True
        t.tape_node = _Node(op, tuple(parents), backward_fn)
    return t


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise ----------------------------------------------------------


def _broadcast_check(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a, b)
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, "add", (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("sub", a, b)
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, "sub", (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("mul", a, b)
    ad, bd = a.data, b.data
    return _record(ad * bd, "mul", (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def back(g):
        gb = -g * ad / (bd * bd)
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(gb, bd.shape)

    return _record(out, "div", (a, b), back)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record(-a.data, "neg", (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    if isinstance(exponent, Tensor):
        raise UsageError("power() takes a constant exponent")
    p = float(exponent)
    ad = a.data
    if p == 2.0:
        return _record(ad * ad, "square", (a,), lambda g: (2.0 * g * ad,))
    return _record(ad ** p, "pow", (a,), lambda g: (g * p * ad ** (p - 1.0),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record(out, "exp", (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _record(np.log(ad), "log", (a,), lambda g: (g / ad,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _record(out, "sqrt", (a,), lambda g: (g * 0.5 / out,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    on = a.data > 0
    return _record(np.where(on, a.data, 0.0), "relu", (a,), lambda g: (g * on,))


def clamp_min(a, floor: float) -> Tensor:
    """max(a, floor) elementwise; the gradient passes where a >= floor."""
    a = as_tensor(a)
    keep = a.data >= floor
    return _record(np.where(keep, a.data, floor), "clamp_min", (a,), lambda g: (g * keep,))


# -- shape manipulation ---------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {src} into {tuple(shape)}") from None
    return _record(out, "reshape", (a,), lambda g: (g.reshape(src),))


def permute(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record(np.transpose(a.data, axes), "permute", (a,), lambda g: (np.transpose(g, inv),))


def swap_last(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim < 2:
        raise DimensionError(f"swap_last needs >= 2 dims, got shape {a.shape}")
    return _record(np.swapaxes(a.data, -1, -2), "swap_last", (a,),
                   lambda g: (np.swapaxes(g, -1, -2),))


def take_rows(a, index) -> Tensor:
    """Gather entries along axis 0 by integer index."""
    a = as_tensor(a)
    idx = np.asarray(index, dtype=np.int64)
    src = a.shape

    def back(g):
        full = np.zeros(src)
        np.add.at(full, idx, g)
        return (full,)

    return _record(a.data[idx], "take_rows", (a,), back)


# -- reductions -----------------------------------------------------------


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    src = a.shape

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, src).copy(),)

    return _record(a.data.sum(axis=axes, keepdims=keepdims), "sum", (a,), back)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    return tsum(a, axis=axes, keepdims=keepdims) / float(count)


# -- linear algebra -------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product of the last two axes, batched over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)

    def back(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _record(out, "matmul", (a, b), back)


def softmax_rows(x, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` with max subtraction."""
    x = as_tensor(x)
    if np.isnan(x.data).any():
        raise NumericError("softmax_rows: NaN in input")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record(out, "softmax", (x,), back)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if np.isnan(x.data).any():
        raise NumericError("log_softmax: NaN in input")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def back(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _record(out, "log_softmax", (x,), back)


def pairwise_sq_distances(x) -> Tensor:
    """Squared Euclidean distances between all rows of an S x D tensor.

    The feature axis is accumulated left to right so the result is
    reproducible against a scalar double loop.
    """
    x = as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"pairwise_sq_distances expects S x D, got {x.shape}")
    xd = x.data
    s, d = xd.shape
    out = np.zeros((s, s))
    diff = np.empty((s, s))
    cols = np.ascontiguousarray(xd.T)
    for k in range(d):
        col = cols[k]
        np.subtract(col[:, None], col[None, :], out=diff)
        np.multiply(diff, diff, out=diff)
        out += diff

    def back(g):
        gs = g + g.T
        return (2.0 * (gs.sum(axis=1)[:, None] * xd - gs @ xd),)

    return _record(out, "pairwise_sq_distances", (x,), back)


def conv2d(x, w, padding: int = 0) -> Tensor:
    """Stride-1 cross-correlation of B x C x H x W input with O x C x kh x kw filters."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} and filters {w.shape} are incompatible")
    b, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho, wo = xp.shape[2] - kh + 1, xp.shape[3] - kw + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input")
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * kh * kw)
    wmat = w.data.reshape(o, c * kh * kw)
    out = (cols @ wmat.T).reshape(b, ho, wo, o).transpose(0, 3, 1, 2)

    def back(g):
        gm = g.transpose(0, 2, 3, 1).reshape(b * ho * wo, o)
        gw = (gm.T @ cols).reshape(w.shape)
        gcols = (gm @ wmat).reshape(b, ho, wo, c, kh, kw)
        gxp = np.zeros(xp.shape)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + ho, j:j + wo] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding:padding + h, padding:padding + wd]
        return gx, gw

    return _record(np.ascontiguousarray(out), "conv2d", (x, w), back)


# -- composite losses -----------------------------------------------------


def kl_rows(p, q, eps: float = 1e-12) -> Tensor:
    """Row-averaged KL(p || q); entries with p == 0 contribute nothing."""
    p, q = as_tensor(p), as_tensor(q)
    if p.shape != q.shape or p.ndim != 2:
        raise DimensionError(f"kl_rows: expected equal 2-D shapes, got {p.shape} and {q.shape}")
    for name, t in (("p", p), ("q", q)):
        if np.isnan(t.data).any():
            raise NumericError(f"kl_rows: NaN in {name}")
        if (t.data < 0).any():
            raise UsageError(f"kl_rows: {name} has negative entries")
        if np.abs(t.data.sum(axis=1) - 1.0).max() > 1e-9:
            raise UsageError(f"kl_rows: rows of {name} do not sum to 1")
    terms = p * (log(clamp_min(p, eps)) - log(clamp_min(q, eps)))
    return tsum(terms) / float(p.shape[0])


def mse(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mse: shapes {a.shape} and {b.shape} differ")
    d = a - b
    return mean(d * d)


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"cross_entropy: {n} logits rows but labels shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise UsageError(f"cross_entropy: labels must lie in [0, {k})")
    onehot = np.zeros((n, k))
    onehot[np.arange(n), labels] = 1.0
    return -tsum(log_softmax(logits) * onehot) / float(n)


# -- the tape -------------------------------------------------------------


class GradientTape:
    """Topologically ordered record of the primitives that produced ``loss``."""

    def __init__(self, loss: Tensor):
        order: list[Tensor] = []
        leaves: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(loss, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            if t.tape_node is None:
                if t.requires_grad:
                    leaves.append(t)
                continue
            stack.append((t, True))
            for p in t.tape_node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.nodes = order
        self.leaves = leaves
        self.loss = loss

    def backward(self) -> None:
        grads: dict[int, np.ndarray] = {id(self.loss): np.ones(self.loss.shape)}
        for t in reversed(self.nodes):
            g = grads.pop(id(t), None)
            node = t.tape_node
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if not parent.requires_grad or pg is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for leaf in self.leaves:
            g = grads.get(id(leaf))
            leaf.grad = np.zeros(leaf.shape) if g is None else np.array(g, dtype=np.float64).reshape(leaf.shape)
        for t in self.nodes:
            t.tape_node = None


def backward(loss: Tensor) -> GradientTape:
    """Populate ``.grad`` on every requires-grad leaf reachable from ``loss``."""
    if not isinstance(loss, Tensor) or loss.size != 1 or loss.ndim > 1:
        shape = getattr(loss, "shape", None)
        raise UsageError(f"backward() needs a scalar loss, got shape {shape}")
    if not loss.requires_grad:
        raise UsageError("loss is not connected to any tensor that requires a gradient")
    tape = GradientTape(loss)
    tape.backward()
    return tape


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5) -> float:
    """Max relative error between autodiff and central differences over all coordinates.

    ``f`` is re-evaluated with each coordinate of each parameter nudged by
    +/- h; it must be deterministic.
    """
    if h <= 0:
        raise UsageError("grad_check step must be positive")
    for p in params:
        p.zero_grad()
    backward(f())
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for p, g_ad in zip(params, analytic):
        base = p.data.copy()
        flat = base.reshape(-1)
        for i in range(flat.size):
            bumped = flat.copy()
            bumped[i] = flat[i] + h
            p.assign(bumped.reshape(base.shape))
            f_plus = f().item()
            bumped[i] = flat[i] - h
            p.assign(bumped.reshape(base.shape))
            f_minus = f().item()
            g_fd = (f_plus - f_minus) / (2.0 * h)
            a = g_ad.reshape(-1)[i]
            err = abs(a - g_fd) / max(1e-8, abs(g_fd) + abs(a))
            worst = max(worst, err)
        p.assign(base)
    return worst
