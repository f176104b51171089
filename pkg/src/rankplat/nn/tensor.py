"""Dense tensors with reverse-mode gradient accumulation.

Every primitive computes its forward value eagerly with numpy and, when
gradients are enabled, records a closure that maps the output gradient to
gradients of its inputs. ``backward`` walks the recorded graph in reverse
topological order.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

_state = threading.local()

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)
MASK_FILL = -1e9


class ShapeError(ValueError):
    """Raised when a primitive receives non-conforming shapes."""

    def __init__(self, primitive: str, detail: str):
        super().__init__(f"{primitive}: {detail}")
        self.primitive = primitive


class GraphError(RuntimeError):
    pass


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """An n-d array node. ``requires_grad`` leaves are trainable parameters."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "fc":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

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
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(name: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(name, f"cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a.data, b.data)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a.data, b.data)
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a.data, b.data)
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a.data, b.data)
    ad, bd = a.data, b.data
    out = ad / bd
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape),
                            _unbroadcast(-g * out / bd, bd.shape)), "div")


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _node(out, (x,), lambda g: (g * out,), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _node(np.log(xd), (x,), lambda g: (g / xd,), "log")


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp; gradient flows only where the input was inside [lo, hi]."""
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _node(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clip")


# ---------------------------------------------------------------------------
# activations


def relu(x) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    return _node(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,), "relu")


def gelu(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / _SQRT2))

    def back(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return _node(xd * cdf, (x,), back, "gelu")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = _sigmoid(x.data)
    return _node(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (x,), back, "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def back(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _node(out, (x,), back, "log_softmax")


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError("layer_norm", f"gain/bias {gamma.shape}/{beta.shape} vs features {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gamma.data

    def back(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, dgamma, dbeta

    return _node(xhat * gd + beta.data, (x, gamma, beta), back, "layer_norm")


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", f"{a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def back(g):
        if bd.ndim == 2:
            ga = g @ bd.T
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _node(out, (a, b), back, "matmul")


def linear(x, weight, bias=None) -> Tensor:
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), back, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    n = x.size if axis is None else np.prod([shape[a] for a in np.atleast_1d(axis)])

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)

    return _node(np.asarray(x.data.mean(axis=axis, keepdims=keepdims)), (x,), back, "mean")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", f"{old} -> {shape}") from None
    return _node(out, (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    inv = None if axes is None else np.argsort(axes)
    return _node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def concat(tensors: Iterable, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ref = ts[0].shape
    ax = axis % len(ref)
    for t in ts[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError("concat", f"{ref} vs {t.shape} along axis {axis}")
    sizes = [t.shape[ax] for t in ts]
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=ax))

    return _node(np.concatenate([t.data for t in ts], axis=ax), ts, back, "concat")


def index(x, idx) -> Tensor:
    """Basic or advanced indexing; gradients scatter-add into the source."""
    x = as_tensor(x)
    shape = x.shape

    def back(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, idx, g)
        return (out,)

    return _node(x.data[idx], (x,), back, "index")


def embedding(table, ids) -> Tensor:
    """Row lookup ``table[ids]`` for an integer array of any shape."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise ShapeError("embedding", f"ids must be integers, got {ids.dtype}")
    if table.ndim != 2:
        raise ShapeError("embedding", f"table must be 2-d, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError("embedding", f"id out of range for {table.shape[0]} rows")
    rows, dim = table.shape

    def back(g):
        flat = ids.reshape(-1)
        gg = g.reshape(-1, dim)
        out = np.zeros((rows, dim), dtype=g.dtype)
        for j in range(dim):
            out[:, j] = np.bincount(flat, weights=gg[:, j], minlength=rows)
        return (out,)

    return _node(table.data[ids], (table,), back, "embedding")


def masked_fill(x, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is True by a constant (no gradient there)."""
    x = as_tensor(x)
    mask = np.broadcast_to(mask, x.shape)
    return _node(np.where(mask, value, x.data), (x,), lambda g: (np.where(mask, 0.0, g),), "masked_fill")


# ---------------------------------------------------------------------------
# attention


def attention(q, k, v, num_heads: int, mask: np.ndarray | None = None) -> Tensor:
    """Multi-head scaled dot-product attention over [batch, time, d] inputs.

    ``mask`` is boolean, True where a query may attend to a key; it broadcasts
    against [batch, heads, time_q, time_k].
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.ndim != 3 or k.shape != v.shape or q.shape[0] != k.shape[0] or q.shape[2] != k.shape[2]:
        raise ShapeError("attention", f"q {q.shape}, k {k.shape}, v {v.shape}")
    B, Tq, d = q.shape
    Tk = k.shape[1]
    if d % num_heads:
        raise ShapeError("attention", f"d={d} not divisible by {num_heads} heads")
    dh = d // num_heads
    scale = 1.0 / np.sqrt(dh)

    def split(a, T):
        return a.reshape(B, T, num_heads, dh).transpose(0, 2, 1, 3)

    qh, kh, vh = split(q.data, Tq), split(k.data, Tk), split(v.data, Tk)
    scores = (qh @ kh.transpose(0, 1, 3, 2)) * scale
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.ndim == 2:
            mask = mask[None, None]
        elif mask.ndim == 3:
            mask = mask[:, None]
        try:
            scores = np.where(mask, scores, MASK_FILL)
        except ValueError:
            raise ShapeError("attention", f"mask {mask.shape} vs scores {scores.shape}") from None
    scores -= scores.max(axis=-1, keepdims=True)
    p = np.exp(scores)
    p /= p.sum(axis=-1, keepdims=True)
    oh = p @ vh
    out = oh.transpose(0, 2, 1, 3).reshape(B, Tq, d)

    def back(g):
        gh = split(g, Tq)
        dv = p.transpose(0, 1, 3, 2) @ gh
        dp = gh @ vh.transpose(0, 1, 3, 2)
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True)) * scale
        dq = ds @ kh
        dk = ds.transpose(0, 1, 3, 2) @ qh

        def merge(a, T):
            return a.transpose(0, 2, 1, 3).reshape(B, T, d)

        return merge(dq, Tq), merge(dk, Tk), merge(dv, Tk)

    return _node(out, (q, k, v), back, "attention")


def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


# ---------------------------------------------------------------------------
# losses


def binary_cross_entropy(probs, labels, eps: float = 1e-7) -> Tensor:
    """Elementwise -(y log f + (1-y) log(1-f)) with f clamped to [eps, 1-eps]."""
    f = clip(probs, eps, 1.0 - eps)
    y = np.asarray(labels, dtype=np.float64)
    return -(mul(log(f), y) + mul(log(1.0 - f), 1.0 - y))


# ---------------------------------------------------------------------------
# backward


def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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


def backward(loss: Tensor, grad: np.ndarray | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if not isinstance(loss, Tensor):
        raise GraphError("backward expects a Tensor")
    if loss._backward is None:
        if loss.requires_grad:
            raise GraphError("backward called on a leaf; evaluate a forward graph first")
        raise GraphError("backward called before forward: loss has no recorded graph")
    if grad is None:
        if loss.size != 1:
            raise GraphError(f"backward needs an explicit gradient for non-scalar output {loss.shape}")
        grad = np.ones_like(loss.data)
    grads: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=loss.data.dtype)}
    for node in reversed(_topo(loss)):
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
                grads[key] = pg
