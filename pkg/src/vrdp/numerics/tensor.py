"""Dense float64 tensors with a per-forward reverse-mode tape.

Every op builds a node that remembers its parents and a closure mapping the
output gradient to parent gradients. ``backward`` walks the nodes reachable
from a scalar loss in reverse topological order. The graph lives only as long
as the tensors that reference it, so each forward pass starts from scratch.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "ShapeError",
    "NonFiniteError",
    "no_grad",
    "grad_enabled",
    "tensor",
    "zeros",
    "ones",
    "backward",
]

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Operand shapes are not conformable."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def _as_array(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


class Tensor:
    """A float64 array plus an optional gradient buffer.

    ``requires_grad`` marks leaves whose ``grad`` is filled by ``backward``.
    Interior nodes carry ``_parents`` and ``_backward`` while grad mode is on.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, _op: str = ""):
        arr = np.array(data, dtype=np.float64) if not isinstance(data, np.ndarray) else data
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self._op = _op

    # -- basics ---------------------------------------------------------
    @property
    def shape(self) -> tuple:
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

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op or 'leaf'})"

    def __len__(self) -> int:
        return len(self.data)

    @property
    def tracked(self) -> bool:
        return self.requires_grad or self._backward is not None

    # -- arithmetic -----------------------------------------------------
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

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

    def max(self, axis: int):
        return max_(self, axis)


class Parameter(Tensor):
    """Trainable leaf. ``name`` is assigned by the owning module tree."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = ""):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape))


def ones(shape) -> Tensor:
    return Tensor(np.ones(shape))


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(op: str, out: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    if not np.isfinite(out).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    if _GRAD_ENABLED and any(p.tracked for p in parents):
        return Tensor(out, _parents=tuple(parents), _backward=backward, _op=op)
    return Tensor(out, _op=op)


# -- elementwise binary --------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("add", a.data, b.data)
    sa, sb = a.shape, b.shape
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("sub", a.data, b.data)
    sa, sb = a.shape, b.shape
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("mul", a.data, b.data)
    ad, bd = a.data, b.data
    return _make("mul", ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("div", a.data, b.data)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _make("div", out, (a, b), bw)


def power(a, p: float) -> Tensor:
    a = _wrap(a)
    ad = a.data
    return _make("pow", ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),))


def square(a) -> Tensor:
    a = _wrap(a)
    ad = a.data
    return _make("square", ad * ad, (a,), lambda g: (2.0 * g * ad,))


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make("matmul", ad @ bd, (a, b), bw)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` over the last axis; weight is (out, in)."""
    x, weight = _wrap(x), _wrap(weight)
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input shape {x.shape} vs weight shape {weight.shape}")
    xd, wd = x.data, weight.data
    x2 = xd.reshape(-1, xd.shape[-1])
    out = x2 @ wd.T
    if bias is not None:
        bias = _wrap(bias)
        out = out + bias.data
    out = out.reshape(xd.shape[:-1] + (wd.shape[0],))

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        grads = [(g2 @ wd).reshape(xd.shape), g2.T @ x2]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make("linear", out, parents, bw)


# -- elementwise unary ---------------------------------------------------
def exp(a) -> Tensor:
    a = _wrap(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _wrap(a)
    ad = a.data
    if (ad <= 0).any():
        raise NonFiniteError("log of non-positive value")
    return _make("log", np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a) -> Tensor:
    a = _wrap(a)
    out = np.sqrt(a.data)
    return _make("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softplus(a) -> Tensor:
    a = _wrap(a)
    ad = a.data
    return _make("softplus", np.logaddexp(0.0, ad), (a,), lambda g: (g * _sigmoid(ad),))


def tanh(a) -> Tensor:
    a = _wrap(a)
    out = np.tanh(a.data)
    return _make("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a) -> Tensor:
    a = _wrap(a)
    ad = a.data
    return _make("relu", np.maximum(ad, 0.0), (a,), lambda g: (g * (ad > 0),))


def silu(a) -> Tensor:
    a = _wrap(a)
    ad = a.data
    s = _sigmoid(ad)
    return _make("silu", ad * s, (a,), lambda g: (g * (s * (1.0 + ad * (1.0 - s))),))


def mish(a) -> Tensor:
    """x * tanh(softplus(x)), using tanh(log(1 + e^x)) = n(n + 2) / (n(n + 2) + 2), n = e^x."""
    a = _wrap(a)
    ad = a.data
    n = np.exp(np.minimum(ad, 20.0))
    nn2 = n * (n + 2.0)
    tsp = nn2 / (nn2 + 2.0)
    out = ad * tsp

    def bw(g):
        sig = n / (1.0 + n)
        return (g * (tsp + ad * (1.0 - tsp * tsp) * sig),)

    return _make("mish", out, (a,), bw)


# -- reductions and shape ops -------------------------------------------
def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make("sum", np.asarray(out, dtype=np.float64), (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = math.prod(a.shape[i] for i in axes)
    return mul(sum_(a, axis, keepdims), 1.0 / n)


def max_(a, axis: int) -> Tensor:
    """Max along one axis. Ties send the gradient to the first maximiser."""
    a = _wrap(a)
    ad = a.data
    idx = np.expand_dims(np.argmax(ad, axis=axis), axis)
    out = np.take_along_axis(ad, idx, axis=axis).squeeze(axis)

    def bw(g):
        grad = np.zeros_like(ad)
        np.put_along_axis(grad, idx, np.expand_dims(g, axis), axis=axis)
        return (grad,)

    return _make("max", out, (a,), bw)


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} into {tuple(shape)}") from None
    return _make("reshape", out, (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = _wrap(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a, idx) -> Tensor:
    a = _wrap(a)
    shape = a.shape

    def bw(g):
        grad = np.zeros(shape)
        np.add.at(grad, idx, g)
        return (grad,)

    return _make("slice", np.array(a.data[idx]), (a,), bw)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]} on axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _make("concat", out, ts, lambda g: tuple(np.split(g, bounds, axis=axis)))


def broadcast_to(a, shape) -> Tensor:
    a = _wrap(a)
    old = a.shape
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast: cannot broadcast {old} to {tuple(shape)}") from None
    return _make("broadcast", out, (a,), lambda g: (_unbroadcast(g, old),))


# -- 1D convolution family ---------------------------------------------
def conv1d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation over the last axis.

    x is (B, C_in, L); weight is (C_out, C_in, k); output is (B, C_out, L_out).
    """
    x, weight = _wrap(x), _wrap(weight)
    if x.ndim != 3 or weight.ndim != 3 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv1d: input shape {x.shape} vs weight shape {weight.shape}")
    B, cin, L = x.shape
    cout, _, k = weight.shape
    xd = x.data
    if padding:
        xd = np.pad(xd, ((0, 0), (0, 0), (padding, padding)))
    Lp = xd.shape[2]
    if Lp < k:
        raise ShapeError(f"conv1d: padded length {Lp} shorter than kernel {k}")
    lout = (Lp - k) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xd, k, axis=2)[:, :, ::stride, :]
    cols = np.ascontiguousarray(win.transpose(0, 2, 1, 3)).reshape(B * lout, cin * k)
    wmat = weight.data.reshape(cout, cin * k)
    out = cols @ wmat.T
    if bias is not None:
        bias = _wrap(bias)
        out = out + bias.data
    out = out.reshape(B, lout, cout).transpose(0, 2, 1)

    def bw(g):
        g2 = g.transpose(0, 2, 1).reshape(B * lout, cout)
        gw = (g2.T @ cols).reshape(cout, cin, k)
        dcols = (g2 @ wmat).reshape(B, lout, cin, k)
        gxp = np.zeros((B, cin, Lp))
        span = stride * (lout - 1) + 1
        for j in range(k):
            gxp[:, :, j:j + span:stride] += dcols[:, :, :, j].transpose(0, 2, 1)
        gx = gxp[:, :, padding:Lp - padding] if padding else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2)))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make("conv1d", np.ascontiguousarray(out), parents, bw)


def upsample_nearest(x, factor: int = 2) -> Tensor:
    """Repeat each temporal position ``factor`` times along the last axis."""
    x = _wrap(x)
    shape = x.shape

    def bw(g):
        return (g.reshape(shape + (factor,)).sum(axis=-1),)

    return _make("upsample", np.repeat(x.data, factor, axis=-1), (x,), bw)


def group_norm(x, n_groups: int, weight=None, bias=None, eps: float = 1e-5) -> Tensor:
    """Group normalisation of a (B, C, L) map with optional per-channel affine."""
    x = _wrap(x)
    if x.ndim != 3 or x.shape[1] % n_groups:
        raise ShapeError(f"group_norm: shape {x.shape} not divisible into {n_groups} groups")
    B, C, L = x.shape
    xg = x.data.reshape(B, n_groups, -1)
    n = xg.shape[2]
    mu = xg.mean(axis=2, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(B, C, L)
    out = xhat
    wd = None
    if weight is not None:
        weight, bias = _wrap(weight), _wrap(bias)
        wd = weight.data
        out = xhat * wd[None, :, None] + bias.data[None, :, None]

    def bw(g):
        dxhat = g * wd[None, :, None] if wd is not None else g
        dxg = dxhat.reshape(B, n_groups, n)
        xh = xhat.reshape(B, n_groups, n)
        gx = inv / n * (n * dxg - dxg.sum(axis=2, keepdims=True)
                        - xh * (dxg * xh).sum(axis=2, keepdims=True))
        grads = [gx.reshape(B, C, L)]
        if wd is not None:
            grads.append((g * xhat).sum(axis=(0, 2)))
            grads.append(g.sum(axis=(0, 2)))
        return tuple(grads)

    parents = (x,) if weight is None else (x, weight, bias)
    return _make("group_norm", out, parents, bw)


# -- reverse pass ----------------------------------------------------------
def _topo(root: Tensor) -> list[Tensor]:
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
            if id(p) not in seen and p.tracked:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every reachable leaf."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.tracked:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


Tensor.backward = backward  # type: ignore[attr-defined]


def stack(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in ts]
    return concat(expanded, axis=axis)
