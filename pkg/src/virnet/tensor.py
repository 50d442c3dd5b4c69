"""Dense float64 tensors with reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array. Every differentiable operation
records its inputs and a closure that maps the output adjoint to input
adjoints. :func:`backward` walks that record in reverse topological
order and then releases it, so each graph is differentiated once.

Images are laid out as ``[n, c, h, w]``; most operations also accept
``[c, h, w]`` and treat it as a batch of one.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import specfun
from .errors import ContractError, DomainError, ShapeError

__all__ = [
    "Tensor", "tensor", "no_grad", "backward",
    "add", "sub", "mul", "div", "neg", "log", "exp", "square", "sqrt",
    "softplus", "leaky_relu", "conv2d", "avgpool2", "upsample", "concat",
    "slice_channels", "sum", "mean", "lgamma", "digamma", "pad_reflect",
    "kernel_conv", "check_finite",
]

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")
    __array_priority__ = 100

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
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

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
        return neg(self)

    def sum(self):
        return sum(self)

    def mean(self):
        return mean(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
        out.op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_binary(a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape or a.data.size == 1 or b.data.size == 1:
        return
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot combine shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_binary(a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_binary(a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_binary(a, b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_binary(a, b)
    if np.any(b.data == 0):
        raise DomainError("division by zero")
    out = a.data / b.data

    def bw(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _make(out, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = _lift(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def log(a) -> Tensor:
    a = _lift(a)
    if np.any(a.data <= 0):
        idx = tuple(int(i) for i in np.argwhere(a.data <= 0)[0])
        raise DomainError(f"log of non-positive value {a.data[idx]} at index {idx}")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def exp(a) -> Tensor:
    a = _lift(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def square(a) -> Tensor:
    a = _lift(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def sqrt(a) -> Tensor:
    a = _lift(a)
    if np.any(a.data < 0):
        raise DomainError("sqrt of negative value")
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (0.5 * g / out,), "sqrt")


def softplus(a) -> Tensor:
    a = _lift(a)
    x = a.data
    out = np.logaddexp(0.0, x)
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))
    return _make(out, (a,), lambda g: (g * sig,), "softplus")


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = _lift(a)
    pos = a.data > 0
    out = np.where(pos, a.data, slope * a.data)
    return _make(out, (a,), lambda g: (np.where(pos, g, slope * g),), "leaky_relu")


def lgamma(a) -> Tensor:
    a = _lift(a)
    out = specfun.lgamma(a.data)
    return _make(out, (a,), lambda g: (g * specfun.digamma(a.data),), "lgamma")


def digamma(a) -> Tensor:
    a = _lift(a)
    out = specfun.digamma(a.data)
    return _make(out, (a,), lambda g: (g * specfun.trigamma(a.data),), "digamma")


# ----------------------------------------------------------------- reductions


def sum(a) -> Tensor:  # noqa: A001
    a = _lift(a)
    return _make(np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),), "sum")


def mean(a) -> Tensor:
    a = _lift(a)
    n = a.data.size
    return _make(np.array(a.data.mean()), (a,),
                 lambda g: (np.broadcast_to(g / n, a.shape).copy(),), "mean")


# ------------------------------------------------------------------- spatial


def _as_batch(x: Tensor) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise ShapeError(f"expected [c,h,w] or [n,c,h,w], got shape {x.shape}")


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding (no kernel flip)."""
    x, weight = _lift(x), _lift(weight)
    X, squeezed = _as_batch(x)
    W = weight.data
    if W.ndim != 4 or W.shape[2] != W.shape[3]:
        raise ShapeError(f"weight must be [c_out,c_in,k,k], got {W.shape}")
    c_out, c_in, k, _ = W.shape
    if k % 2 == 0:
        raise ShapeError(f"kernel size must be odd, got {k}")
    n, c, h, w = X.shape
    if c != c_in:
        raise ShapeError(f"input has {c} channels, weight expects {c_in}")
    if (h + 2 * padding - k) % stride or (w + 2 * padding - k) % stride or h + 2 * padding < k:
        raise ShapeError(f"non-integral conv output for size {(h, w)}, k={k}, stride={stride}, padding={padding}")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    Xp = np.pad(X, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else X
    # columns laid out [k, k, c, n, ho, wo] so every fill is a block copy
    cols = np.empty((k, k, c, n, ho, wo))
    Xt = Xp.transpose(1, 0, 2, 3)
    for i in range(k):
        for j in range(k):
            cols[i, j] = Xt[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    cols = cols.reshape(k * k * c, n * ho * wo)
    wmat = W.transpose(0, 2, 3, 1).reshape(c_out, k * k * c)
    out = wmat @ cols
    parents = [x, weight]
    if bias is not None:
        bias = _lift(bias)
        out += bias.data[:, None]
        parents.append(bias)
    out = np.ascontiguousarray(out.reshape(c_out, n, ho, wo).transpose(1, 0, 2, 3))

    def bw(g):
        g4 = g[None] if squeezed else g
        gmat = np.ascontiguousarray(g4.transpose(1, 0, 2, 3)).reshape(c_out, n * ho * wo)
        gw = (gmat @ cols.T).reshape(c_out, k, k, c).transpose(0, 3, 1, 2)
        dcols = (wmat.T @ gmat).reshape(k, k, c, n, ho, wo)
        gxp = np.zeros((c, n) + Xp.shape[2:])
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[i, j]
        if padding:
            gxp = gxp[:, :, padding:padding + h, padding:padding + w]
        gx = np.ascontiguousarray(gxp.transpose(1, 0, 2, 3))
        if squeezed:
            gx = gx[0]
        grads = [gx, np.ascontiguousarray(gw)]
        if bias is not None:
            grads.append(gmat.sum(axis=1))
        return grads

    return _make(out[0] if squeezed else out, tuple(parents), bw, "conv2d")


def avgpool2(x) -> Tensor:
    x = _lift(x)
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise ShapeError(f"avgpool2 needs even spatial dims, got {(h, w)}")
    lead = x.shape[:-2]
    out = x.data.reshape(*lead, h // 2, 2, w // 2, 2).mean(axis=(-3, -1))

    def bw(g):
        return (np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1) * 0.25,)

    return _make(out, (x,), bw, "avgpool2")


def upsample(x, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling by an integer factor."""
    x = _lift(x)
    out = np.repeat(np.repeat(x.data, factor, axis=-2), factor, axis=-1)
    h, w = x.shape[-2:]
    lead = x.shape[:-2]

    def bw(g):
        return (g.reshape(*lead, h, factor, w, factor).sum(axis=(-3, -1)),)

    return _make(out, (x,), bw, "upsample")


def concat(tensors: Iterable, axis: int = -3) -> Tensor:
    ts = [_lift(t) for t in tensors]
    ref = list(ts[0].shape)
    ax = axis % len(ref)
    for t in ts[1:]:
        s = list(t.shape)
        if len(s) != len(ref) or s[:ax] + s[ax + 1:] != ref[:ax] + ref[ax + 1:]:
            raise ShapeError(f"cannot concatenate shapes {ts[0].shape} and {t.shape} on axis {axis}")
    sizes = [t.shape[ax] for t in ts]
    out = np.concatenate([t.data for t in ts], axis=ax)
    bounds = np.cumsum(sizes)[:-1]
    return _make(out, tuple(ts), lambda g: tuple(np.split(g, bounds, axis=ax)), "concat")


def slice_channels(x, start: int, stop: int) -> Tensor:
    x = _lift(x)
    out = x.data[..., start:stop, :, :]

    def bw(g):
        full = np.zeros_like(x.data)
        full[..., start:stop, :, :] = g
        return (full,)

    return _make(out.copy(), (x,), bw, "slice")


def _reflect_index(h: int, w: int, pad: int) -> np.ndarray:
    idx = np.arange(h * w).reshape(h, w)
    return np.pad(idx, pad, mode="reflect")


def pad_reflect(x, pad: int) -> Tensor:
    """Mirror padding of the last two axes (edge sample not repeated)."""
    x = _lift(x)
    if pad == 0:
        return x
    h, w = x.shape[-2:]
    if pad >= h or pad >= w:
        raise ShapeError(f"reflect padding {pad} too large for spatial size {(h, w)}")
    idx = _reflect_index(h, w, pad)
    lead = x.shape[:-2]
    flat = x.data.reshape(*lead, h * w)
    out = flat[..., idx]

    def bw(g):
        gl = g.reshape(-1, idx.size)
        acc = np.zeros((gl.shape[0], h * w))
        np.add.at(acc, (slice(None), idx.ravel()), gl)
        return (acc.reshape(*lead, h, w),)

    return _make(out, (x,), bw, "pad_reflect")


def kernel_conv(x, kernels: np.ndarray, stride: int = 1) -> Tensor:
    """True convolution of each sample with its own kernel, valid region only.

    ``x`` is ``[n,c,H,W]`` (already padded) and ``kernels`` is ``[n,k,k]``;
    output position ``(i, j)`` is taken at input offset ``(i*stride, j*stride)``.
    Kernels are constants; only ``x`` receives an adjoint.
    """
    x = _lift(x)
    if x.ndim != 4:
        raise ShapeError(f"kernel_conv expects [n,c,H,W], got {x.shape}")
    kernels = np.asarray(kernels, dtype=np.float64)
    if kernels.ndim == 2:
        kernels = np.broadcast_to(kernels, (x.shape[0],) + kernels.shape)
    n, _, H, W = x.shape
    k = kernels.shape[-1]
    if kernels.shape[0] != n:
        raise ShapeError(f"{kernels.shape[0]} kernels for a batch of {n}")
    flipped = kernels[:, ::-1, ::-1]
    win = sliding_window_view(x.data, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    out = np.einsum("nchwij,nij->nchw", win, flipped)

    def bw(g):
        gx = np.zeros_like(x.data)
        for i in range(k):
            for j in range(k):
                gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += g * flipped[:, i, j][:, None, None, None]
        return (gx,)

    return _make(out, (x,), bw, "kernel_conv")


def check_finite(x: Tensor, name: str = "tensor") -> Tensor:
    if not np.all(np.isfinite(x.data)):
        bad = np.argwhere(~np.isfinite(x.data))[0]
        raise DomainError(f"{name} has a non-finite value at index {tuple(int(i) for i in bad)}")
    return x


# ------------------------------------------------------------------- backward


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every tracked leaf."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    if loss._backward is None and loss.op != "leaf":
        raise ContractError("this graph was already differentiated and released")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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

    adj: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = adj.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            adj[key] = adj[key] + pg if key in adj else pg

    for node in order:
        if node._backward is not None:
            node._parents = ()
            node._backward = None
