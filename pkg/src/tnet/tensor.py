"""Dense arrays with a small reverse-mode autodiff engine.

Only the operations the encoder, the posterior heads and the losses need are
provided. Broadcasting is deliberately limited to "same shape" or "Python
scalar" operands.

Every op node gets a sequence number when it is created; ``backward`` visits
the reachable nodes in strictly decreasing sequence order, which is the exact
reverse of the order in which they were recorded.
"""

from __future__ import annotations

import itertools
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "Tensor",
    "ShapeError",
    "conv2d",
    "maxpool2",
    "upsample2_nearest",
    "sigmoid",
    "relu",
    "concat_channels",
    "reshape",
    "matmul",
    "linear",
    "softmax",
    "add",
    "sub",
    "mul",
    "div",
    "tsum",
    "mean",
    "no_grad_value",
]

_sequence = itertools.count()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an operation."""


class Tensor:
    """An n-dimensional real array, optionally tracking gradients.

    ``grad`` exists iff ``requires_grad`` is set, and always has the same shape
    as ``data``.
    """

    __slots__ = ("data", "requires_grad", "_grad", "_parents", "_backward", "_seq", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self._grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self._seq = -1
        self.op = "leaf"

    @property
    def grad(self) -> Optional[np.ndarray]:
        # op outputs allocate their buffer lazily
        if self._grad is None and self.requires_grad:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value) -> None:
        self._grad = value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _record(out_data: np.ndarray, parents: Sequence[Tensor], grad_fn, op: str) -> Tensor:
    out = Tensor(out_data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = grad_fn
        out._seq = next(_sequence)
    out.op = op
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor."""
    if loss.data.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in nodes:
            continue
        nodes[id(t)] = t
        stack.extend(p for p in t._parents if p.requires_grad)

    order = sorted((t for t in nodes.values() if t._backward is not None), key=lambda t: -t._seq)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in order:
        g = grads.get(id(t))
        if g is None:
            continue
        for parent, pg in zip(t._parents, t._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for key, g in grads.items():
        t = nodes[key]
        g = g.reshape(t.shape).astype(t.dtype, copy=False)
        # grads are never mutated in place, so sharing buffers is safe
        t._grad = g if t._grad is None else t._grad + g


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def no_grad_value(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


# ---------------------------------------------------------------------------
# convolution and resampling


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, padding: int = 0) -> Tensor:
    """Cross-correlation of a [B,C,H,W] input with [F,C,k,k] kernels.

    Internally the work is done channels-last as k*k shifted matrix products,
    which is an order of magnitude faster than im2col on a single core.
    """
    xd, wd = x.data, kernel.data
    if xd.ndim != 4 or wd.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {xd.shape} and {wd.shape}")
    B, C, H, W = xd.shape
    F, Ck, kh, kw = wd.shape
    if Ck != C:
        raise ShapeError(f"conv2d channel mismatch: input has C={C}, kernel expects C={Ck} (kernel {wd.shape})")
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d needs square odd kernels, got {kh}x{kw}")
    if bias is not None and bias.shape != (F,):
        raise ShapeError(f"conv2d bias must have shape ({F},), got {bias.shape}")
    k, p = kh, int(padding)
    if p < 0:
        raise ShapeError("padding must be non-negative")
    Ho, Wo = H + 2 * p - k + 1, W + 2 * p - k + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d output would be empty for input {xd.shape}, k={k}, padding={p}")

    # Flat-offset layout: the padded input is stored as [B, Hp*Wp (+k), C] so that
    # each kernel tap (i, j) reads one contiguous window starting at i*Wp + j.
    # Outputs are computed on a Ho x Wp grid and the Wp - Wo wrap-around
    # columns are discarded.
    dt = np.result_type(xd, wd)
    Hp, Wp = H + 2 * p, W + 2 * p
    L = Ho * Wp
    xp = np.zeros((B, Hp * Wp + k, C), dtype=dt)
    xp[:, : Hp * Wp].reshape(B, Hp, Wp, C)[:, p : p + H, p : p + W, :] = xd.transpose(0, 2, 3, 1)
    wt = np.ascontiguousarray(wd.transpose(2, 3, 1, 0), dtype=dt)  # k,k,C,F

    out = np.zeros((B, L, F), dtype=dt)
    for i in range(k):
        for j in range(k):
            o = i * Wp + j
            out += xp[:, o : o + L, :] @ wt[i, j]
    if bias is not None:
        out += bias.data.astype(dt, copy=False)
    result = np.ascontiguousarray(out.reshape(B, Ho, Wp, F)[:, :, :Wo, :].transpose(0, 3, 1, 2))

    def grad_fn(g):
        gp = np.zeros((B, Ho, Wp, F), dtype=dt)
        gp[:, :, :Wo, :] = g.transpose(0, 2, 3, 1)
        gp = gp.reshape(B, L, F)
        gw = None
        if kernel.requires_grad:
            gwt = np.empty_like(wt)
            for i in range(k):
                for j in range(k):
                    o = i * Wp + j
                    gwt[i, j] = (xp[:, o : o + L, :].transpose(0, 2, 1) @ gp).sum(axis=0)
            gw = np.ascontiguousarray(gwt.transpose(3, 2, 0, 1))
        gb = gp.sum(axis=(0, 1)) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            wtT = np.ascontiguousarray(wt.transpose(0, 1, 3, 2))  # k,k,F,C
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    o = i * Wp + j
                    gxp[:, o : o + L, :] += gp @ wtT[i, j]
            gx = gxp[:, : Hp * Wp].reshape(B, Hp, Wp, C)[:, p : p + H, p : p + W, :]
            gx = np.ascontiguousarray(gx.transpose(0, 3, 1, 2))
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _record(result, parents, grad_fn, "conv2d")


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties send the gradient to the first element."""
    xd = x.data
    if xd.ndim != 4:
        raise ShapeError(f"maxpool2 expects [B,C,H,W], got {xd.shape}")
    B, C, H, W = xd.shape
    if H % 2 or W % 2:
        raise ShapeError(f"maxpool2 needs even H and W, got {H}x{W}")
    win = xd.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H // 2, W // 2, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def grad_fn(g):
        scatter = (np.arange(4) == arg[..., None]) * g[..., None]
        gx = scatter.reshape(B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W)
        return (gx.astype(xd.dtype, copy=False),)

    return _record(np.ascontiguousarray(out), (x,), grad_fn, "maxpool2")


def upsample2_nearest(x: Tensor) -> Tensor:
    xd = x.data
    if xd.ndim != 4:
        raise ShapeError(f"upsample2_nearest expects [B,C,H,W], got {xd.shape}")
    B, C, H, W = xd.shape
    out = np.broadcast_to(xd[:, :, :, None, :, None], (B, C, H, 2, W, 2)).reshape(B, C, 2 * H, 2 * W)

    def grad_fn(g):
        return (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),)

    return _record(out, (x,), grad_fn, "upsample2")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim != 4 or bd.ndim != 4:
        raise ShapeError(f"concat_channels expects 4-d tensors, got {ad.shape} and {bd.shape}")
    if ad.shape[0] != bd.shape[0] or ad.shape[2:] != bd.shape[2:]:
        raise ShapeError(f"concat_channels batch/spatial mismatch: {ad.shape} vs {bd.shape}")
    c1 = ad.shape[1]
    out = np.concatenate([ad, bd], axis=1)

    def grad_fn(g):
        return g[:, :c1], g[:, c1:]

    return _record(out, (a, b), grad_fn, "concat")


# ---------------------------------------------------------------------------
# pointwise


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)

    def grad_fn(g):
        return (g * s * (1 - s),)

    return _record(s, (x,), grad_fn, "sigmoid")


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    out = np.where(pos, x.data, 0).astype(x.dtype, copy=False)

    def grad_fn(g):
        return (g * pos,)

    return _record(out, (x,), grad_fn, "relu")


def _binary_operands(a, b, name):
    # Python scalars adopt the tensor operand's dtype so float32 graphs stay float32.
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim and b.data.ndim and a.shape != b.shape:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} differ (only scalars broadcast)")
    return a, b


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    return g if g.shape == shape else np.asarray(g.sum()).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "add")

    def grad_fn(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _record(a.data + b.data, (a, b), grad_fn, "add")


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "sub")

    def grad_fn(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return _record(a.data - b.data, (a, b), grad_fn, "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "mul")
    ad, bd = a.data, b.data

    def grad_fn(g):
        return _reduce_to(g * bd, a.shape), _reduce_to(g * ad, b.shape)

    return _record(ad * bd, (a, b), grad_fn, "mul")


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def grad_fn(g):
        return _reduce_to(g / bd, a.shape), _reduce_to(-g * out / bd, b.shape)

    return _record(out, (a, b), grad_fn, "div")


# ---------------------------------------------------------------------------
# reductions and reshaping


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def tsum(x: Tensor, axis=None) -> Tensor:
    axes = _norm_axes(axis, x.data.ndim)
    out = x.data.sum(axis=axes)
    shape = x.shape

    def grad_fn(g):
        return (np.broadcast_to(np.expand_dims(g, axes), shape),)

    return _record(np.asarray(out), (x,), grad_fn, "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    axes = _norm_axes(axis, x.data.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(tsum(x, axes), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    out = x.data.reshape(shape)

    def grad_fn(g):
        return (g.reshape(old),)

    return _record(out, (x,), grad_fn, "reshape")


def matmul(a: Tensor, b) -> Tensor:
    """2-d matrix product. ``b`` may be a constant array."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def grad_fn(g):
        return g @ bd.T, ad.T @ g

    return _record(ad @ bd, (a, b), grad_fn, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ weight + bias`` for x [B,I], weight [I,O], bias [O]."""
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    y = matmul(x, weight)
    bd = bias.data

    def grad_fn(g):
        return g, g.sum(axis=0)

    return _record(y.data + bd, (y, bias), grad_fn, "linear")


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis of a 2-d tensor."""
    if x.data.ndim != 2:
        raise ShapeError(f"softmax expects [B,K], got {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _record(y, (x,), grad_fn, "softmax")
