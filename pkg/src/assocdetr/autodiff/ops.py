"""Differentiable operations on :class:`Tensor`.

Every op computes its forward value with numpy (or the kernels backend) and,
when a tape is recording, registers a closure mapping the output gradient to
input gradients. Binary ops broadcast only by stretching extent-1 axes of
equal-rank operands.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from .. import kernels
from .tensor import ShapeError, Tensor, record

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# broadcasting

def broadcast_shape(sa, sb):
    if len(sa) != len(sb):
        raise ShapeError(f"rank mismatch: {sa} vs {sb}")
    out = []
    for da, db in zip(sa, sb):
        if da == db or db == 1:
            out.append(da)
        elif da == 1:
            out.append(db)
        else:
            raise ShapeError(f"cannot broadcast {sa} with {sb}")
    return tuple(out)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


# ---------------------------------------------------------------------------
# elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return record("add", (a, b), a.data + b.data,
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return record("sub", (a, b), a.data - b.data,
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data
    return record("mul", (a, b), ad * bd,
                  lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return record("scale", (x,), x.data * c, lambda g: (g * c,))


def shift(x: Tensor, c: float) -> Tensor:
    return record("shift", (x,), x.data + float(c), lambda g: (g,))


def _relu_grad(x, g):
    return g * (x > 0)


def _sigmoid_grad(y, g):
    return g * y * (1.0 - y)


def _gelu_grad(x, g):
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return g * (cdf + x * pdf)


def relu(x: Tensor) -> Tensor:
    xd = x.data
    return record("relu", (x,), np.maximum(xd, 0.0), lambda g: (_relu_grad(xd, g),))


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(xd))
    y = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return record("sigmoid", (x,), y, lambda g: (_sigmoid_grad(y, g),))


def gelu(x: Tensor) -> Tensor:
    xd = x.data
    y = 0.5 * xd * (1.0 + erf(xd / _SQRT2))
    return record("gelu", (x,), y, lambda g: (_gelu_grad(xd, g),))


_BINARY = {"add": add, "mul": mul, "sub": sub}
_UNARY = {"relu": relu, "sigmoid": sigmoid, "gelu": gelu}


def elementwise(kind: str, a: Tensor, b: Tensor | None = None) -> Tensor:
    if kind in _BINARY:
        if b is None:
            raise ValueError(f"{kind} needs two operands")
        return _BINARY[kind](a, b)
    if kind in _UNARY:
        return _UNARY[kind](a)
    raise ValueError(f"unknown elementwise kind {kind!r}")


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return record("matmul", (a, b), ad @ bd, lambda g: (g @ bd.T, ad.T @ g))


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul over a shared leading axis: (B,m,k) @ (B,k,n)."""
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return record("bmm", (a, b), np.matmul(ad, bd),
                  lambda g: (np.matmul(g, bd.transpose(0, 2, 1)), np.matmul(ad.transpose(0, 2, 1), g)))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Apply ``x @ w.T + b`` on the last axis; ``w`` is (out, in)."""
    lead = x.shape[:-1]
    y = matmul(reshape(x, (-1, x.shape[-1])), transpose(w, (1, 0)))
    if b is not None:
        y = add(y, reshape(b, (1, -1)))
    return reshape(y, lead + (w.shape[0],))


# ---------------------------------------------------------------------------
# structural

def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return record("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return record("transpose", (x,), x.data.transpose(axes), lambda g: (g.transpose(inv),))


def concat(tensors, axis: int) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return record("concat", tensors, out, lambda g: tuple(np.split(g, bounds, axis=axis)))


def pad(x: Tensor, pad_width) -> Tensor:
    """Zero padding; ``pad_width`` is one (before, after) pair per axis."""
    pad_width = tuple((int(a), int(b)) for a, b in pad_width)
    sl = tuple(slice(a, a + n) for (a, _), n in zip(pad_width, x.shape))
    return record("pad", (x,), np.pad(x.data, pad_width), lambda g: (g[sl],))


def crop(x: Tensor, slices) -> Tensor:
    slices = tuple(slices)
    src = x.shape

    def bw(g):
        out = np.zeros(src)
        out[slices] = g
        return (out,)

    return record("crop", (x,), x.data[slices], bw)


def gather_rows(x: Tensor, idx) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"gather_rows expects rank 2, got {x.shape}")
    idx = np.asarray(idx, dtype=np.int64)
    src = x.shape

    def bw(g):
        out = np.zeros(src)
        np.add.at(out, idx, g)
        return (out,)

    return record("gather_rows", (x,), x.data[idx], bw)


# ---------------------------------------------------------------------------
# reductions

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for a in axis:
        if not -ndim <= a < ndim:
            raise ShapeError(f"axis {a} out of range for rank {ndim}")
        out.append(a % ndim)
    return tuple(sorted(out))


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, x.ndim)
    src = x.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(src))
    return record("sum", (x,), x.data.sum(axis=axes, keepdims=keepdims),
                  lambda g: (np.broadcast_to(g.reshape(kept), src).copy(),))


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    src = x.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(src))
    return record("mean", (x,), x.data.mean(axis=axes, keepdims=keepdims),
                  lambda g: (np.broadcast_to(g.reshape(kept) / count, src).copy(),))


def amax(x: Tensor, axis, keepdims: bool = False) -> Tensor:
    """Maximum over ``axis``; the gradient goes to the first maximal element."""
    axes = _norm_axes(axis, x.ndim)
    rest = tuple(i for i in range(x.ndim) if i not in axes)
    perm = rest + axes
    moved = x.data.transpose(perm)
    lead = moved.shape[:len(rest)]
    flat = moved.reshape(lead + (-1,))
    arg = flat.argmax(axis=-1)
    vals = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    kept = tuple(1 if i in axes else n for i, n in enumerate(x.shape))
    out = vals.reshape(kept) if keepdims else vals
    inv = tuple(np.argsort(perm))
    src = x.shape

    def bw(g):
        gf = np.zeros(flat.shape)
        np.put_along_axis(gf, arg[..., None], g.reshape(lead + (1,)), axis=-1)
        return (gf.reshape(moved.shape).transpose(inv).reshape(src),)

    return record("amax", (x,), out, bw)


# ---------------------------------------------------------------------------
# softmax & losses

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for rank {x.ndim}")
    xd = x.data
    z = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return record("softmax", (x,), y, bw)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under row-softmax."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects (N, K) logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {n}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    loss = (lse - z[np.arange(n), labels]).mean()

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(n), labels] -= 1.0
        return (p * (g.reshape(()) / n),)

    return record("cross_entropy", (logits,), np.array(loss), bw)


# ---------------------------------------------------------------------------
# convolution family

def _pair(v):
    if isinstance(v, (tuple, list)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


def _out_extent(n, k, stride, padding):
    return (n + 2 * padding - k) // stride + 1


def _pad_hw(xd, padding, value=0.0):
    if padding == 0:
        return xd
    return np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=value)


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0, groups: int = 1) -> Tensor:
    """2-d cross-correlation over NCHW input with OIkk weights and zero padding."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input and OIkk weight, got {x.shape}, {w.shape}")
    if stride < 1 or padding < 0 or groups < 1:
        raise ValueError(f"bad conv params stride={stride} padding={padding} groups={groups}")
    n, c, h, wd = x.shape
    o, cg, kh, kw = w.shape
    if c % groups or o % groups:
        raise ShapeError(f"channels {c} / out {o} not divisible by groups {groups}")
    if cg * groups != c:
        raise ShapeError(f"weight expects {cg * groups} input channels, got {c}")
    if h + 2 * padding < kh or wd + 2 * padding < kw:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h}x{wd} (pad {padding})")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"bias shape {bias.shape} != ({o},)")
    xp = _pad_hw(x.data, padding)
    wdat = w.data
    out = kernels.conv2d_forward(xp, wdat, stride, groups)
    if bias is not None:
        out += bias.data[None, :, None, None]
    ho, wo = out.shape[2:]
    inputs = (x, w) if bias is None else (x, w, bias)
    og = o // groups
    kk = cg * kh * kw

    def bw(g):
        g2 = g.reshape(n, groups, og, ho * wo)
        dx = dw = None
        if w.requires_grad:
            cols = kernels.im2col(xp, kh, kw, stride).reshape(n, groups, kk, ho * wo)
            dw = np.matmul(g2, cols.transpose(0, 1, 3, 2)).sum(axis=0).reshape(w.shape)
        if x.requires_grad:
            wg = wdat.reshape(groups, og, kk)
            dcols = np.matmul(wg.transpose(0, 2, 1)[None], g2).reshape(n, c * kh * kw, ho * wo)
            dxp = kernels.col2im(dcols, xp.shape, kh, kw, stride)
            dx = dxp[:, :, padding:padding + h, padding:padding + wd]
        if bias is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 2, 3))

    return record("conv2d", inputs, out, bw)


def unfold(x: Tensor, kernel: int, stride: int = 1, padding: int = 0) -> Tensor:
    """Receptive-field extraction: N x (C*k*k) x L, rows ordered (c, i, j)."""
    if x.ndim != 4:
        raise ShapeError(f"unfold expects NCHW, got {x.shape}")
    if kernel < 1 or stride < 1 or padding < 0:
        raise ValueError(f"bad unfold params k={kernel} stride={stride} padding={padding}")
    n, c, h, wd = x.shape
    if h + 2 * padding < kernel or wd + 2 * padding < kernel:
        raise ShapeError(f"kernel {kernel} larger than padded input {h}x{wd}")
    xp = _pad_hw(x.data, padding)
    cols = kernels.im2col(xp, kernel, kernel, stride)

    def bw(g):
        dxp = kernels.col2im(g, xp.shape, kernel, kernel, stride)
        return (dxp[:, :, padding:padding + h, padding:padding + wd],)

    return record("unfold", (x,), cols, bw)


def pool(kind: str, x: Tensor, window, stride: int = 1, padding: int = 0) -> Tensor:
    """Average or max pooling; max pads with -inf, avg pads with zeros."""
    if x.ndim != 4:
        raise ShapeError(f"pool expects NCHW, got {x.shape}")
    kh, kw = _pair(window)
    n, c, h, wd = x.shape
    if kh < 1 or kw < 1 or stride < 1:
        raise ValueError("pool window and stride must be positive")
    if kh > h + 2 * padding or kw > wd + 2 * padding:
        raise ShapeError(f"pool window {kh}x{kw} exceeds spatial extent {h}x{wd}")
    if kind == "max":
        xp = _pad_hw(x.data, padding, -np.inf)
        out, arg = kernels.maxpool_forward(xp, kh, kw, stride)

        def bw(g):
            d = kernels.maxpool_backward(g, arg, xp.shape)
            return (d[:, :, padding:padding + h, padding:padding + wd],)
    elif kind == "avg":
        xp = _pad_hw(x.data, padding)
        out = kernels.avgpool_forward(xp, kh, kw, stride)

        def bw(g):
            d = kernels.avgpool_backward(g, xp.shape, kh, kw, stride)
            return (d[:, :, padding:padding + h, padding:padding + wd],)
    else:
        raise ValueError(f"unknown pool kind {kind!r}")
    return record(f"pool_{kind}", (x,), out, bw)


def global_pool(kind: str, x: Tensor) -> Tensor:
    """Pool each channel over its full H x W; returns N x C x 1 x 1."""
    return pool(kind, x, x.shape[2:], 1)


# ---------------------------------------------------------------------------
# normalization

class RunningStats:
    """Mutable (mean, var) pair updated by exponential moving average."""

    def __init__(self, channels: int, momentum: float = 0.1):
        self.mean = np.zeros(channels)
        self.var = np.ones(channels)
        self.momentum = momentum


def normalize(kind: str, x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5,
              mode: str = "train", running: RunningStats | None = None) -> Tensor:
    """Batch or layer normalization along channel axis 1.

    Batch norm reduces over every axis except 1; layer norm reduces over
    axis 1 only, independently per position. Eval mode for batch norm uses
    ``running`` and never updates it.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    if x.ndim < 2:
        raise ShapeError(f"normalize needs rank >= 2, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta must be ({c},), got {gamma.shape}, {beta.shape}")
    bshape = (1, c) + (1,) * (x.ndim - 2)
    xd = x.data
    if kind == "batch":
        axes = tuple(i for i in range(x.ndim) if i != 1)
    elif kind == "layer":
        axes = (1,)
    else:
        raise ValueError(f"unknown normalize kind {kind!r}")
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")

    use_batch_stats = kind == "layer" or mode == "train"
    if use_batch_stats:
        mu = xd.mean(axis=axes, keepdims=True)
        centered = xd - mu
        var = (centered * centered).mean(axis=axes, keepdims=True)
        if kind == "batch":
            if running is None:
                raise ValueError("batch norm in train mode needs running stats")
            m = xd.size // c
            unbiased = var.reshape(c) * (m / max(m - 1, 1))
            mom = running.momentum
            running.mean[...] = (1.0 - mom) * running.mean + mom * mu.reshape(c)
            running.var[...] = (1.0 - mom) * running.var + mom * unbiased
    else:
        if running is None:
            raise ValueError("batch norm in eval mode needs running stats")
        mu = running.mean.reshape(bshape).copy()
        var = running.var.reshape(bshape).copy()
        centered = xd - mu
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    gd = gamma.data.reshape(bshape)
    out = xhat * gd + beta.data.reshape(bshape)
    param_axes = tuple(i for i in range(x.ndim) if i != 1)
    count = int(np.prod([x.shape[a] for a in axes]))

    def bw(g):
        dgamma = (g * xhat).sum(axis=param_axes)
        dbeta = g.sum(axis=param_axes)
        dxhat = g * gd
        if use_batch_stats:
            dx = inv / count * (count * dxhat - dxhat.sum(axis=axes, keepdims=True)
                                - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
        else:
            dx = dxhat * inv
        return dx, dgamma, dbeta

    return record(f"{kind}_norm", (x, gamma, beta), out, bw)
