"""Pure-numpy kernels. Reference path and fallback when numba is unavailable."""
import numpy as np


def conv2d_forward(xp, w, stride, groups):
    """Cross-correlation of an already padded input.

    Each output element is accumulated in the fixed order (c, i, j), starting
    from zero, so results are bitwise equal to a naive nested-loop sum.
    """
    n, _, hp, wp = xp.shape
    o, cg, kh, kw = w.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    og = o // groups
    out = np.zeros((n, o, ho, wo))
    for g in range(groups):
        osl = slice(g * og, (g + 1) * og)
        acc = out[:, osl]
        for c in range(cg):
            ci = g * cg + c
            for i in range(kh):
                for j in range(kw):
                    patch = xp[:, ci, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
                    acc += w[osl, c, i, j][None, :, None, None] * patch[:, None]
    return out


def im2col(xp, kh, kw, stride):
    n, c, hp, wp = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    cols = np.empty((n, c, kh, kw, ho, wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
    return cols.reshape(n, c * kh * kw, ho * wo)


def col2im(cols, padded_shape, kh, kw, stride):
    n, c, hp, wp = padded_shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    out = np.zeros(padded_shape)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += cols[:, :, i, j]
    return out


def maxpool_forward(xp, kh, kw, stride):
    """Returns pooled values and the flat argmax index into each padded plane.

    Ties resolve to the first maximal slot in (i, j) raster order.
    """
    n, c, hp, wp = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    best = np.full((n, c, ho, wo), -np.inf)
    arg = np.zeros((n, c, ho, wo), dtype=np.int64)
    ys = (np.arange(ho) * stride)[:, None]
    xs = (np.arange(wo) * stride)[None, :]
    for i in range(kh):
        for j in range(kw):
            v = xp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
            better = v > best
            best = np.where(better, v, best)
            arg = np.where(better, (ys + i) * wp + (xs + j), arg)
    return best, arg


def maxpool_backward(g, arg, padded_shape):
    n, c, hp, wp = padded_shape
    out = np.zeros((n * c, hp * wp))
    flat_g = g.reshape(n * c, -1)
    flat_a = arg.reshape(n * c, -1)
    rows = np.repeat(np.arange(n * c), flat_a.shape[1])
    np.add.at(out, (rows, flat_a.ravel()), flat_g.ravel())
    return out.reshape(padded_shape)


def avgpool_forward(xp, kh, kw, stride):
    n, c, hp, wp = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    acc = np.zeros((n, c, ho, wo))
    for i in range(kh):
        for j in range(kw):
            acc += xp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
    return acc / (kh * kw)


def avgpool_backward(g, padded_shape, kh, kw, stride):
    _, _, ho, wo = g.shape
    out = np.zeros(padded_shape)
    share = g / (kh * kw)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += share
    return out
