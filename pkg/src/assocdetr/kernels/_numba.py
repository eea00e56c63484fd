"""numba @njit kernels, bitwise-compatible with the numpy reference path.

No fastmath anywhere: the conv forward must keep mul-then-add per term so it
reproduces the nested-loop sum exactly.
"""
import numpy as np
from numba import njit


@njit(cache=True)
def _conv2d_forward(xp, w, stride, groups, out):
    n_, _, _, _ = xp.shape
    o_, cg, kh, kw = w.shape
    _, _, ho, wo = out.shape
    og = o_ // groups
    for n in range(n_):
        for o in range(o_):
            g = o // og
            for c in range(cg):
                ci = g * cg + c
                for i in range(kh):
                    for j in range(kw):
                        wv = w[o, c, i, j]
                        for y in range(ho):
                            orow = out[n, o, y]
                            xrow = xp[n, ci, y * stride + i]
                            if stride == 1:
                                for x in range(wo):
                                    orow[x] += wv * xrow[x + j]
                            else:
                                for x in range(wo):
                                    orow[x] += wv * xrow[x * stride + j]


def conv2d_forward(xp, w, stride, groups):
    n, _, hp, wp = xp.shape
    o, _, kh, kw = w.shape
    out = np.zeros((n, o, (hp - kh) // stride + 1, (wp - kw) // stride + 1))
    _conv2d_forward(np.ascontiguousarray(xp), np.ascontiguousarray(w), stride, groups, out)
    return out


@njit(cache=True)
def _im2col(xp, kh, kw, stride, cols):
    n_, c_, _, _ = xp.shape
    _, _, _, _, ho, wo = cols.shape
    for n in range(n_):
        for c in range(c_):
            for i in range(kh):
                for j in range(kw):
                    for y in range(ho):
                        xrow = xp[n, c, y * stride + i]
                        crow = cols[n, c, i, j, y]
                        for x in range(wo):
                            crow[x] = xrow[x * stride + j]


def im2col(xp, kh, kw, stride):
    n, c, hp, wp = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    cols = np.empty((n, c, kh, kw, ho, wo))
    _im2col(np.ascontiguousarray(xp), kh, kw, stride, cols)
    return cols.reshape(n, c * kh * kw, ho * wo)


@njit(cache=True)
def _col2im(cols, kh, kw, stride, out):
    n_, c_, _, _, ho, wo = cols.shape
    for n in range(n_):
        for c in range(c_):
            for i in range(kh):
                for j in range(kw):
                    for y in range(ho):
                        orow = out[n, c, y * stride + i]
                        crow = cols[n, c, i, j, y]
                        for x in range(wo):
                            orow[x * stride + j] += crow[x]


def col2im(cols, padded_shape, kh, kw, stride):
    n, c, hp, wp = padded_shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    out = np.zeros(padded_shape)
    _col2im(np.ascontiguousarray(cols).reshape(n, c, kh, kw, ho, wo), kh, kw, stride, out)
    return out


@njit(cache=True)
def _maxpool_forward(xp, kh, kw, stride, best, arg):
    n_, c_, _, wp = xp.shape
    _, _, ho, wo = best.shape
    for n in range(n_):
        for c in range(c_):
            plane = xp[n, c]
            for y in range(ho):
                for x in range(wo):
                    b = -np.inf
                    a = 0
                    for i in range(kh):
                        for j in range(kw):
                            v = plane[y * stride + i, x * stride + j]
                            if v > b:
                                b = v
                                a = (y * stride + i) * wp + x * stride + j
                    best[n, c, y, x] = b
                    arg[n, c, y, x] = a


def maxpool_forward(xp, kh, kw, stride):
    n, c, hp, wp = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    best = np.empty((n, c, ho, wo))
    arg = np.empty((n, c, ho, wo), dtype=np.int64)
    _maxpool_forward(np.ascontiguousarray(xp), kh, kw, stride, best, arg)
    return best, arg


@njit(cache=True)
def _maxpool_backward(g, arg, out):
    n_, c_, ho, wo = g.shape
    for n in range(n_):
        for c in range(c_):
            plane = out[n, c]
            for y in range(ho):
                for x in range(wo):
                    plane[arg[n, c, y, x]] += g[n, c, y, x]


def maxpool_backward(g, arg, padded_shape):
    n, c, hp, wp = padded_shape
    out = np.zeros((n, c, hp * wp))
    _maxpool_backward(np.ascontiguousarray(g), np.ascontiguousarray(arg), out)
    return out.reshape(padded_shape)


@njit(cache=True)
def _avgpool_forward(xp, kh, kw, stride, out):
    n_, c_, _, _ = xp.shape
    _, _, ho, wo = out.shape
    for n in range(n_):
        for c in range(c_):
            for i in range(kh):
                for j in range(kw):
                    for y in range(ho):
                        orow = out[n, c, y]
                        xrow = xp[n, c, y * stride + i]
                        for x in range(wo):
                            orow[x] += xrow[x * stride + j]


def avgpool_forward(xp, kh, kw, stride):
    n, c, hp, wp = xp.shape
    out = np.zeros((n, c, (hp - kh) // stride + 1, (wp - kw) // stride + 1))
    _avgpool_forward(np.ascontiguousarray(xp), kh, kw, stride, out)
    return out / (kh * kw)


@njit(cache=True)
def _avgpool_backward(share, kh, kw, stride, out):
    n_, c_, ho, wo = share.shape
    for n in range(n_):
        for c in range(c_):
            for i in range(kh):
                for j in range(kw):
                    for y in range(ho):
                        orow = out[n, c, y * stride + i]
                        srow = share[n, c, y]
                        for x in range(wo):
                            orow[x * stride + j] += srow[x]


def avgpool_backward(g, padded_shape, kh, kw, stride):
    out = np.zeros(padded_shape)
    _avgpool_backward(np.ascontiguousarray(g) / (kh * kw), kh, kw, stride, out)
    return out
