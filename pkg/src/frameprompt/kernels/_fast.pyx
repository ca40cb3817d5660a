# cython: language_level=3
"""Compiled conv/pool kernels. Same contracts as _ref; plain serial loops."""

import numpy as np

cimport numpy as cnp

cnp.import_array()

BACKEND = "cython"


def conv2d_forward(cnp.ndarray[double, ndim=4] x, cnp.ndarray[double, ndim=4] w,
                   int stride, int pad):
    cdef int b = x.shape[0], ci = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef int co = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef int ho = (h + 2 * pad - kh) // stride + 1
    cdef int wo = (wd + 2 * pad - kw) // stride + 1
    cdef cnp.ndarray[double, ndim=4] y = np.zeros((b, co, ho, wo), dtype=np.float64)
    cdef int n, o, c, oy, ox, ky, kx, iy, ix
    cdef double acc
    for n in range(b):
        for o in range(co):
            for oy in range(ho):
                for ox in range(wo):
                    acc = 0.0
                    for c in range(ci):
                        for ky in range(kh):
                            iy = oy * stride + ky - pad
                            if iy < 0 or iy >= h:
                                continue
                            for kx in range(kw):
                                ix = ox * stride + kx - pad
                                if ix < 0 or ix >= wd:
                                    continue
                                acc += x[n, c, iy, ix] * w[o, c, ky, kx]
                    y[n, o, oy, ox] = acc
    return y


def conv2d_backward_input(cnp.ndarray[double, ndim=4] dy, cnp.ndarray[double, ndim=4] w,
                          int stride, int pad, int in_h, int in_w):
    cdef int b = dy.shape[0], co = dy.shape[1], ho = dy.shape[2], wo = dy.shape[3]
    cdef int ci = w.shape[1], kh = w.shape[2], kw = w.shape[3]
    cdef cnp.ndarray[double, ndim=4] dx = np.zeros((b, ci, in_h, in_w), dtype=np.float64)
    cdef int n, c, iy, ix, o, ky, kx, ty, tx, oy, ox
    cdef double acc
    for n in range(b):
        for c in range(ci):
            for iy in range(in_h):
                for ix in range(in_w):
                    acc = 0.0
                    for o in range(co):
                        for ky in range(kh):
                            ty = iy + pad - ky
                            if ty < 0 or ty % stride != 0:
                                continue
                            oy = ty // stride
                            if oy >= ho:
                                continue
                            for kx in range(kw):
                                tx = ix + pad - kx
                                if tx < 0 or tx % stride != 0:
                                    continue
                                ox = tx // stride
                                if ox >= wo:
                                    continue
                                acc += dy[n, o, oy, ox] * w[o, c, ky, kx]
                    dx[n, c, iy, ix] = acc
    return dx


def conv2d_backward_weight(cnp.ndarray[double, ndim=4] x, cnp.ndarray[double, ndim=4] dy,
                           int stride, int pad, int kh, int kw):
    cdef int b = x.shape[0], ci = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef int co = dy.shape[1], ho = dy.shape[2], wo = dy.shape[3]
    cdef cnp.ndarray[double, ndim=4] dw = np.zeros((co, ci, kh, kw), dtype=np.float64)
    cdef int n, o, c, ky, kx, oy, ox, iy, ix
    cdef double acc
    for o in range(co):
        for c in range(ci):
            for ky in range(kh):
                for kx in range(kw):
                    acc = 0.0
                    for n in range(b):
                        for oy in range(ho):
                            iy = oy * stride + ky - pad
                            if iy < 0 or iy >= h:
                                continue
                            for ox in range(wo):
                                ix = ox * stride + kx - pad
                                if ix < 0 or ix >= wd:
                                    continue
                                acc += x[n, c, iy, ix] * dy[n, o, oy, ox]
                    dw[o, c, ky, kx] = acc
    return dw


def maxpool2_forward(cnp.ndarray[double, ndim=4] x):
    cdef int b = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef int ho = h // 2, wo = w // 2
    cdef cnp.ndarray[double, ndim=4] y = np.empty((b, c, ho, wo), dtype=np.float64)
    cdef cnp.ndarray[cnp.int8_t, ndim=4] idx = np.empty((b, c, ho, wo), dtype=np.int8)
    cdef int n, ch, oy, ox, k, best_k
    cdef double v, best
    for n in range(b):
        for ch in range(c):
            for oy in range(ho):
                for ox in range(wo):
                    best = x[n, ch, 2 * oy, 2 * ox]
                    best_k = 0
                    for k in range(1, 4):
                        v = x[n, ch, 2 * oy + (k >> 1), 2 * ox + (k & 1)]
                        if v > best:
                            best = v
                            best_k = k
                    y[n, ch, oy, ox] = best
                    idx[n, ch, oy, ox] = best_k
    return y, idx


def maxpool2_backward(cnp.ndarray[double, ndim=4] dy, cnp.ndarray[cnp.int8_t, ndim=4] idx):
    cdef int b = dy.shape[0], c = dy.shape[1], ho = dy.shape[2], wo = dy.shape[3]
    cdef cnp.ndarray[double, ndim=4] dx = np.zeros((b, c, ho * 2, wo * 2), dtype=np.float64)
    cdef int n, ch, oy, ox, k
    for n in range(b):
        for ch in range(c):
            for oy in range(ho):
                for ox in range(wo):
                    k = idx[n, ch, oy, ox]
                    dx[n, ch, 2 * oy + (k >> 1), 2 * ox + (k & 1)] = dy[n, ch, oy, ox]
    return dx
