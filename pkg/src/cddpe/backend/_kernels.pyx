# cython: boundscheck=False, wraparound=False, nonecheck=False, cdivision=True
"""Compiled hot kernels: im2col/col2im, depthwise 3x3 conv, bilinear warp.

Arithmetic is kept in single precision with the same accumulation order as
the NumPy fallback so both backends agree to the last bit wherever the
operation order is identical.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport floorf

cnp.import_array()


def im2col(float[:, :, :, ::1] xp, int k, int stride, int ho, int wo):
    cdef Py_ssize_t b = xp.shape[0], c = xp.shape[1]
    out = np.empty((b, c * k * k, ho * wo), dtype=np.float32)
    cdef float[:, :, ::1] o = out
    cdef Py_ssize_t bb, cc, i, j, y, x, row
    for bb in range(b):
        for cc in range(c):
            for i in range(k):
                for j in range(k):
                    row = (cc * k + i) * k + j
                    for y in range(ho):
                        for x in range(wo):
                            o[bb, row, y * wo + x] = xp[bb, cc, y * stride + i, x * stride + j]
    return out


def col2im(float[:, :, ::1] cols, int b, int c, int hp, int wp, int k, int stride, int ho, int wo):
    out = np.zeros((b, c, hp, wp), dtype=np.float32)
    cdef float[:, :, :, ::1] o = out
    cdef Py_ssize_t bb, cc, i, j, y, x, row
    for bb in range(b):
        for cc in range(c):
            for i in range(k):
                for j in range(k):
                    row = (cc * k + i) * k + j
                    for y in range(ho):
                        for x in range(wo):
                            o[bb, cc, y * stride + i, x * stride + j] += cols[bb, row, y * wo + x]
    return out


def dw3x3_fwd(float[:, :, :, ::1] xp, float[:, :, ::1] w):
    cdef Py_ssize_t b = xp.shape[0], c = xp.shape[1]
    cdef Py_ssize_t h = xp.shape[2] - 2, wd = xp.shape[3] - 2
    out = np.empty((b, c, h, wd), dtype=np.float32)
    cdef float[:, :, :, ::1] o = out
    cdef Py_ssize_t bb, cc, i, j, y, x
    cdef float acc
    for bb in range(b):
        for cc in range(c):
            for y in range(h):
                for x in range(wd):
                    acc = 0.0
                    for i in range(3):
                        for j in range(3):
                            acc += w[cc, i, j] * xp[bb, cc, y + i, x + j]
                    o[bb, cc, y, x] = acc
    return out


def dw3x3_bwd(float[:, :, :, ::1] xp, float[:, :, ::1] w, float[:, :, :, ::1] gy):
    cdef Py_ssize_t b = xp.shape[0], c = xp.shape[1]
    cdef Py_ssize_t h = xp.shape[2] - 2, wd = xp.shape[3] - 2
    gxp = np.zeros((b, c, xp.shape[2], xp.shape[3]), dtype=np.float32)
    gw = np.zeros((c, 3, 3), dtype=np.float32)
    cdef float[:, :, :, ::1] gx = gxp
    cdef float[:, :, ::1] gwv = gw
    cdef Py_ssize_t bb, cc, i, j, y, x
    cdef float g
    for bb in range(b):
        for cc in range(c):
            for y in range(h):
                for x in range(wd):
                    g = gy[bb, cc, y, x]
                    for i in range(3):
                        for j in range(3):
                            gx[bb, cc, y + i, x + j] += w[cc, i, j] * g
                            gwv[cc, i, j] += g * xp[bb, cc, y + i, x + j]
    return gxp, gw


cdef inline Py_ssize_t _corner(float v, Py_ssize_t hi):
    # Clamp in float space first so the integer cast cannot overflow.
    if v < 0.0:
        v = -1.0
    elif v > <float>hi:
        v = <float>hi + 1.0
    cdef Py_ssize_t i = <Py_ssize_t>v
    if i < 0:
        return 0
    if i > hi:
        return hi
    return i


def warp_fwd(float[:, :, :, ::1] x, float[:, :, :, ::1] disp):
    cdef Py_ssize_t b = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    out = np.empty((b, c, h, w), dtype=np.float32)
    cdef float[:, :, :, ::1] o = out
    cdef Py_ssize_t bb, cc, y, xx, x0, x1, y0, y1
    cdef float sx, sy, x0f, y0f, fx, fy
    cdef float one = 1.0
    for bb in range(b):
        for y in range(h):
            for xx in range(w):
                sx = <float>xx + disp[bb, 0, y, xx]
                sy = <float>y + disp[bb, 1, y, xx]
                x0f = floorf(sx)
                y0f = floorf(sy)
                fx = sx - x0f
                fy = sy - y0f
                x0 = _corner(x0f, w - 1)
                x1 = _corner(x0f + one, w - 1)
                y0 = _corner(y0f, h - 1)
                y1 = _corner(y0f + one, h - 1)
                for cc in range(c):
                    o[bb, cc, y, xx] = (
                        (one - fy) * ((one - fx) * x[bb, cc, y0, x0] + fx * x[bb, cc, y0, x1])
                        + fy * ((one - fx) * x[bb, cc, y1, x0] + fx * x[bb, cc, y1, x1])
                    )
    return out


def warp_bwd(float[:, :, :, ::1] x, float[:, :, :, ::1] disp, float[:, :, :, ::1] gy):
    cdef Py_ssize_t b = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    gx = np.zeros((b, c, h, w), dtype=np.float32)
    gd = np.zeros((b, 2, h, w), dtype=np.float32)
    cdef float[:, :, :, ::1] gxv = gx
    cdef float[:, :, :, ::1] gdv = gd
    cdef Py_ssize_t bb, cc, y, xx, x0, x1, y0, y1
    cdef float sx, sy, x0f, y0f, fx, fy, g, v00, v01, v10, v11, adx, ady
    cdef float one = 1.0
    for bb in range(b):
        for y in range(h):
            for xx in range(w):
                sx = <float>xx + disp[bb, 0, y, xx]
                sy = <float>y + disp[bb, 1, y, xx]
                x0f = floorf(sx)
                y0f = floorf(sy)
                fx = sx - x0f
                fy = sy - y0f
                x0 = _corner(x0f, w - 1)
                x1 = _corner(x0f + one, w - 1)
                y0 = _corner(y0f, h - 1)
                y1 = _corner(y0f + one, h - 1)
                adx = 0.0
                ady = 0.0
                for cc in range(c):
                    g = gy[bb, cc, y, xx]
                    v00 = x[bb, cc, y0, x0]
                    v01 = x[bb, cc, y0, x1]
                    v10 = x[bb, cc, y1, x0]
                    v11 = x[bb, cc, y1, x1]
                    gxv[bb, cc, y0, x0] += g * (one - fy) * (one - fx)
                    gxv[bb, cc, y0, x1] += g * (one - fy) * fx
                    gxv[bb, cc, y1, x0] += g * fy * (one - fx)
                    gxv[bb, cc, y1, x1] += g * fy * fx
                    adx += g * ((one - fy) * (v01 - v00) + fy * (v11 - v10))
                    ady += g * ((one - fx) * (v10 - v00) + fx * (v11 - v01))
                gdv[bb, 0, y, xx] = adx
                gdv[bb, 1, y, xx] = ady
    return gx, gd
