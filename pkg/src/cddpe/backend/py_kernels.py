"""Pure-NumPy implementations of the hot kernels.

Fallback used when the compiled extension is unavailable. Data-movement
kernels (im2col / col2im) are bit-identical to the compiled versions; the
heavy arithmetic of convolutions happens in a shared BLAS matmul either way.
"""

import numpy as np


def im2col(xp, k, stride, ho, wo):
    """Unfold a padded [B,C,Hp,Wp] map into columns [B, C*k*k, ho*wo]."""
    b, c, _, _ = xp.shape
    cols = np.empty((b, c, k, k, ho, wo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(b, c * k * k, ho * wo)


def col2im(cols, b, c, hp, wp, k, stride, ho, wo):
    """Adjoint of im2col: scatter-add columns back into a padded map."""
    xp = np.zeros((b, c, hp, wp), dtype=cols.dtype)
    c6 = cols.reshape(b, c, k, k, ho, wo)
    for i in range(k):
        for j in range(k):
            xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += c6[:, :, i, j]
    return xp


def dw3x3_fwd(xp, w):
    """Depthwise 3x3 convolution on a pad-1 input. w: [C,3,3]."""
    b, c, hp, wp = xp.shape
    h, wd = hp - 2, wp - 2
    y = np.zeros((b, c, h, wd), dtype=xp.dtype)
    for i in range(3):
        for j in range(3):
            y += w[:, i, j][None, :, None, None] * xp[:, :, i:i + h, j:j + wd]
    return y


def dw3x3_bwd(xp, w, gy):
    b, c, hp, wp = xp.shape
    h, wd = hp - 2, wp - 2
    gxp = np.zeros_like(xp)
    gw = np.empty_like(w)
    for i in range(3):
        for j in range(3):
            gxp[:, :, i:i + h, j:j + wd] += w[:, i, j][None, :, None, None] * gy
            gw[:, i, j] = (gy * xp[:, :, i:i + h, j:j + wd]).sum(axis=(0, 2, 3))
    return gxp, gw


def _corner_indices(disp, h, w):
    sx = np.arange(w, dtype=disp.dtype)[None, None, :] + disp[:, 0]
    sy = np.arange(h, dtype=disp.dtype)[None, :, None] + disp[:, 1]
    x0f = np.floor(sx)
    y0f = np.floor(sy)
    fx = sx - x0f
    fy = sy - y0f
    x0 = np.clip(x0f.astype(np.int64), 0, w - 1)
    x1 = np.clip(x0f.astype(np.int64) + 1, 0, w - 1)
    y0 = np.clip(y0f.astype(np.int64), 0, h - 1)
    y1 = np.clip(y0f.astype(np.int64) + 1, 0, h - 1)
    return fx, fy, x0, x1, y0, y1


def warp_fwd(x, disp):
    """Bilinear backward warp with border clamping.

    x: [B,C,H,W]; disp: [B,2,H,W] with channel 0 = horizontal offset,
    channel 1 = vertical offset, both in pixels.
    """
    b, c, h, w = x.shape
    fx, fy, x0, x1, y0, y1 = _corner_indices(disp, h, w)
    bi = np.arange(b)[:, None, None, None]
    ci = np.arange(c)[None, :, None, None]
    v00 = x[bi, ci, y0[:, None], x0[:, None]]
    v01 = x[bi, ci, y0[:, None], x1[:, None]]
    v10 = x[bi, ci, y1[:, None], x0[:, None]]
    v11 = x[bi, ci, y1[:, None], x1[:, None]]
    fx4 = fx[:, None]
    fy4 = fy[:, None]
    one = x.dtype.type(1.0)
    return (one - fy4) * ((one - fx4) * v00 + fx4 * v01) + fy4 * ((one - fx4) * v10 + fx4 * v11)


def warp_bwd(x, disp, gy):
    b, c, h, w = x.shape
    fx, fy, x0, x1, y0, y1 = _corner_indices(disp, h, w)
    bi = np.arange(b)[:, None, None, None]
    ci = np.arange(c)[None, :, None, None]
    y0e, y1e, x0e, x1e = y0[:, None], y1[:, None], x0[:, None], x1[:, None]
    v00 = x[bi, ci, y0e, x0e]
    v01 = x[bi, ci, y0e, x1e]
    v10 = x[bi, ci, y1e, x0e]
    v11 = x[bi, ci, y1e, x1e]
    fx4 = fx[:, None]
    fy4 = fy[:, None]
    one = x.dtype.type(1.0)

    gx = np.zeros_like(x)
    np.add.at(gx, (bi, ci, y0e, x0e), gy * (one - fy4) * (one - fx4))
    np.add.at(gx, (bi, ci, y0e, x1e), gy * (one - fy4) * fx4)
    np.add.at(gx, (bi, ci, y1e, x0e), gy * fy4 * (one - fx4))
    np.add.at(gx, (bi, ci, y1e, x1e), gy * fy4 * fx4)

    dvdx = (one - fy4) * (v01 - v00) + fy4 * (v11 - v10)
    dvdy = (one - fx4) * (v10 - v00) + fx4 * (v11 - v01)
    gdisp = np.empty_like(disp)
    gdisp[:, 0] = (gy * dvdx).sum(axis=1)
    gdisp[:, 1] = (gy * dvdy).sum(axis=1)
    return gx, gdisp
