"""Differentiable operations on :class:`Tensor`.

Convolution is im2col + one BLAS matmul; the column transforms, the
depthwise kernel and the bilinear warp dispatch to the active backend.
Spectral tensors are complex64; gradients of complex values follow the
pair-of-reals convention (d/dRe + i*d/dIm), which makes the backward of
any complex-linear map its Hermitian adjoint.
"""

import numpy as np

from .. import backend
from ..errors import ConfigError, DimensionError, UsageError
from .tensor import Tensor, as_tensor

_NEG_INF = np.float32(-np.inf)


def _unbroadcast(g, shape):
    """Reduce a broadcast gradient back to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.data.shape, b.data.shape

    def bwd(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Tensor.from_op(a.data + b.data, (a, b), "add", bwd)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.data.shape, b.data.shape

    def bwd(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return Tensor.from_op(a.data - b.data, (a, b), "sub", bwd)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    da, db = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * db, da.shape), _unbroadcast(g * da, db.shape)

    return Tensor.from_op(da * db, (a, b), "mul", bwd)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    da, db = a.data, b.data
    out = da / db

    def bwd(g):
        ga = _unbroadcast(g / db, da.shape)
        gb = _unbroadcast(-g * out / db, db.shape)
        return ga, gb

    return Tensor.from_op(out, (a, b), "div", bwd)


def neg(a):
    a = as_tensor(a)
    return Tensor.from_op(-a.data, (a,), "neg", lambda g: (-g,))


def abs_(a):
    a = as_tensor(a)
    sign = np.sign(a.data)
    return Tensor.from_op(np.abs(a.data), (a,), "abs", lambda g: (g * sign,))


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    shape = a.data.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, shape).astype(np.float32, copy=True),)
        gg = g
        if not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            for ax in sorted(a_ % len(shape) for a_ in axes):
                gg = np.expand_dims(gg, ax)
        return (np.broadcast_to(gg, shape).astype(np.float32, copy=True),)

    return Tensor.from_op(np.asarray(out, dtype=a.data.dtype), (a,), "sum", bwd)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= a.data.shape[ax]
    s = sum_(a, axis=axis, keepdims=keepdims)
    return mul(s, np.float32(1.0 / count))


def reshape(a, shape):
    a = as_tensor(a)
    old = a.data.shape
    return Tensor.from_op(a.data.reshape(shape), (a,), "reshape", lambda g: (g.reshape(old),))


def transpose(a, axes):
    a = as_tensor(a)
    inv = tuple(np.argsort(axes))
    return Tensor.from_op(np.transpose(a.data, axes), (a,), "transpose",
                          lambda g: (np.ascontiguousarray(np.transpose(g, inv)),))


def concat(tensors, axis=1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return Tensor.from_op(out, tuple(tensors), "concat", bwd)


def narrow(a, axis, start, length):
    a = as_tensor(a)
    shape = a.data.shape
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def bwd(g):
        ga = np.zeros(shape, dtype=g.dtype)
        ga[idx] = g
        return (ga,)

    return Tensor.from_op(np.ascontiguousarray(a.data[idx]), (a,), "narrow", bwd)


def batch_gather(a, rows):
    """Select rows along axis 0; backward scatter-adds."""
    a = as_tensor(a)
    rows = np.asarray(rows, dtype=np.int64)
    shape = a.data.shape

    def bwd(g):
        ga = np.zeros(shape, dtype=g.dtype)
        np.add.at(ga, rows, g)
        return (ga,)

    return Tensor.from_op(np.ascontiguousarray(a.data[rows]), (a,), "batch_gather", bwd)


def batch_scatter(a, rows, n):
    """Place rows of ``a`` at positions ``rows`` in a zero tensor of leading size n."""
    a = as_tensor(a)
    rows = np.asarray(rows, dtype=np.int64)
    out = np.zeros((n,) + a.data.shape[1:], dtype=a.data.dtype)
    out[rows] = a.data
    return Tensor.from_op(out, (a,), "batch_scatter", lambda g: (np.ascontiguousarray(g[rows]),))


# ---------------------------------------------------------------------------
# nonlinearities


def sigmoid(a):
    a = as_tensor(a)
    x = a.data
    pos = x >= 0
    z = np.exp(np.where(pos, -x, x))
    y = np.where(pos, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.dtype)
    return Tensor.from_op(y, (a,), "sigmoid", lambda g: (g * y * (1.0 - y),))


_GELU_C = np.float32(np.sqrt(2.0 / np.pi))
_GELU_A = np.float32(0.044715)


def gelu(a):
    """Gaussian-error-style gate via the tanh approximation."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + _GELU_A * x * x * x)
    t = np.tanh(inner)

    def bwd(g):
        dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
        dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
        return (g * dy.astype(np.float32),)

    return Tensor.from_op((0.5 * x * (1.0 + t)).astype(x.dtype), (a,), "gelu", bwd)


def softmax(a, axis=-1):
    a = as_tensor(a)
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    y = (e / e.sum(axis=axis, keepdims=True)).astype(x.dtype)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return Tensor.from_op(y, (a,), "softmax", bwd)


def topk_select(a, k):
    """Keep the k largest entries along the last axis, mask the rest to -inf.

    Ties break towards the lowest index. Returns (indices, masked tensor);
    indices are ascending per row. Feeding the masked tensor to softmax
    yields exactly k nonzero weights.
    """
    a = as_tensor(a)
    e = a.data.shape[-1]
    if k > e:
        raise ConfigError(f"top-k with k={k} exceeds the {e} available entries")
    order = np.argsort(-a.data, axis=-1, kind="stable")
    top = np.sort(order[..., :k], axis=-1)
    mask = np.zeros(a.data.shape, dtype=bool)
    np.put_along_axis(mask, top, True, axis=-1)
    masked = np.where(mask, a.data, _NEG_INF)

    def bwd(g):
        return (np.where(mask, g, np.float32(0.0)),)

    return top, Tensor.from_op(masked, (a,), "topk_select", bwd)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    da, db = a.data, b.data
    if da.ndim != 2 or db.ndim != 2 or da.shape[1] != db.shape[0]:
        raise DimensionError(f"matmul expects [N,M]x[M,K], got {da.shape} x {db.shape}")

    def bwd(g):
        return g @ db.T, da.T @ g

    return Tensor.from_op(da @ db, (a, b), "matmul", bwd)


# ---------------------------------------------------------------------------
# convolution


def _conv_shape_checks(x, w):
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError("conv2d expects 4-d input and kernels")
    if w.shape[2] != w.shape[3] or w.shape[2] % 2 != 1:
        raise DimensionError(f"square odd kernels required, got {w.shape[2]}x{w.shape[3]}")


def conv2d(x, w, b=None, stride=1, padding=0):
    """Cross-correlation of [B,Cin,H,W] with kernels [Cout,Cin,k,k]."""
    x, w = as_tensor(x), as_tensor(w)
    _conv_shape_checks(x.data, w.data)
    if x.data.shape[1] != w.data.shape[1]:
        raise DimensionError(
            f"conv2d input has {x.data.shape[1]} channels, kernels expect {w.data.shape[1]}")
    if stride < 1:
        raise DimensionError(f"stride must be >= 1, got {stride}")
    bsz, cin, h, wdt = x.data.shape
    cout, _, k, _ = w.data.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wdt + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d output would be empty for input {h}x{wdt}, k={k}")
    xd = np.ascontiguousarray(x.data)
    w2 = w.data.reshape(cout, cin * k * k)

    pointwise = k == 1 and stride == 1 and padding == 0
    if pointwise:
        cols = xd.reshape(bsz, cin, h * wdt)
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        cols = backend.im2col(xp, k, stride, ho, wo)
    out = np.matmul(w2, cols).reshape(bsz, cout, ho, wo)
    parents = (x, w)
    if b is not None:
        b = as_tensor(b)
        out = out + b.data[None, :, None, None]
        parents = (x, w, b)

    def bwd(g):
        gf = g.reshape(bsz, cout, ho * wo)
        gw = np.matmul(gf, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.data.shape)
        gcols = np.matmul(w2.T, gf)
        if pointwise:
            gx = gcols.reshape(bsz, cin, h, wdt)
        else:
            gxp = backend.col2im(gcols, bsz, cin, h + 2 * padding, wdt + 2 * padding,
                                 k, stride, ho, wo)
            gx = gxp[:, :, padding:padding + h, padding:padding + wdt] if padding else gxp
            gx = np.ascontiguousarray(gx)
        if len(parents) == 3:
            return gx, gw, g.sum(axis=(0, 2, 3))
        return gx, gw

    return Tensor.from_op(np.ascontiguousarray(out), parents, "conv2d", bwd)


def conv_transpose2d(x, w, b=None, stride=1, padding=0):
    """Adjoint of conv2d with the same kernels: [B,Cout,H',W'] -> [B,Cin,H,W].

    Output padding is fixed at stride-1, so stride 2 exactly doubles the
    spatial dims and the adjoint identity with conv2d holds whenever the
    forward input size was divisible by the stride.
    """
    x, w = as_tensor(x), as_tensor(w)
    _conv_shape_checks(x.data, w.data)
    if x.data.shape[1] != w.data.shape[0]:
        raise DimensionError(
            f"conv_transpose2d input has {x.data.shape[1]} channels, kernels expect {w.data.shape[0]}")
    if stride not in (1, 2):
        raise DimensionError(f"conv_transpose2d supports stride 1 or 2, got {stride}")
    bsz, cout, hi, wi = x.data.shape
    _, cin, k, _ = w.data.shape
    h = (hi - 1) * stride + k - 2 * padding + (stride - 1)
    wdt = (wi - 1) * stride + k - 2 * padding + (stride - 1)
    hp, wp = h + 2 * padding, wdt + 2 * padding
    xd = np.ascontiguousarray(x.data)
    w2 = w.data.reshape(cout, cin * k * k)
    xf = xd.reshape(bsz, cout, hi * wi)
    cols = np.matmul(w2.T, xf)
    ypad = backend.col2im(cols, bsz, cin, hp, wp, k, stride, hi, wi)
    out = ypad[:, :, padding:padding + h, padding:padding + wdt] if padding else ypad
    out = np.ascontiguousarray(out)
    parents = (x, w)
    if b is not None:
        b = as_tensor(b)
        out = out + b.data[None, :, None, None]
        parents = (x, w, b)

    def bwd(g):
        gc = np.ascontiguousarray(g)
        gpad = np.pad(gc, ((0, 0), (0, 0), (padding, padding), (padding, padding))) \
            if padding else gc
        gcols = backend.im2col(gpad, k, stride, hi, wi)
        gx = np.matmul(w2, gcols).reshape(bsz, cout, hi, wi)
        gw = np.matmul(xf, gcols.transpose(0, 2, 1)).sum(axis=0).reshape(w.data.shape)
        if len(parents) == 3:
            return gx, gw, g.sum(axis=(0, 2, 3))
        return gx, gw

    return Tensor.from_op(out, parents, "conv_transpose2d", bwd)


def depthwise_conv3x3(x, w):
    """Per-channel 3x3 convolution, pad 1, stride 1. w: [C,3,3]."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.shape[1] != w.data.shape[0]:
        raise DimensionError(
            f"depthwise conv got {x.data.shape[1]} channels for {w.data.shape[0]} kernels")
    xp = np.pad(np.ascontiguousarray(x.data), ((0, 0), (0, 0), (1, 1), (1, 1)))
    wd = np.ascontiguousarray(w.data)
    out = backend.dw3x3_fwd(xp, wd)

    def bwd(g):
        gxp, gw = backend.dw3x3_bwd(xp, wd, np.ascontiguousarray(g))
        return np.ascontiguousarray(gxp[:, :, 1:-1, 1:-1]), gw

    return Tensor.from_op(out, (x, w), "depthwise_conv3x3", bwd)


def grid_warp(x, disp):
    """Bilinear warp of [B,C,H,W] by a pixel displacement field [B,2,H,W]."""
    x, disp = as_tensor(x), as_tensor(disp)
    if disp.data.shape[1] != 2 or x.data.shape[0] != disp.data.shape[0] \
            or x.data.shape[2:] != disp.data.shape[2:]:
        raise DimensionError(
            f"grid_warp feature {x.data.shape} and displacement {disp.data.shape} disagree")
    xd = np.ascontiguousarray(x.data)
    dd = np.ascontiguousarray(disp.data)
    out = backend.warp_fwd(xd, dd)

    def bwd(g):
        return backend.warp_bwd(xd, dd, np.ascontiguousarray(g))

    return Tensor.from_op(out, (x, disp), "grid_warp", bwd)


# ---------------------------------------------------------------------------
# spectral ops


def _check_pow2(h, w):
    for n in (h, w):
        if n < 2 or n & (n - 1):
            raise ConfigError(f"FFT requires power-of-two spatial dims, got {h}x{w}")


def fft2(a):
    """Unnormalized 2-d transform over the last two axes."""
    a = as_tensor(a)
    h, w = a.data.shape[-2:]
    _check_pow2(h, w)
    n = h * w
    real_input = not a.is_complex
    out = np.fft.fft2(a.data, axes=(-2, -1))
    if out.dtype != np.complex128:
        out = out.astype(np.complex64)

    def bwd(g):
        gx = (np.fft.ifft2(g, axes=(-2, -1)) * n).astype(np.complex64)
        if real_input:
            return (np.ascontiguousarray(gx.real).astype(np.float32),)
        return (gx,)

    return Tensor.from_op(out, (a,), "fft2", bwd)


def ifft2(a):
    """Normalized inverse of :func:`fft2`."""
    a = as_tensor(a)
    h, w = a.data.shape[-2:]
    _check_pow2(h, w)
    n = h * w
    out = np.fft.ifft2(a.data, axes=(-2, -1))
    if out.dtype != np.complex128:
        out = out.astype(np.complex64)

    def bwd(g):
        return ((np.fft.fft2(g, axes=(-2, -1)) / n).astype(np.complex64),)

    return Tensor.from_op(out, (a,), "ifft2", bwd)


def complex_mul(a, b):
    """Elementwise complex product; gradients use the Hermitian adjoint."""
    a, b = as_tensor(a), as_tensor(b)
    da, db = a.data, b.data

    def bwd(g):
        return (_unbroadcast(g * np.conj(db), da.shape),
                _unbroadcast(g * np.conj(da), db.shape))

    return Tensor.from_op(da * db, (a, b), "complex_mul", bwd)


def real_part(a):
    a = as_tensor(a)
    if not a.is_complex:
        raise UsageError("real_part expects a complex tensor")

    def bwd(g):
        return (g.astype(np.complex64),)

    return Tensor.from_op(np.ascontiguousarray(a.data.real), (a,), "real_part", bwd)
