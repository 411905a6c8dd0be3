"""Kernel backend selection.

The compiled Cython extension is preferred when present; a pure-NumPy
fallback keeps the package functional without it. Selection happens at
import time and honours the ``CDDPE_BACKEND`` environment variable
(``auto`` | ``cython`` | ``python``); :func:`use` switches at runtime,
which the benchmark and parity tests rely on.
"""

import os

from ..errors import ConfigError
from . import py_kernels

try:
    from . import _kernels as _compiled
except ImportError:
    _compiled = None

_impl = None
_name = None


def available():
    names = ["python"]
    if _compiled is not None:
        names.insert(0, "cython")
    return names


def use(name):
    """Select the active kernel implementation by name."""
    global _impl, _name
    if name == "auto":
        name = "cython" if _compiled is not None else "python"
    if name == "cython":
        if _compiled is None:
            raise ConfigError("compiled kernel extension is not available")
        _impl = _compiled
    elif name == "python":
        _impl = py_kernels
    else:
        raise ConfigError(f"unknown backend {name!r}; expected auto, cython or python")
    _name = name
    return _name


def active():
    return _name


use(os.environ.get("CDDPE_BACKEND", "auto"))


def _for(arr):
    # the compiled kernels are float32-only; anything else (the float64
    # verification shadow) takes the NumPy path
    import numpy as np
    return _impl if arr.dtype == np.float32 else py_kernels


def im2col(xp, k, stride, ho, wo):
    return _for(xp).im2col(xp, k, stride, ho, wo)


def col2im(cols, b, c, hp, wp, k, stride, ho, wo):
    return _for(cols).col2im(cols, b, c, hp, wp, k, stride, ho, wo)


def dw3x3_fwd(xp, w):
    return _for(xp).dw3x3_fwd(xp, w)


def dw3x3_bwd(xp, w, gy):
    return _for(xp).dw3x3_bwd(xp, w, gy)


def warp_fwd(x, disp):
    return _for(x).warp_fwd(x, disp)


def warp_bwd(x, disp, gy):
    return _for(x).warp_bwd(x, disp, gy)
