"""Small parameterized layers shared by the model modules.

Convolution weights use fan-in-scaled uniform init (bound sqrt(3/fan_in),
i.e. unit-variance preserving for linear layers); biases start at zero.
"""

import numpy as np

from . import numerics as N
from .numerics import Tensor


def uniform_init(rng, shape, fan_in):
    bound = np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Conv2dLayer:
    def __init__(self, rng, cin, cout, k=3, stride=1, bias=True, zero_init=False):
        self.stride = stride
        self.padding = (k - 1) // 2
        if zero_init:
            w = np.zeros((cout, cin, k, k), dtype=np.float32)
        else:
            w = uniform_init(rng, (cout, cin, k, k), cin * k * k)
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True) if bias else None

    def __call__(self, x):
        return N.conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)

    def params(self, prefix):
        yield f"{prefix}.w", self.w
        if self.b is not None:
            yield f"{prefix}.b", self.b


class ConvTranspose2dLayer:
    """Upsampling counterpart; kernels are shaped [cin, cout, k, k]."""

    def __init__(self, rng, cin, cout, k=3, stride=2, bias=True):
        self.stride = stride
        self.padding = (k - 1) // 2
        w = uniform_init(rng, (cin, cout, k, k), cin * k * k)
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True) if bias else None

    def __call__(self, x):
        return N.conv_transpose2d(x, self.w, self.b, stride=self.stride, padding=self.padding)

    def params(self, prefix):
        yield f"{prefix}.w", self.w
        if self.b is not None:
            yield f"{prefix}.b", self.b


class DepthwiseConv3x3Layer:
    def __init__(self, rng, channels):
        self.w = Tensor(uniform_init(rng, (channels, 3, 3), 9), requires_grad=True)

    def __call__(self, x):
        return N.depthwise_conv3x3(x, self.w)

    def params(self, prefix):
        yield f"{prefix}.w", self.w


def collect_params(named_children):
    """Flatten [(name, component), ...] into an ordered name->Tensor dict."""
    out = {}
    for name, child in named_children:
        for pname, tensor in child.params(name):
            out[pname] = tensor
    return out
