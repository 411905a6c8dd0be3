"""Iterative convolutional-dictionary feature decoupling.

Images are lifted to 64-channel features, encoded into a three-level
sparse pyramid (64/96/128 channels at full/half/quarter resolution) by a
per-role dictionary codec, and refined over L weight-tied unfolding
rounds. Each round runs a proximal-gradient style update for the target,
reference and common codes in that order; reference-side updates align
common features onto the reference grid with a learned displacement field
and modulation map (OffsetNet). Decoded 64-channel maps come back out.
"""

import numpy as np

from . import numerics as N
from .errors import DimensionError
from .layers import Conv2dLayer, ConvTranspose2dLayer, DepthwiseConv3x3Layer, collect_params
from .numerics import Tensor


class SparsePyramid:
    """Per-scale sparse codes; level j halves resolution and widens channels."""

    __slots__ = ("levels",)

    def __init__(self, levels):
        self.levels = list(levels)
        batches = {t.shape[0] for t in self.levels}
        if len(batches) != 1:
            raise DimensionError(f"pyramid levels disagree on batch size: {sorted(batches)}")

    def __iter__(self):
        return iter(self.levels)

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, i):
        return self.levels[i]

    def shapes(self):
        return [tuple(t.shape) for t in self.levels]


class DictionaryCodec:
    """Analysis/synthesis convolution pair over a three-level pyramid.

    The encoder is one stride-1 stage followed by two stride-2 stages and
    keeps each stage's output as a pyramid level; the decoder mirrors the
    strided stages with transposed convolutions and sums the skip levels.
    """

    def __init__(self, rng, base=64, channels=(64, 96, 128)):
        c1, c2, c3 = channels
        self.e1 = Conv2dLayer(rng, base, c1, k=3, stride=1)
        self.e2 = Conv2dLayer(rng, c1, c2, k=3, stride=2)
        self.e3 = Conv2dLayer(rng, c2, c3, k=3, stride=2)
        self.d3 = ConvTranspose2dLayer(rng, c3, c2, k=3, stride=2)
        self.d2 = ConvTranspose2dLayer(rng, c2, c1, k=3, stride=2)

    def encode(self, f):
        h, w = f.shape[2], f.shape[3]
        if h % 4 or w % 4:
            raise DimensionError(f"codec needs dims divisible by 4, got {h}x{w}")
        l1 = self.e1(f)
        l2 = self.e2(l1)
        l3 = self.e3(l2)
        return SparsePyramid([l1, l2, l3])

    def decode(self, u):
        h2 = self.d3(u[2]) + u[1]
        return self.d2(h2) + u[0]

    def params(self, prefix):
        for name, layer in (("e1", self.e1), ("e2", self.e2), ("e3", self.e3),
                            ("d3", self.d3), ("d2", self.d2)):
            yield from layer.params(f"{prefix}.{name}")


def cdm_encode(f, codec):
    return codec.encode(f)


def cdm_decode(u, codec):
    return codec.decode(u)


class MultiscaleFeedForward:
    """Learned proximal operator: per level, pointwise -> depthwise 3x3 ->
    gate -> pointwise, with a residual connection."""

    def __init__(self, rng, channels=(64, 96, 128)):
        self.stages = []
        for c in channels:
            self.stages.append((
                Conv2dLayer(rng, c, c, k=1),
                DepthwiseConv3x3Layer(rng, c),
                Conv2dLayer(rng, c, c, k=1),
            ))

    def __call__(self, u):
        out = []
        for (pw1, dw, pw2), level in zip(self.stages, u):
            out.append(level + pw2(N.gelu(dw(pw1(level)))))
        return SparsePyramid(out)

    def params(self, prefix):
        for j, (pw1, dw, pw2) in enumerate(self.stages, 1):
            yield from pw1.params(f"{prefix}.l{j}.pw1")
            yield from dw.params(f"{prefix}.l{j}.dw")
            yield from pw2.params(f"{prefix}.l{j}.pw2")


class OffsetNet:
    """Lightweight two-level U-Net emitting a displacement field (2ch) and a
    modulation map (base channels). The trunk runs at half and quarter
    resolution to stay cheap; transposed-convolution heads come back to the
    full grid. The displacement head starts at zero so the initial warp is
    the identity."""

    def __init__(self, rng, base=64, width=16):
        self.e1 = Conv2dLayer(rng, 2 * base, width, k=3, stride=2)
        self.e2 = Conv2dLayer(rng, width, 2 * width, k=3, stride=2)
        self.d1 = ConvTranspose2dLayer(rng, 2 * width, width, k=3, stride=2)
        self.disp_head = ConvTranspose2dLayer(rng, width, 2, k=3, stride=2)
        self.disp_head.w.data[...] = 0.0
        self.mod_head = ConvTranspose2dLayer(rng, width, base, k=3, stride=2)

    def __call__(self, a, b):
        x = N.concat([a, b], axis=1)
        h1 = N.gelu(self.e1(x))
        h2 = N.gelu(self.e2(h1))
        u = N.gelu(self.d1(h2)) + h1
        return self.disp_head(u), self.mod_head(u)

    def params(self, prefix):
        for name, layer in (("e1", self.e1), ("e2", self.e2), ("d1", self.d1),
                            ("disp_head", self.disp_head), ("mod_head", self.mod_head)):
            yield from layer.params(f"{prefix}.{name}")


class StepSizes:
    """Learnable per-role step sizes for the unfolded updates."""

    def __init__(self, init=0.01):
        self.eta_x = Tensor(np.float32(init), requires_grad=True)
        self.eta_y = Tensor(np.float32(init), requires_grad=True)
        self.eta_c = Tensor(np.float32(init), requires_grad=True)

    def params(self, prefix):
        yield f"{prefix}.eta_x", self.eta_x
        yield f"{prefix}.eta_y", self.eta_y
        yield f"{prefix}.eta_c", self.eta_c


def _pyramid_step(u, du, eta, prox):
    stepped = [lu - eta * ld for lu, ld in zip(u, du)]
    return prox(SparsePyramid(stepped))


def _pyramid_sub(a, b):
    return [la - lb for la, lb in zip(a, b)]


class FeatureDecoupler:
    """The full decoupling module: init convs, per-role codecs and proximal
    networks, a shared OffsetNet and the learned step sizes."""

    def __init__(self, rng, base=64, channels=(64, 96, 128), eta_init=0.01, offnet_width=16):
        self.base = base
        self.conv_x = Conv2dLayer(rng, 1, base, k=3)
        self.conv_y = Conv2dLayer(rng, 1, base, k=3)
        self.conv_c = Conv2dLayer(rng, 2, base, k=3)
        self.codec_x = DictionaryCodec(rng, base, channels)
        self.codec_y = DictionaryCodec(rng, base, channels)
        self.codec_c = DictionaryCodec(rng, base, channels)
        self.prox_x = MultiscaleFeedForward(rng, channels)
        self.prox_y = MultiscaleFeedForward(rng, channels)
        self.prox_c = MultiscaleFeedForward(rng, channels)
        self.offnet = OffsetNet(rng, base, offnet_width)
        self.residual_proj = Conv2dLayer(rng, 2 * base, base, k=1)
        self.etas = StepSizes(eta_init)

    # -- stage operations ---------------------------------------------------

    def init_features(self, ixs, iy):
        if ixs.shape != iy.shape or ixs.shape[1] != 1:
            raise DimensionError(
                f"expected matching 1-channel images, got {ixs.shape} and {iy.shape}")
        fx0 = self.conv_x(ixs)
        fy0 = self.conv_y(iy)
        fc0 = self.conv_c(N.concat([ixs, iy], axis=1))
        return fx0, fy0, fc0

    def update_target(self, ux, uc, dec_c=None):
        if dec_c is None:
            dec_c = self.codec_c.decode(uc)
        fxc = self.codec_x.decode(ux) + dec_c
        du = _pyramid_sub(ux, self.codec_x.encode(fxc))
        return _pyramid_step(ux, du, self.etas.eta_x, self.prox_x)

    def update_reference(self, uy, uc, dec_c=None):
        if dec_c is None:
            dec_c = self.codec_c.decode(uc)
        dec_y = self.codec_y.decode(uy)
        disp, mod = self.offnet(dec_c, dec_y)
        fyc = N.grid_warp(dec_c, disp) * mod
        du = _pyramid_sub(uy, self.codec_y.encode(dec_y + fyc))
        return _pyramid_step(uy, du, self.etas.eta_y, self.prox_y)

    def update_common(self, uc, fx_new, fx_old, fy_new, fy_old, dec_c=None):
        ry = fy_new - fy_old
        rx = fx_new - fx_old
        disp, mod = self.offnet(ry, rx)
        residual = N.concat([N.grid_warp(ry, disp) * mod, rx], axis=1)
        if dec_c is None:
            dec_c = self.codec_c.decode(uc)
        fcr = dec_c - self.residual_proj(residual)
        du = _pyramid_sub(uc, self.codec_c.encode(fcr))
        return _pyramid_step(uc, du, self.etas.eta_c, self.prox_c)

    def run(self, ixs, iy, iterations=3):
        fx, fy, fc0 = self.init_features(ixs, iy)
        ux = self.codec_x.encode(fx)
        uy = self.codec_y.encode(fy)
        uc = self.codec_c.encode(fc0)
        for _ in range(iterations):
            dec_c = self.codec_c.decode(uc)
            ux = self.update_target(ux, uc, dec_c=dec_c)
            uy = self.update_reference(uy, uc, dec_c=dec_c)
            fx_new = self.codec_x.decode(ux)
            fy_new = self.codec_y.decode(uy)
            uc = self.update_common(uc, fx_new, fx, fy_new, fy, dec_c=dec_c)
            fx, fy = fx_new, fy_new
        return fx, fy, self.codec_c.decode(uc)

    def params(self):
        named = [
            ("init.conv_x", self.conv_x), ("init.conv_y", self.conv_y),
            ("init.conv_c", self.conv_c),
            ("codec_x", self.codec_x), ("codec_y", self.codec_y), ("codec_c", self.codec_c),
            ("prox_x", self.prox_x), ("prox_y", self.prox_y), ("prox_c", self.prox_c),
            ("offnet", self.offnet), ("residual_proj", self.residual_proj),
            ("step", self.etas),
        ]
        return collect_params(named)
