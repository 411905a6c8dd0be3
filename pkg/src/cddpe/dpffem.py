"""Dual-prompt mixture-of-experts fusion head.

The reference representation (reference + common features) is modulated in
the frequency domain by a learnable complex prototype; the resulting
attention map gates the target representation. A learnable routing matrix
maps the flattened gated features to expert logits; the top-K experts are
evaluated (scaled by their routing weight on the way in and out) and summed
into the reconstructed image.
"""

import numpy as np

from . import numerics as N
from .errors import ConfigError, DimensionError
from .layers import Conv2dLayer, collect_params, uniform_init
from .numerics import Tensor


class PromptBank:
    """Learnable frequency prototype (complex, [C,H,W]) and routing matrix
    ([C*H*W, E]). Both are bound to the configured training resolution."""

    def __init__(self, rng, channels, height, width, experts):
        self.freq = Tensor(np.ones((channels, height, width), dtype=np.complex64),
                           requires_grad=True)
        flat = channels * height * width
        self.routing = Tensor(uniform_init(rng, (flat, experts), flat), requires_grad=True)

    def params(self, prefix):
        yield f"{prefix}.freq", self.freq
        yield f"{prefix}.routing", self.routing


class Expert:
    """One reconstruction branch: 128-channel features to a 1-channel image."""

    def __init__(self, rng, cin, width=16):
        self.c1 = Conv2dLayer(rng, cin, width, k=3)
        self.c2 = Conv2dLayer(rng, width, 1, k=3)

    def __call__(self, x):
        return self.c2(N.gelu(self.c1(x)))

    def params(self, prefix):
        yield from self.c1.params(f"{prefix}.c1")
        yield from self.c2.params(f"{prefix}.c2")


def build_representations(fx, fy, fc):
    """Stack reference (fy|fc) and target (fx|fc) representations on channels."""
    for name, t in (("fx", fx), ("fy", fy), ("fc", fc)):
        if t.shape[2:] != fx.shape[2:] or t.shape[1] != fx.shape[1]:
            raise DimensionError(f"feature {name} shape {t.shape} mismatches {fx.shape}")
    fr = N.concat([fy, fc], axis=1)
    ft = N.concat([fx, fc], axis=1)
    return fr, ft


class FusionHead:
    def __init__(self, rng, resolution, base=64, experts=4, top_k=2, expert_width=16):
        self.resolution = resolution
        self.experts_n = experts
        self.top_k = top_k
        cin = 2 * base
        self.prompts = PromptBank(rng, cin, resolution, resolution, experts)
        self.attn_conv = Conv2dLayer(rng, cin, cin, k=3)
        self.experts = [Expert(rng, cin, expert_width) for _ in range(experts)]

    def _check_resolution(self, t):
        c, h, w = self.prompts.freq.shape
        if t.shape[1] != c or t.shape[2] != h or t.shape[3] != w:
            raise ConfigError(
                f"frequency prompt P_F and routing prompt P_R are bound to "
                f"{c}x{h}x{w} features; got {tuple(t.shape[1:])}")

    def frequency_attention(self, fr):
        """Spectrum-modulated attention map in (0,1), same shape as fr."""
        self._check_resolution(fr)
        spectrum = N.fft2(fr)
        modulated = N.complex_mul(spectrum, self.prompts.freq)
        spatial = N.real_part(N.ifft2(modulated))
        return N.sigmoid(self.attn_conv(spatial))

    @staticmethod
    def enhance(ft, vy):
        return ft * vy + ft

    def route(self, ft_enh):
        """Routing weights over experts: exactly top_k nonzeros per sample."""
        self._check_resolution(ft_enh)
        b = ft_enh.shape[0]
        flat = N.reshape(ft_enh, (b, ft_enh.size // b))
        logits = N.matmul(flat, self.prompts.routing)
        idx, masked = N.topk_select(logits, self.top_k)
        return idx, N.softmax(masked, axis=-1)

    def fuse_experts(self, ft_enh, weights):
        """Weighted sum of the selected experts; unselected ones never run.

        Each selected expert sees its input scaled by the routing weight and
        its output scaled by it again. Contributions are reduced in
        expert-index order.
        """
        b = ft_enh.shape[0]
        out = None
        w_np = weights.data
        for i, expert in enumerate(self.experts):
            rows = np.flatnonzero(w_np[:, i] > 0.0)
            if rows.size == 0:
                continue
            w_col = N.narrow(weights, 1, i, 1)
            w_sel = N.reshape(N.batch_gather(w_col, rows), (rows.size, 1, 1, 1))
            x_sel = N.batch_gather(ft_enh, rows)
            y = expert(x_sel * w_sel) * w_sel
            contrib = N.batch_scatter(y, rows, b)
            out = contrib if out is None else out + contrib
        return out

    def run(self, fx, fy, fc):
        """Full fusion pass; output is the unclamped reconstruction."""
        fr, ft = build_representations(fx, fy, fc)
        vy = self.frequency_attention(fr)
        ft_enh = self.enhance(ft, vy)
        _, weights = self.route(ft_enh)
        return self.fuse_experts(ft_enh, weights)

    def params(self):
        named = [("prompts", self.prompts), ("attn_conv", self.attn_conv)]
        named += [(f"expert{i}", e) for i, e in enumerate(self.experts)]
        return collect_params(named)
