"""Training losses: consistency, decoupling (a differentiable dependence
surrogate) and reconstruction, plus an evaluation-only histogram mutual
information estimate used for reporting decoupling trends."""

import dataclasses

import numpy as np

from . import numerics as N
from .layers import Conv2dLayer, collect_params


@dataclasses.dataclass
class LossWeights:
    lambda_y: float = 0.01
    lambda1: float = 1.0
    lambda2: float = 0.1


class ProjectionHead:
    """Shared 1x1 projection from 64-channel features to a 1-channel image,
    used by the consistency loss on both the target and reference sides."""

    def __init__(self, rng, base=64):
        self.proj = Conv2dLayer(rng, base, 1, k=1)

    def __call__(self, f):
        return self.proj(f)

    def params(self):
        return collect_params([("head", self.proj)])


def _l1(a, b):
    return N.mean(N.abs_(a - b))


def consistency_loss(ix_hr, iy, fx, fy, fc, head, lambda_y=0.01):
    """Mean L1 between each image and the projected sum of its feature pair."""
    target_term = _l1(ix_hr, head(fx + fc))
    reference_term = _l1(iy, head(fc + fy))
    return target_term + np.float32(lambda_y) * reference_term


def mi_surrogate(a, b, eps=1e-8):
    """Differentiable dependence score in [0,1).

    Mean over channels of the squared Pearson correlation between the
    per-channel flattened maps of ``a`` and ``b``: 0 for uncorrelated
    features, 1 for exact (affine) linear dependence.
    """
    c = a.shape[1]
    af = N.reshape(N.transpose(a, (1, 0, 2, 3)), (c, a.size // c))
    bf = N.reshape(N.transpose(b, (1, 0, 2, 3)), (c, b.size // c))
    ac = af - N.mean(af, axis=1, keepdims=True)
    bc = bf - N.mean(bf, axis=1, keepdims=True)
    cov = N.mean(ac * bc, axis=1)
    va = N.mean(ac * ac, axis=1)
    vb = N.mean(bc * bc, axis=1)
    r2 = (cov * cov) / ((va + np.float32(eps)) * (vb + np.float32(eps)))
    return N.mean(r2)


def decoupling_loss(fc, fx, fy):
    return mi_surrogate(fc, fx) + mi_surrogate(fc, fy)


def recon_loss(pred, target):
    return _l1(pred, target)


def total_loss(l_rec, l_fc, l_mi, lambda1=1.0, lambda2=0.1):
    return l_rec + np.float32(lambda1) * l_fc + np.float32(lambda2) * l_mi


def histogram_mi(a, b, bins=32):
    """Evaluation-only mutual information, averaged over channels.

    Joint 2-d histograms (``bins`` per axis, each array normalized to its
    own min-max range) give plug-in MI in nats. Zero for any channel whose
    values are constant. Accepts numpy arrays of shape [B,C,H,W] or [C,H,W].
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 3:
        a, b = a[None], b[None]
    c = a.shape[1]
    total = 0.0
    for ch in range(c):
        av = a[:, ch].ravel()
        bv = b[:, ch].ravel()
        if av.max() == av.min() or bv.max() == bv.min():
            continue
        joint, _, _ = np.histogram2d(av, bv, bins=bins)
        p = joint / joint.sum()
        px = p.sum(axis=1, keepdims=True)
        py = p.sum(axis=0, keepdims=True)
        nz = p > 0
        total += float((p[nz] * np.log(p[nz] / (px @ py)[nz])).sum())
    return total / c
