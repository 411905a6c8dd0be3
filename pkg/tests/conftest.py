import os

# Single-threaded BLAS: faster for this workload's small matmuls and keeps
# timing stable. Must be set before numpy loads.
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")

import numpy as np
import pytest


def fd_grad(f, arr, h=1e-3):
    """Central finite differences of the scalar ``f()`` w.r.t. every entry
    of ``arr`` (perturbed in place). Independent oracle for backward rules."""
    g = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def max_rel_err(analytic, numeric, floor=1e-3):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def assert_fd_close(analytic, numeric, tol=1e-3, resolve_frac=0.5, noise_frac=5e-3, label=""):
    """Gradient agreement under float32 finite differences (step 1e-3).

    Entries at or above ``resolve_frac`` of the dominant gradient magnitude
    must agree to ``tol`` relative error; smaller entries sit below the
    float32 FD noise floor and are held to an absolute noise bound instead.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    gmax = max(np.abs(a).max(), np.abs(n).max(), 1e-12)
    mag = np.maximum(np.abs(a), np.abs(n))
    resolved = mag >= resolve_frac * gmax
    assert resolved.any(), f"{label}: no resolvable gradient entries"
    rel = np.abs(a[resolved] - n[resolved]) / mag[resolved]
    assert rel.max() < tol, f"{label}: max relative error {rel.max():.2e} on resolvable entries"
    absdiff = np.abs(a - n).max()
    bound = noise_frac * max(gmax, 1.0)
    assert absdiff <= bound, f"{label}: absolute deviation {absdiff:.2e} exceeds noise bound {bound:.2e}"


def fd_probe_topk(f, leaf, k=3, h=1e-3, tol=1e-3):
    """Probe the k largest-gradient entries of ``leaf`` with central finite
    differences against the recorded gradient. ``f()`` rebuilds the loss
    from the current leaf buffers; ``leaf.grad`` must already be populated.

    Quotients run under the engine's float64 forward shadow (noise-free for
    the probed 32-bit values) with one Richardson refinement; the step pair
    descends adaptively when an L1 kink sits inside the probe window.
    """
    from cddpe.numerics import float64_shadow, no_grad

    view = leaf.data.view(np.float32) if leaf.data.dtype == np.complex64 else leaf.data
    gview = leaf.grad.view(np.float32) if leaf.grad.dtype == np.complex64 else leaf.grad
    flat = view.reshape(-1)
    gflat = gview.reshape(-1)

    def quotient(i, step):
        saved = flat[i]
        flat[i] = saved + np.float32(step)
        hi = float(flat[i])
        with no_grad(), float64_shadow():
            fp = f()
        flat[i] = saved - np.float32(step)
        lo = float(flat[i])
        with no_grad(), float64_shadow():
            fm = f()
        flat[i] = saved
        return (fp - fm) / (hi - lo)

    order = np.argsort(-np.abs(gflat), kind="stable")[:k]
    worst = 0.0
    for i in order:
        numeric = None
        for level in range(1, 5):
            step = h / (2.0 ** level)
            d_a = quotient(i, step)
            d_b = quotient(i, 0.5 * step)
            numeric = (4.0 * d_b - d_a) / 3.0
            if abs(d_a - d_b) <= 5e-4 * max(abs(d_b), 1e-3):
                break
        analytic = float(gflat[i])
        denom = max(abs(analytic), abs(numeric))
        if denom < 1e-4:
            continue
        worst = max(worst, abs(analytic - numeric) / denom)
    assert worst < tol, f"finite-difference probe failed: {worst:.2e}"
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
