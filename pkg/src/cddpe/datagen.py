"""Synthetic paired-contrast phantoms, degradation operators and tensor IO.

Both contrasts of a phantom share one random geometry (nested ellipses plus
a few convex polygons) and one fine texture field; they differ only in the
per-region intensity lookup, which roughly inverts between contrasts. The
reference contrast can optionally be warped by a smooth random displacement
to simulate misalignment.

Degradations: ``spatial`` (Gaussian pre-blur then bicubic decimation) and
``kspace`` (central frequency-block truncation). Bicubic resampling uses the
Catmull-Rom kernel (a=-0.5) with clamp-to-edge borders and center-aligned
grids.
"""

import dataclasses
import os
import struct

import numpy as np

from .errors import ConfigError, FormatError
from .numerics import Tensor

_MAGIC = b"CDT1"


# ---------------------------------------------------------------------------
# bicubic resampling (Catmull-Rom, a = -0.5), clamp-to-edge


def _cubic_weights(t):
    a = -0.5
    t = np.asarray(t, dtype=np.float64)
    w = np.empty((t.size, 4), dtype=np.float64)
    for tap, off in enumerate((-1.0, 0.0, 1.0, 2.0)):
        d = np.abs(t - off)
        w[:, tap] = np.where(
            d <= 1.0,
            (a + 2.0) * d**3 - (a + 3.0) * d**2 + 1.0,
            np.where(d < 2.0, a * d**3 - 5.0 * a * d**2 + 8.0 * a * d - 4.0 * a, 0.0),
        )
    return w


def _resize_matrix(n_in, n_out):
    """Dense [n_out, n_in] interpolation matrix for center-aligned resizing."""
    x = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    base = np.floor(x).astype(np.int64)
    w = _cubic_weights(x - base)
    m = np.zeros((n_out, n_in), dtype=np.float64)
    for tap in range(4):
        idx = np.clip(base - 1 + tap, 0, n_in - 1)
        np.add.at(m, (np.arange(n_out), idx), w[:, tap])
    return m.astype(np.float32)


def bicubic_resize(img, out_h, out_w):
    """Catmull-Rom resize of a 2-d array (separable, clamp-to-edge)."""
    img = np.asarray(img, dtype=np.float32)
    mr = _resize_matrix(img.shape[0], out_h)
    mc = _resize_matrix(img.shape[1], out_w)
    return mr @ img @ mc.T


def gaussian_blur(img, sigma):
    """Separable Gaussian blur with clamp-to-edge padding."""
    img = np.asarray(img, dtype=np.float32)
    if sigma <= 0:
        return img.copy()
    radius = max(1, int(np.ceil(3.0 * sigma)))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    k = (k / k.sum()).astype(np.float32)
    pad = np.pad(img, ((radius, radius), (0, 0)), mode="edge")
    rows = sum(k[i] * pad[i:i + img.shape[0]] for i in range(k.size))
    pad = np.pad(rows, ((0, 0), (radius, radius)), mode="edge")
    return sum(k[i] * pad[:, i:i + img.shape[1]] for i in range(k.size))


# ---------------------------------------------------------------------------
# phantom generation


@dataclasses.dataclass
class PhantomSpec:
    resolution: int = 32
    ellipses: tuple = (3, 6)        # inclusive count range
    polygons: tuple = (1, 3)
    texture_amp: float = 0.03
    misalign: float = 0.0           # pixels
    # Per-contrast intensity maps over the tissue parameter t in [0,1]:
    # contrast x brightens with t, contrast y darkens (rough inversion).
    lut_x: tuple = (0.15, 0.95)
    lut_y: tuple = (0.9, 0.1)

    def validate(self):
        r = self.resolution
        if r < 16 or r & (r - 1):
            raise ConfigError(f"phantom resolution must be a power of two >= 16, got {r}")
        return self


def _rasterize_regions(spec, rng):
    n = spec.resolution
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    yy = (yy + 0.5) / n
    xx = (xx + 0.5) / n
    regions = np.zeros((n, n), dtype=np.int32)
    rid = 0

    n_ell = rng.integers(spec.ellipses[0], spec.ellipses[1] + 1)
    for i in range(n_ell):
        rid += 1
        shrink = 0.9 ** i
        cx, cy = rng.uniform(0.3, 0.7, size=2)
        ax = rng.uniform(0.12, 0.42) * shrink
        ay = rng.uniform(0.12, 0.42) * shrink
        theta = rng.uniform(0.0, np.pi)
        dx, dy = xx - cx, yy - cy
        u = dx * np.cos(theta) + dy * np.sin(theta)
        v = -dx * np.sin(theta) + dy * np.cos(theta)
        regions[(u / ax) ** 2 + (v / ay) ** 2 <= 1.0] = rid

    n_poly = rng.integers(spec.polygons[0], spec.polygons[1] + 1)
    for _ in range(n_poly):
        rid += 1
        cx, cy = rng.uniform(0.3, 0.7, size=2)
        k = rng.integers(3, 6)
        ang = np.sort(rng.uniform(0.0, 2.0 * np.pi, size=k))
        rad = rng.uniform(0.06, 0.2, size=k)
        px = cx + rad * np.cos(ang)
        py = cy + rad * np.sin(ang)
        inside = np.ones((n, n), dtype=bool)
        for j in range(k):
            x1, y1 = px[j], py[j]
            x2, y2 = px[(j + 1) % k], py[(j + 1) % k]
            inside &= (xx - x1) * (y2 - y1) - (yy - y1) * (x2 - x1) >= 0.0
        regions[inside] = rid

    return regions, rid


def _smooth_field(n, rng, sigma=2.0):
    return gaussian_blur(rng.standard_normal((n, n)).astype(np.float32), sigma)


def _warp_image(img, disp_x, disp_y):
    """Plain (non-differentiable) bilinear warp with border clamping."""
    h, w = img.shape
    sx = np.arange(w, dtype=np.float32)[None, :] + disp_x
    sy = np.arange(h, dtype=np.float32)[:, None] + disp_y
    x0 = np.floor(sx)
    y0 = np.floor(sy)
    fx, fy = sx - x0, sy - y0
    x0i = np.clip(x0.astype(np.int64), 0, w - 1)
    x1i = np.clip(x0.astype(np.int64) + 1, 0, w - 1)
    y0i = np.clip(y0.astype(np.int64), 0, h - 1)
    y1i = np.clip(y0.astype(np.int64) + 1, 0, h - 1)
    top = (1 - fx) * img[y0i, x0i] + fx * img[y0i, x1i]
    bot = (1 - fx) * img[y1i, x0i] + fx * img[y1i, x1i]
    return ((1 - fy) * top + fy * bot).astype(np.float32)


def gen_phantom(spec, seed, return_regions=False):
    """Generate one aligned contrast pair; both images are [1,H,W] in [0,1]."""
    spec.validate()
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    regions, n_regions = _rasterize_regions(spec, rng)

    t = np.concatenate(([0.0], rng.uniform(0.05, 1.0, size=n_regions)))
    lut_x = spec.lut_x[0] + (spec.lut_x[1] - spec.lut_x[0]) * t
    lut_y = spec.lut_y[0] + (spec.lut_y[1] - spec.lut_y[0]) * t
    lut_x[0] = 0.02  # air background, dark in both contrasts
    lut_y[0] = 0.02
    ix = lut_x[regions].astype(np.float32)
    iy = lut_y[regions].astype(np.float32)

    if spec.texture_amp > 0:
        tex = _smooth_field(spec.resolution, rng, sigma=1.0)
        tex = tex / max(float(tex.std()), 1e-6) * spec.texture_amp
        ix = ix + tex
        iy = iy + tex

    if spec.misalign > 0:
        dx = _smooth_field(spec.resolution, rng, sigma=3.0)
        dy = _smooth_field(spec.resolution, rng, sigma=3.0)
        scale = spec.misalign / max(float(np.abs(dx).max()), float(np.abs(dy).max()), 1e-6)
        iy = _warp_image(iy, dx * scale, dy * scale)

    ix = np.clip(ix, 0.0, 1.0)[None]
    iy = np.clip(iy, 0.0, 1.0)[None]
    if return_regions:
        return ix, iy, regions
    return ix, iy


# ---------------------------------------------------------------------------
# degradation and upsampling


def degrade_spatial(img, s):
    """Gaussian pre-blur (sigma = 0.5*s) then bicubic decimation by s,
    clamped to [0,1]."""
    img2 = np.asarray(img, dtype=np.float32)
    squeeze = img2.ndim == 3
    if squeeze:
        img2 = img2[0]
    h, w = img2.shape
    blurred = gaussian_blur(img2, 0.5 * s)
    lr = bicubic_resize(blurred, h // s, w // s)
    lr = np.clip(lr, 0.0, 1.0)
    return lr[None] if squeeze else lr


def _kept_freqs(n, ns):
    """Frequency indices of the centered ns-wide block in an n-point axis."""
    f = np.arange(-(ns // 2), ns - ns // 2)
    return np.mod(f, n)


def degrade_kspace(img, s):
    """Retain the central (H/s)x(W/s) frequency block; inverse-transform at
    the small size, take the real part and rescale by 1/s^2. Not clamped, so
    band-pass behaviour is exact for analytic probes."""
    img2 = np.asarray(img, dtype=np.float32)
    squeeze = img2.ndim == 3
    if squeeze:
        img2 = img2[0]
    h, w = img2.shape
    hs, ws = h // s, w // s
    spec = np.fft.fft2(img2)
    small = spec[np.ix_(_kept_freqs(h, hs), _kept_freqs(w, ws))]
    # undo the fftshift-style reordering used to gather the block
    small = np.roll(small, (-(hs // 2), -(ws // 2)), axis=(0, 1))
    lr = (np.fft.ifft2(small).real / (s * s)).astype(np.float32)
    return lr[None] if squeeze else lr


def kspace_project(img, s):
    """Orthogonal low-frequency projection at full size: zero out every
    frequency outside the symmetric band |f| <= H/(2s) - 1 on both axes."""
    img2 = np.asarray(img, dtype=np.float32)
    squeeze = img2.ndim == 3
    if squeeze:
        img2 = img2[0]
    h, w = img2.shape
    spec = np.fft.fft2(img2)
    fy = np.fft.fftfreq(h, d=1.0 / h).astype(np.int64)
    fx = np.fft.fftfreq(w, d=1.0 / w).astype(np.int64)
    keep = (np.abs(fy)[:, None] <= h // (2 * s) - 1) & (np.abs(fx)[None, :] <= w // (2 * s) - 1)
    out = np.fft.ifft2(np.where(keep, spec, 0.0)).real.astype(np.float32)
    return out[None] if squeeze else out


def upsample(img, s):
    """Bicubic interpolation back to the full resolution, clamped to [0,1]."""
    img2 = np.asarray(img, dtype=np.float32)
    squeeze = img2.ndim == 3
    if squeeze:
        img2 = img2[0]
    h, w = img2.shape
    up = np.clip(bicubic_resize(img2, h * s, w * s), 0.0, 1.0)
    return up[None] if squeeze else up


# ---------------------------------------------------------------------------
# sample pairs and dataset layout


@dataclasses.dataclass
class SamplePair:
    hr_x: np.ndarray     # [1,H,W] HR target
    hr_y: np.ndarray     # [1,H,W] HR reference (different contrast)
    lr_x: np.ndarray     # [1,H/s,W/s] degraded target
    up_x: np.ndarray     # [1,H,W] interpolated degraded target
    seed: int = 0
    scale: int = 4
    degradation: str = "spatial"


def make_pair(spec, scale, degradation, seed):
    if scale not in (2, 4):
        raise ConfigError(f"scale must be 2 or 4, got {scale}")
    if degradation not in ("spatial", "kspace"):
        raise ConfigError(f"degradation must be 'spatial' or 'kspace', got {degradation!r}")
    hr_x, hr_y = gen_phantom(spec, seed)
    if degradation == "spatial":
        lr = degrade_spatial(hr_x, scale)
    else:
        lr = np.clip(degrade_kspace(hr_x, scale), 0.0, 1.0)
    up = upsample(lr, scale)
    return SamplePair(hr_x, hr_y, lr.astype(np.float32), up.astype(np.float32),
                      seed=seed, scale=scale, degradation=degradation)


def pair_seed(base_seed, index):
    """Deterministic per-sample stream: derived from (seed, index)."""
    return int(np.random.SeedSequence((base_seed, index)).generate_state(1)[0])


# ---------------------------------------------------------------------------
# tensor container ("CDT1")


def tensor_to_bytes(t):
    """Encode a tensor (or ndarray) in the CDT1 container (little-endian)."""
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    is_complex = data.dtype == np.complex64 or np.iscomplexobj(data)
    data = np.asarray(data, dtype=np.complex64 if is_complex else np.float32)
    if not data.flags.c_contiguous:
        # note: ascontiguousarray would promote 0-d scalars to 1-d
        data = np.ascontiguousarray(data)
    if data.ndim > 255:
        raise FormatError(f"rank {data.ndim} exceeds container limit")
    for d in data.shape:
        if d >= 2**32:
            raise FormatError(f"dimension {d} overflows the container's u32 dims")
    payload = data.view(np.float32) if is_complex else data
    return b"".join([
        _MAGIC,
        struct.pack("<BB", 1 if is_complex else 0, data.ndim),
        struct.pack(f"<{data.ndim}I", *data.shape),
        payload.astype("<f4", copy=False).tobytes(),
    ])


def save_tensor(path, t):
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(t))


def load_tensor(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    return tensor_from_bytes(blob)


def tensor_from_bytes(blob):
    if len(blob) < 6 or blob[:4] != _MAGIC:
        raise FormatError("bad magic: not a CDT1 tensor container")
    flag, rank = struct.unpack_from("<BB", blob, 4)
    if flag not in (0, 1):
        raise FormatError(f"unknown complex flag {flag}")
    off = 6
    if len(blob) < off + 4 * rank:
        raise FormatError("truncated container: dims missing")
    dims = struct.unpack_from(f"<{rank}I", blob, off)
    off += 4 * rank
    count = 1
    for d in dims:
        count *= d
    floats = count * (2 if flag else 1)
    if len(blob) != off + 4 * floats:
        raise FormatError(
            f"truncated container: expected {4 * floats} payload bytes, got {len(blob) - off}")
    flat = np.frombuffer(blob, dtype="<f4", offset=off).astype(np.float32)
    if flag:
        flat = flat.view(np.complex64)
    return Tensor(flat.reshape(dims))


_PAIR_FILES = ("hr_x", "hr_y", "lr_x", "up_x")


def save_pair(directory, pair):
    os.makedirs(directory, exist_ok=True)
    for name in _PAIR_FILES:
        save_tensor(os.path.join(directory, f"{name}.cdt"), getattr(pair, name))
    with open(os.path.join(directory, "meta.txt"), "w", encoding="utf-8") as fh:
        fh.write(f"seed = {pair.seed}\nscale = {pair.scale}\ndegradation = {pair.degradation}\n")


def load_pair(directory):
    arrays = {}
    for name in _PAIR_FILES:
        arrays[name] = load_tensor(os.path.join(directory, f"{name}.cdt")).data
    meta = {}
    with open(os.path.join(directory, "meta.txt"), "r", encoding="utf-8") as fh:
        for line in fh:
            if "=" in line:
                key, value = line.split("=", 1)
                meta[key.strip()] = value.strip()
    return SamplePair(arrays["hr_x"], arrays["hr_y"], arrays["lr_x"], arrays["up_x"],
                      seed=int(meta.get("seed", 0)), scale=int(meta.get("scale", 0)),
                      degradation=meta.get("degradation", "spatial"))


def synth_dataset(out_dir, n, spec, scale, degradation, base_seed):
    """Write n pairs under out_dir/pairs/NNNN/; returns the pair directories."""
    pairs_dir = os.path.join(out_dir, "pairs")
    os.makedirs(pairs_dir, exist_ok=True)
    written = []
    for i in range(n):
        pair = make_pair(spec, scale, degradation, pair_seed(base_seed, i))
        pdir = os.path.join(pairs_dir, f"{i:04d}")
        save_pair(pdir, pair)
        written.append(pdir)
    return written


def load_dataset(data_dir):
    if not os.path.isdir(data_dir):
        raise FormatError(f"dataset directory not found: {data_dir}")
    pairs_dir = os.path.join(data_dir, "pairs")
    root = pairs_dir if os.path.isdir(pairs_dir) else data_dir
    subdirs = sorted(
        os.path.join(root, d) for d in os.listdir(root)
        if os.path.isdir(os.path.join(root, d)))
    if not subdirs:
        raise FormatError(f"no sample pairs found under {data_dir}")
    return [load_pair(d) for d in subdirs]
