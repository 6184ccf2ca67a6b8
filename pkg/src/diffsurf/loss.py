"""Scene-adaptive training losses.

Per-patch sigmoid weights decide, from the observed RGB alone, how much each
LiDAR-zone-sized image patch trusts the photometric terms versus the transient
term: textured (high-variance) patches lean on RGB, flat or noisy ones lean on
the histogram. On top of that: an L1+SSIM photometric loss, a KL transient
loss, a depth/normal consistency regularizer, and the sparse-point L1 baseline.

All loss functions are pure maps from rendered tensors + ground-truth arrays to
scalar Tensors; rendering and batching live elsewhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .core import CameraModel

VAR_FLOOR = 1e-6          # variance floor guarding the patch SNR division
SNR_CAP = 1e3             # cap on mu/var before it enters the sigmoid threshold
WEIGHT_CLAMP = 1e-12      # keeps w_p strictly inside (0, 1)
DEFAULT_K = 50.0
DEFAULT_A = 0.01
DEFAULT_B = 0.002
DEFAULT_LAMBDA_SSIM = 0.2
DEFAULT_LAMBDA_REG = 0.1
KL_FLOOR = 1e-8
DEPTH_DISCONTINUITY = 0.05  # meters; 3x3 windows spanning more are skipped
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

MODES = ("fusion", "rgb-only", "diffuse-only", "sparse-baseline", "sparse-only",
         "fusion-no-adaptive")

# loss terms each mode activates
_ACTIVE = {
    "fusion": ("rgb", "transient", "reg"),
    "rgb-only": ("rgb", "reg"),
    "diffuse-only": ("transient", "reg"),
    "sparse-baseline": ("rgb", "sparse", "reg"),
    "sparse-only": ("sparse", "reg"),
    "fusion-no-adaptive": ("rgb", "transient", "reg"),
}


def mode_terms(mode: str) -> tuple:
    """Loss terms a mode activates; unknown modes raise ValueError."""
    if mode not in _ACTIVE:
        raise ValueError(f"unknown loss mode {mode!r}; choose from {MODES}")
    return _ACTIVE[mode]


# -- patch weights -------------------------------------------------------------------


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def luminance(rgb: np.ndarray) -> np.ndarray:
    """Channel-mean intensity in [0, 1]."""
    rgb = np.asarray(rgb, dtype=np.float64)
    return rgb.mean(axis=-1) if rgb.ndim == 3 else rgb


def patch_stats(rgb_patch: np.ndarray) -> tuple:
    """(snr, texture) of one patch: mu/var with a variance floor, and var."""
    lum = luminance(rgb_patch)
    if lum.size == 0:
        raise ValueError("patch_stats requires a nonempty patch")
    mu = float(lum.mean())
    var = float(lum.var())
    return mu / max(var, VAR_FLOOR), var


def patch_weight(texture, snr, a: float = DEFAULT_A, b: float = DEFAULT_B,
                 k: float = DEFAULT_K):
    """Sigmoid RGB-trust weight: 1/(1 + exp(-k (texture - (a*snr + b))))."""
    if k <= 0:
        raise ValueError("sigmoid steepness k must be positive")
    snr = np.minimum(np.asarray(snr, dtype=np.float64), SNR_CAP)
    w = _stable_sigmoid(k * (np.asarray(texture, dtype=np.float64) - (a * snr + b)))
    w = np.clip(w, WEIGHT_CLAMP, 1.0 - WEIGHT_CLAMP)
    return float(w) if w.ndim == 0 else w


@dataclass(frozen=True)
class PatchWeightMap:
    """Per-zone RGB-trust weights with their diagnostics.

    Patch (iy, ix) covers the pixel rectangle of LiDAR zone (ix, iy); the
    patches exactly tile the image.
    """

    weights: np.ndarray    # (ny, nx) in (0, 1)
    snr: np.ndarray        # (ny, nx) mu/var, variance floored
    texture: np.ndarray    # (ny, nx) luminance variance
    saturated: np.ndarray  # (ny, nx) bool: variance at/below the floor
    patch_shape: tuple     # (patch_h, patch_w) pixels


def build_patch_weights(rgb: np.ndarray, nx: int, ny: int, *, a: float = DEFAULT_A,
                        b: float = DEFAULT_B, k: float = DEFAULT_K) -> PatchWeightMap:
    """Compute the weight map for one observed RGB image tiled into nx*ny patches."""
    lum = luminance(rgb)
    h, w = lum.shape
    if h % ny or w % nx:
        raise ValueError(f"image {w}x{h} does not tile into {nx}x{ny} patches")
    ph, pw = h // ny, w // nx
    v = lum.reshape(ny, ph, nx, pw)
    mu = v.mean(axis=(1, 3))
    var = v.var(axis=(1, 3))
    snr = mu / np.maximum(var, VAR_FLOOR)
    return PatchWeightMap(patch_weight(var, snr, a, b, k), snr, var,
                          var <= VAR_FLOOR, (ph, pw))


def effective_weights(weights: np.ndarray, mode: str) -> np.ndarray:
    """Mode override of the adaptive weights (constant maps for ablations)."""
    if mode not in MODES:
        raise ValueError(f"unknown loss mode {mode!r}; choose from {MODES}")
    if mode in ("fusion",):
        return weights
    if mode == "fusion-no-adaptive":
        return np.full_like(weights, 0.5)
    if mode in ("rgb-only", "sparse-baseline"):
        return np.ones_like(weights)
    return np.zeros_like(weights)  # diffuse-only / sparse-only


# -- SSIM ----------------------------------------------------------------------------


def _gaussian_taps(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    w = np.exp(-0.5 * (x / sigma) ** 2)
    return w / w.sum()


def _conv_valid(img, taps: np.ndarray, axis: int):
    """Valid-mode 1D convolution of a Tensor along one spatial axis."""
    img = ad.astensor(img)
    n = img.data.shape[axis]
    size = taps.size
    out_len = n - size + 1
    if out_len <= 0:
        raise ValueError(f"image extent {n} smaller than window {size}")
    total = None
    for k in range(size):
        sl = [slice(None)] * img.data.ndim
        sl[axis] = slice(k, k + out_len)
        term = img[tuple(sl)] * float(taps[k])
        total = term if total is None else total + term
    return total


def ssim(x, y, *, window_size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA,
         k1: float = SSIM_K1, k2: float = SSIM_K2) -> Tensor:
    """Mean SSIM over valid windows (and channels); differentiable in x and y.

    Gaussian window, dynamic range 1.0. Accepts (H, W) or (H, W, C) inputs.
    """
    x, y = ad.astensor(x), ad.astensor(y)
    if x.data.shape != y.data.shape:
        raise ValueError(f"shape mismatch {x.data.shape} vs {y.data.shape}")
    taps = _gaussian_taps(window_size, sigma)

    def blur(img):
        return _conv_valid(_conv_valid(img, taps, 0), taps, 1)

    mu_x, mu_y = blur(x), blur(y)
    sxx = blur(x * x) - mu_x * mu_x
    syy = blur(y * y) - mu_y * mu_y
    sxy = blur(x * y) - mu_x * mu_y
    c1, c2 = k1 * k1, k2 * k2
    num = (mu_x * mu_y * 2.0 + c1) * (sxy * 2.0 + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (sxx + syy + c2)
    return (num / den).mean()


# -- loss terms ----------------------------------------------------------------------


def rgb_loss(rendered, observed: np.ndarray, weights: np.ndarray,
             lambda_ssim: float = DEFAULT_LAMBDA_SSIM, *,
             ssim_window: int = SSIM_WINDOW, parts: dict | None = None) -> Tensor:
    """(1-lambda) * sum_p w_p L1_p + lambda * (1 - SSIM) * mean_p w_p.

    L1_p is the mean absolute error over the pixels (and channels) of patch p,
    so the weighting is resolution-independent.
    """
    rendered = ad.astensor(rendered)
    observed = np.asarray(observed, dtype=np.float64)
    if rendered.data.shape != observed.shape:
        raise ValueError(f"shape mismatch {rendered.data.shape} vs {observed.shape}")
    h, w = observed.shape[:2]
    ny, nx = weights.shape
    if h % ny or w % nx:
        raise ValueError(f"image {w}x{h} does not tile into {nx}x{ny} patches")
    ph, pw = h // ny, w // nx

    diff = ad.absolute(rendered - observed)
    shape = (ny, ph, nx, pw) + observed.shape[2:]
    per_patch = diff.reshape(shape).mean(axis=tuple(i for i in range(1, len(shape))
                                                    if i != 2))
    l1_term = (per_patch * weights).sum() * (1.0 - lambda_ssim)
    if lambda_ssim > 0.0:
        ssim_term = (1.0 - ssim(rendered, Tensor(observed), window_size=ssim_window)) \
            * (lambda_ssim * float(weights.mean()))
    else:
        ssim_term = ad.constant(0.0)
    if parts is not None:
        parts["rgb_l1"] = float(l1_term.data)
        parts["rgb_ssim"] = float(ssim_term.data)
    return l1_term + ssim_term


def transient_loss(rendered, gt: np.ndarray, weights: np.ndarray, *,
                   floor: float = KL_FLOOR, parts: dict | None = None) -> Tensor:
    """sum_p (1 - w_p) KL(rendered_p || gt_p) over zones with signal.

    Inputs are normalized per-zone histograms, rows flattened zone-major
    ((Z, T); zone z = iy*nx + ix). Zones empty on either side are excluded.
    Both sides are floored then renormalized, which keeps the KL nonnegative.
    """
    rendered = ad.astensor(rendered)
    gt = np.asarray(gt, dtype=np.float64)
    if rendered.data.shape != gt.shape or rendered.data.ndim != 2:
        raise ValueError(f"(zones, bins) shape mismatch: {rendered.data.shape} "
                         f"vs {gt.shape}")
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.shape[0] != gt.shape[0]:
        raise ValueError("one weight per zone required")

    r_sums = rendered.data.sum(axis=1)
    g_sums = gt.sum(axis=1)
    include = (r_sums > 0.0) & (g_sums > 0.0)
    bad = include & (np.abs(r_sums - 1.0) > 1e-5)
    if bad.any() or (include & (np.abs(g_sums - 1.0) > 1e-5)).any():
        raise ValueError("transient_loss expects normalized (or empty) histograms")

    p = ad.where(rendered.data > floor, rendered,
                 ad.constant(np.full_like(gt, floor)))
    p = p / p.sum(axis=1, keepdims=True)
    q = np.maximum(gt, floor)
    q = q / q.sum(axis=1, keepdims=True)
    kl = (p * (ad.log(p) - np.log(q))).sum(axis=1)
    kl = ad.clip(kl, 0.0, None)
    kl = ad.where(include, kl, ad.constant(np.zeros_like(g_sums)))
    total = (kl * ((1.0 - w) * include)).sum()
    if parts is not None:
        parts["transient_kl"] = float(total.data)
        parts["transient_zones"] = int(include.sum())
    return total


def depth_normal_reg(depth, normal, coverage: np.ndarray, camera: CameraModel, *,
                     lambda_reg: float = DEFAULT_LAMBDA_REG,
                     discontinuity: float = DEPTH_DISCONTINUITY,
                     parts: dict | None = None) -> Tensor:
    """Consistency between rendered normals and normals implied by the depth map.

    For each interior covered pixel, a plane is fit (depth regressed on the
    unprojected x, y of the 3x3 neighborhood); the cost is 1 minus the dot of
    that plane normal with the rendered normal, averaged over valid pixels.
    Windows crossing a depth discontinuity or uncovered pixels are skipped.
    """
    depth = ad.astensor(depth)
    normal = ad.astensor(normal)
    h, w = depth.data.shape
    if h < 3 or w < 3:
        return ad.constant(0.0)
    u, v = camera.pixel_grid()
    vx_all = (u - camera.cx) / camera.fx
    vy_all = (v - camera.cy) / camera.fy

    shifts = [(di, dj) for di in range(3) for dj in range(3)]
    ih, iw = h - 2, w - 2

    def window(di, dj):
        d = depth[di:di + ih, dj:dj + iw]
        vx = vx_all[di:di + ih, dj:dj + iw]
        vy = vy_all[di:di + ih, dj:dj + iw]
        return d * vx, d * vy, d

    points = [window(di, dj) for di, dj in shifts]
    mx = sum(p[0] for p in points) * (1.0 / 9.0)
    my = sum(p[1] for p in points) * (1.0 / 9.0)
    mz = sum(p[2] for p in points) * (1.0 / 9.0)
    sxx = syy = sxy = sxz = syz = None
    for px, py, pz in points:
        cx_, cy_, cz_ = px - mx, py - my, pz - mz
        sxx = cx_ * cx_ if sxx is None else sxx + cx_ * cx_
        syy = cy_ * cy_ if syy is None else syy + cy_ * cy_
        sxy = cx_ * cy_ if sxy is None else sxy + cx_ * cy_
        sxz = cx_ * cz_ if sxz is None else sxz + cx_ * cz_
        syz = cy_ * cz_ if syz is None else syz + cy_ * cz_

    det = sxx * syy - sxy * sxy
    solvable = det.data > 1e-18
    det_safe = ad.where(solvable, det, ad.constant(np.ones_like(det.data)))
    gx = (sxz * syy - syz * sxy) / det_safe
    gy = (sxx * syz - sxy * sxz) / det_safe
    inv_norm = 1.0 / ad.sqrt(gx * gx + gy * gy + 1.0)
    # plane normal oriented toward the camera (negative z component)
    dot = (normal[1:1 + ih, 1:1 + iw, 0] * gx + normal[1:1 + ih, 1:1 + iw, 1] * gy
           - normal[1:1 + ih, 1:1 + iw, 2]) * inv_norm

    depth_np = depth.data
    stacked = np.stack([depth_np[di:di + ih, dj:dj + iw] for di, dj in shifts])
    cov_ok = np.ones((ih, iw), dtype=bool)
    for di, dj in shifts:
        cov_ok &= coverage[di:di + ih, dj:dj + iw]
    smooth = (stacked.max(axis=0) - stacked.min(axis=0)) <= discontinuity
    valid = cov_ok & smooth & solvable
    count = int(valid.sum())
    if parts is not None:
        parts["reg_pixels"] = count
    if count == 0:
        return ad.constant(0.0)
    cost = ad.where(valid, 1.0 - dot, ad.constant(np.zeros_like(det.data)))
    return cost.sum() * (lambda_reg / count)


def sparse_lidar_loss(rendered_depth, gt_depth: np.ndarray,
                      coverage: np.ndarray | None = None, *,
                      parts: dict | None = None) -> Tensor:
    """Sum of |D_est - D_true| over valid sample rays (sparse-LiDAR baseline).

    Rays without render coverage or without a ground-truth return (depth <= 0)
    are excluded; the exclusion count is reported through `parts`.
    """
    rendered_depth = ad.astensor(rendered_depth)
    gt = np.asarray(gt_depth, dtype=np.float64).reshape(-1)
    valid = gt > 0.0
    if coverage is not None:
        valid &= np.asarray(coverage, dtype=bool).reshape(-1)
    if parts is not None:
        parts["sparse_excluded"] = int((~valid).sum())
        parts["sparse_rays"] = int(valid.sum())
    if not valid.any():
        return ad.constant(0.0)
    diff = ad.absolute(rendered_depth - gt)
    return ad.where(valid, diff, ad.constant(np.zeros_like(gt))).sum()


# -- combination ---------------------------------------------------------------------


@dataclass
class LossBreakdown:
    """Scalar loss components (floats) plus the differentiable total."""

    total: float
    rgb: float
    transient: float
    reg: float
    sparse: float
    mode: str
    rgb_l1: float = 0.0
    rgb_ssim: float = 0.0
    total_tensor: Tensor | None = field(default=None, repr=False)

    def finite(self) -> bool:
        return all(np.isfinite(v) for v in
                   (self.total, self.rgb, self.transient, self.reg, self.sparse))


def total_loss(components: dict, mode: str, *, lambda_lidar: float = 1.0,
               parts: dict | None = None) -> LossBreakdown:
    """Combine the per-term scalars active in `mode` into one differentiable total.

    `components` maps term names ("rgb", "transient", "reg", "sparse") to
    scalar Tensors (or floats). Terms a mode does not use are ignored; terms a
    mode requires must be present.
    """
    if mode not in _ACTIVE:
        raise ValueError(f"unknown loss mode {mode!r}; choose from {MODES}")
    active = _ACTIVE[mode]
    missing = [k for k in active if k not in components]
    if missing:
        raise ValueError(f"mode {mode!r} requires loss components {missing}")

    def term(name):
        if name not in active:
            return None
        t = ad.astensor(components[name])
        return t * lambda_lidar if name == "transient" else t

    pieces = {name: term(name) for name in ("rgb", "transient", "reg", "sparse")}
    total = None
    for t in pieces.values():
        if t is not None:
            total = t if total is None else total + t
    vals = {k: (float(v.data) if v is not None else 0.0) for k, v in pieces.items()}
    parts = parts or {}
    return LossBreakdown(total=float(total.data), rgb=vals["rgb"],
                         transient=vals["transient"], reg=vals["reg"],
                         sparse=vals["sparse"], mode=mode,
                         rgb_l1=parts.get("rgb_l1", vals["rgb"]),
                         rgb_ssim=parts.get("rgb_ssim", 0.0),
                         total_tensor=total)
