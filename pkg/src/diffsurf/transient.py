"""Differentiable diffuse-LiDAR transient rendering.

Renders per-zone photon histograms from a surfel scene by sampling rays in
each zone's cone, intersecting surfel planes, and depositing opacity-weighted
mass into the two time bins adjacent to each round-trip distance (soft
binning, which keeps the histogram differentiable in surfel geometry).

Two deposit models are provided:
  * "opacity": each surfel whose 3-sigma footprint a ray crosses deposits its
    raw opacity (occlusion ignored);
  * "transmittance" (default): deposits T*alpha per ray with front-to-back
    transmittance, so occluded surfels emit nothing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .core import C_LIGHT, Cone, LidarConfig, SensorRig, pixel_cone
from .params import SceneParams, as_params

FOOTPRINT_MAHA2 = 9.0   # 3-sigma membership cutoff
NEAR_CLIP = 1e-6
EPS_PARALLEL = 1e-8
EPS_FLOOR = 1e-8        # added to every bin before normalization
ALPHA_MAX = 0.999


def rng_for(seed, *stream) -> np.random.Generator:
    """Counter-based generator for a (seed, *ids) stream; schedule-independent."""
    ss = np.random.SeedSequence((int(seed),) + tuple(int(s) for s in stream))
    return np.random.Generator(np.random.Philox(ss))


# -- soft binning ---------------------------------------------------------------


@dataclass(frozen=True)
class BinAssignment:
    """Soft two-bin assignment of round-trip distances."""

    lower_bin: np.ndarray  # int, floor(tau)
    w1: np.ndarray         # weight of lower_bin
    w2: np.ndarray         # weight of lower_bin + 1; w1 + w2 = 1 exactly
    in_range: np.ndarray   # False where tau >= n_bins (photon dropped)


def bin_index(d_s, bin_width_s: float, n_bins: int) -> BinAssignment:
    """Map one-way distances to soft bin weights: tau = 2 d / (c dt)."""
    d = np.asarray(d_s, dtype=np.float64)
    tau = 2.0 * d / (C_LIGHT * bin_width_s)
    lower = np.floor(tau).astype(np.int64)
    w2 = tau - lower
    return BinAssignment(lower, 1.0 - w2, w2, (tau >= 0) & (tau < n_bins))


# -- cone sampling -----------------------------------------------------------------


@dataclass(frozen=True)
class ConeSampleSet:
    """Rays within one zone cone plus solid-angle weights summing to 1."""

    origin: np.ndarray    # (3,) apex
    dirs: np.ndarray      # (R, 3) unit directions
    weights: np.ndarray   # (R,) >= 0, sum == 1


def sample_cone(cone: Cone, n_rays: int, seed) -> ConeSampleSet:
    """Latin-hypercube jittered samples over the zone's tangent rectangle.

    A single ray degenerates to the cone axis. Weights correct the uniform
    tangent-plane density to per-ray solid angle.
    """
    if n_rays < 1:
        raise ValueError("n_rays must be >= 1")
    x0, x1, y0, y1 = cone.tan_rect
    if n_rays == 1:
        u = np.array([0.5])
        v = np.array([0.5])
    else:
        rng = rng_for(seed) if np.isscalar(seed) else rng_for(*np.atleast_1d(seed))
        u = (np.arange(n_rays) + rng.uniform(size=n_rays)) / n_rays
        v = (rng.permutation(n_rays) + rng.uniform(size=n_rays)) / n_rays
    tx = x0 + (x1 - x0) * u
    ty = y0 + (y1 - y0) * v
    norm2 = 1.0 + tx * tx + ty * ty
    dirs = np.stack([tx, ty, np.ones_like(tx)], axis=-1) / np.sqrt(norm2)[:, None]
    weights = norm2 ** -1.5
    weights = weights / weights.sum()
    return ConeSampleSet(cone.apex.copy(), dirs, weights)


# -- histogram rendering --------------------------------------------------------------


def _zone_candidates(params: SceneParams, rig: SensorRig, cone: Cone) -> np.ndarray:
    """Indices of surfels whose 3-sigma ball can touch the zone cone (detached)."""
    cam = rig.camera
    centers = params.positions.data @ cam.rotation.T + cam.translation
    radius = 3.0 * params.scales.data.max(axis=1)
    z = centers[:, 2]
    keep = z + radius > NEAR_CLIP
    zs = np.maximum(z, NEAR_CLIP)
    x0, x1, y0, y1 = cone.tan_rect
    margin = radius / zs
    tx, ty = centers[:, 0] / zs, centers[:, 1] / zs
    keep &= (tx >= x0 - margin) & (tx <= x1 + margin)
    keep &= (ty >= y0 - margin) & (ty <= y1 + margin)
    return np.nonzero(keep)[0]


def render_transient(scene, rig: SensorRig, zone: tuple, seed, *,
                     mode: str = "transmittance", n_rays: int | None = None,
                     info: dict | None = None) -> Tensor:
    """Differentiable histogram (n_bins,) for one LiDAR zone.

    `scene` may be a Scene (constant) or SceneParams (optimized leaves). The
    RNG stream is keyed by `seed` alone; callers fold view/zone identifiers
    into it. `info`, if given, collects {"dropped": pairs beyond max range}.
    """
    if mode not in ("transmittance", "opacity"):
        raise ValueError(f"unknown transient mode {mode!r}")
    params = as_params(scene)
    lidar = rig.lidar
    n_rays = lidar.rays_per_cone if n_rays is None else n_rays
    n_bins = lidar.n_bins
    dtype = params.positions.data.dtype

    cone = pixel_cone(lidar, zone)
    samples = sample_cone(cone, n_rays, seed)
    origin, dirs_world = rig.world_ray(samples.dirs)
    dirs_world = dirs_world.astype(dtype)
    origin = origin.astype(dtype)
    ray_w = samples.weights.astype(dtype)

    idx = _zone_candidates(params, rig, cone)
    if info is not None:
        info.setdefault("dropped", 0)
    if idx.size == 0:
        return Tensor(np.zeros(n_bins, dtype=dtype))
    sub = params.subset(idx)
    e1, e2, nrm = sub.frames()

    # ray-plane distances t (R, N): t = n.(mu - o) / n.d
    rel = sub.positions - origin
    nu = (rel * nrm).sum(axis=1)                    # (N,)
    denom = ad.matmul(Tensor(dirs_world), nrm.transpose())  # (R, N)
    safe = np.abs(denom.data) > EPS_PARALLEL
    denom_safe = ad.where(safe, denom, ad.constant(np.ones_like(denom.data)))
    t = nu.reshape(1, -1) / denom_safe              # (R, N)

    # in-plane Mahalanobis via q.e_k = (o - mu).e_k + t (d.e_k), scaled by s_k
    b1 = -(rel * e1).sum(axis=1).reshape(1, -1)
    b2 = -(rel * e2).sum(axis=1).reshape(1, -1)
    a1 = ad.matmul(Tensor(dirs_world), e1.transpose())
    a2 = ad.matmul(Tensor(dirs_world), e2.transpose())
    s1 = ad.maximum(sub.scales[:, 0], 1e-12).reshape(1, -1)
    s2 = ad.maximum(sub.scales[:, 1], 1e-12).reshape(1, -1)
    u1 = (b1 + t * a1) / s1
    u2 = (b2 + t * a2) / s2
    maha2 = u1 * u1 + u2 * u2

    tau = t * (2.0 / (C_LIGHT * lidar.bin_width_s))
    beta = np.floor(tau.data).astype(np.int64)      # detached: grad flows via w2
    member = safe & (t.data > NEAR_CLIP) & (maha2.data <= FOOTPRINT_MAHA2)
    in_range = member & (beta >= 0) & (beta < n_bins)
    if info is not None:
        info["dropped"] += int(np.count_nonzero(member & (beta >= n_bins)))

    if mode == "opacity":
        kappa = ad.where(in_range, sub.opacities.reshape(1, -1),
                         ad.constant(np.zeros_like(t.data)))
    else:
        gauss = ad.exp(maha2 * -0.5)
        alpha = ad.clip(sub.opacities.reshape(1, -1) * gauss, 0.0, ALPHA_MAX)
        alpha = ad.where(member, alpha, ad.constant(np.zeros_like(t.data)))
        order = np.argsort(np.where(member, t.data, np.inf), axis=1, kind="stable")
        inv = ad.inverse_permutation(order, axis=1)
        alpha_sorted = ad.take_along_axis(alpha, order, axis=1, inverse=inv)
        trans = ad.cumprod(1.0 - alpha_sorted, axis=1)
        t_excl = ad.concatenate(
            [Tensor(np.ones((n_rays, 1), dtype=dtype)), trans[:, :-1]], axis=1)
        w_sorted = t_excl * alpha_sorted
        kappa = ad.take_along_axis(w_sorted, inv, axis=1, inverse=order)
        kappa = ad.where(in_range, kappa, ad.constant(np.zeros_like(t.data)))

    w2 = tau - beta.astype(dtype)
    deposit = kappa * ray_w[:, None]
    d1 = deposit * (1.0 - w2)
    d2 = deposit * w2
    ids1 = np.where(in_range, beta, n_bins).ravel()
    ids2 = np.where(in_range & (beta + 1 < n_bins), beta + 1, n_bins).ravel()
    hist = (ad.bincount(d1.reshape(-1), ids1, n_bins + 1)
            + ad.bincount(d2.reshape(-1), ids2, n_bins + 1))
    return hist[:n_bins]


def render_transient_image(scene, rig: SensorRig, seed, *, mode: str = "transmittance",
                           n_rays: int | None = None, info: dict | None = None) -> list:
    """All zones: list of rows, each a list of per-zone histogram Tensors.

    Zone (ix, iy) uses RNG stream (seed, iy * nx + ix).
    """
    lidar = rig.lidar
    rows = []
    for iy in range(lidar.ny):
        row = []
        for ix in range(lidar.nx):
            row.append(render_transient(scene, rig, (ix, iy),
                                        (seed, iy * lidar.nx + ix),
                                        mode=mode, n_rays=n_rays, info=info))
        rows.append(row)
    return rows


def transient_image_array(scene, rig: SensorRig, seed, *, mode: str = "transmittance",
                          n_rays: int | None = None) -> np.ndarray:
    """Forward-only (ny, nx, n_bins) histogram array."""
    rows = render_transient_image(scene, rig, seed, mode=mode, n_rays=n_rays)
    return np.stack([np.stack([h.data for h in row]) for row in rows])


def normalize_histogram(h):
    """(probabilities, empty_flag): floor every bin by EPS_FLOOR, then normalize.

    Accepts ndarray or Tensor; empty histograms (total < 1e-12) are flagged so
    callers exclude them from losses.
    """
    raw_total = float(h.data.sum()) if isinstance(h, Tensor) else float(np.sum(h))
    floored = h + EPS_FLOOR
    prob = floored / floored.sum()
    return prob, raw_total < 1e-12
