"""Surfel rasterization: projection, alpha compositing, depth/normal maps.

Implements the EWA-style splatting pipeline twice: scalar reference operations
(`project_surfel`, `alpha_at`, `ray_surfel_depth`, `composite_pixel`) that the
tests exercise against hand-computed values, and a vectorized differentiable
`render_tensors` used by the optimizer. Both share the same conventions:

  * 2D covariance from the affine projection Jacobian at the surfel center,
    regularized by EPS_SIGMA on the diagonal only when evaluating alphas
  * per-pixel depth from exact ray-plane intersection (z-depth), falling back
    to the center depth when the intersection lands outside the surfel's
    3-sigma in-plane support (including near-parallel rays, whose
    intersections run off to arbitrary distances)
  * front-to-back compositing sorted by per-pixel depth, ties by surfel index,
    terminating once transmittance drops below TERMINATE_T
  * depth/normal normalized by accumulated alpha; pixels with accumulation
    below EPS_COV get a zero sentinel and are masked out of losses/metrics
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .core import (SH_C0, CameraModel, Scene, Surfel, covariance_from_params,
                   normalize_quaternion, quat_to_rotmat, sh_to_color)
from .params import SceneParams, as_params

EPS_SIGMA = 0.3       # px^2 diagonal regularization when inverting cov_2d
ALPHA_CUTOFF = -4.5   # 3-sigma footprint: exp power below this contributes 0
ALPHA_MAX = 0.999
TERMINATE_T = 1e-4
EPS_COV = 1e-3        # minimum accumulated alpha for depth/normal coverage
NEAR_PLANE = 0.01
EPS_PARALLEL = 1e-8
SUPPORT_MAHA2 = 9.0   # intersections beyond 3 sigma in-plane use the center depth
SCALE_TINY = 1e-12


# -- reference per-surfel operations ------------------------------------------------


@dataclass(frozen=True)
class ProjectedSurfel:
    """One surfel mapped to a camera: image-plane footprint plus its 3D plane."""

    mean_2d: np.ndarray     # (2,) pixels
    cov_2d: np.ndarray      # (2, 2) pixels^2, unregularized
    cam_depth: float        # z of the center in camera space
    plane_point: np.ndarray   # (3,) camera space
    plane_normal: np.ndarray  # (3,) camera space, unit
    index: int


def projection_jacobian(x_cam: np.ndarray, camera: CameraModel) -> np.ndarray:
    """Affine approximation of perspective projection at a camera-space point."""
    x, y, z = x_cam
    return np.array([
        [camera.fx / z, 0.0, -camera.fx * x / z**2],
        [0.0, camera.fy / z, -camera.fy * y / z**2],
    ])


def project_surfel(surfel: Surfel, camera: CameraModel, index: int = 0,
                   near: float = NEAR_PLANE) -> ProjectedSurfel | None:
    """Project one surfel; returns None when culled (center behind near plane)."""
    x_cam = camera.world_to_cam(surfel.position)
    if x_cam[2] <= near:
        return None
    w = camera.rotation
    cov_cam = w @ covariance_from_params(surfel.rotation, surfel.scale) @ w.T
    j = projection_jacobian(x_cam, camera)
    cov_2d = j @ cov_cam @ j.T
    rot_cam = w @ _rotmat(surfel.rotation)
    return ProjectedSurfel(camera.project(x_cam), 0.5 * (cov_2d + cov_2d.T),
                           float(x_cam[2]), x_cam, rot_cam[:, 2], index)


def _rotmat(q):
    return quat_to_rotmat(normalize_quaternion(q))


def alpha_at(u: np.ndarray, proj: ProjectedSurfel, opacity: float,
             eps_sigma: float = EPS_SIGMA) -> float:
    """Splat opacity at a pixel: o * exp(-1/2 d^T Sigma'^-1 d), 0 beyond 3 sigma."""
    cov = proj.cov_2d + eps_sigma * np.eye(2)
    d = np.asarray(u, dtype=np.float64) - proj.mean_2d
    det = cov[0, 0] * cov[1, 1] - cov[0, 1] ** 2
    power = -0.5 * (cov[1, 1] * d[0] ** 2 - 2 * cov[0, 1] * d[0] * d[1]
                    + cov[0, 0] * d[1] ** 2) / det
    if power < ALPHA_CUTOFF:
        return 0.0
    return float(min(opacity * np.exp(power), ALPHA_MAX))


def ray_surfel_depth(u: np.ndarray, surfel: Surfel, camera: CameraModel) -> tuple:
    """Exact ray-plane intersection z-depth at pixel u; (depth, fell_back).

    Falls back to the center depth when the ray is near-parallel to the plane
    or the intersection point lies outside the 3-sigma in-plane support.
    """
    rot_cam = camera.rotation @ _rotmat(surfel.rotation)
    x_cam = camera.world_to_cam(surfel.position)
    n = rot_cam[:, 2]
    v = np.array([(u[0] - camera.cx) / camera.fx, (u[1] - camera.cy) / camera.fy, 1.0])
    denom = float(n @ v)
    if abs(denom) <= EPS_PARALLEL:
        return float(x_cam[2]), True
    d = float((n @ x_cam) / denom)
    local = d * v - x_cam
    s = np.maximum(surfel.scale, SCALE_TINY)
    maha2 = (rot_cam[:, 0] @ local / s[0]) ** 2 + (rot_cam[:, 1] @ local / s[1]) ** 2
    if maha2 > SUPPORT_MAHA2:
        return float(x_cam[2]), True
    return d, False


def linearized_depth(u: np.ndarray, surfel: Surfel, camera: CameraModel) -> float:
    """First-order depth: d(u_i) plus the plane's z-row through the inverse
    projection Jacobian. Agrees with `ray_surfel_depth` to O(|u - u_i|^2)."""
    x_cam = camera.world_to_cam(surfel.position)
    rot_cam = camera.rotation @ _rotmat(surfel.rotation)
    tangent = rot_cam[:, :2]                       # camera-space in-plane axes
    j = projection_jacobian(x_cam, camera)
    j_pr = j @ tangent                             # pixel response to tangent moves
    du = np.asarray(u, dtype=np.float64) - camera.project(x_cam)
    return float(x_cam[2] + tangent[2, :] @ np.linalg.solve(j_pr, du))


def composite_pixel(u: np.ndarray, entries, camera: CameraModel,
                    background=(0.0, 0.0, 0.0)) -> tuple:
    """Front-to-back compositing at one pixel (reference implementation).

    `entries` are (surfel, projected, color) sorted front-to-back by per-pixel
    depth. Returns (color, depth, normal, alpha_acc).
    """
    bg = np.asarray(background, dtype=np.float64)
    color = np.zeros(3)
    depth_raw = 0.0
    normal_raw = np.zeros(3)
    t = 1.0
    for surfel, proj, col in entries:
        if t < TERMINATE_T:
            break
        a = alpha_at(u, proj, surfel.opacity)
        if a <= 0.0:
            continue
        d, _ = ray_surfel_depth(u, surfel, camera)
        n = proj.plane_normal
        if n @ proj.plane_point > 0:  # orient toward the camera
            n = -n
        color = color + t * a * np.asarray(col, dtype=np.float64)
        depth_raw += t * a * d
        normal_raw = normal_raw + t * a * n
        t *= 1.0 - a
    alpha_acc = 1.0 - t
    color = color + t * bg
    if alpha_acc >= EPS_COV:
        depth = depth_raw / alpha_acc
        normal = normal_raw / alpha_acc
    else:
        depth, normal = 0.0, np.zeros(3)
    return color, depth, normal, alpha_acc


# -- vectorized differentiable renderer ----------------------------------------------


@dataclass
class RenderBuffers:
    """Per-view render outputs (plain arrays)."""

    color: np.ndarray      # (H, W, 3)
    depth: np.ndarray      # (H, W) meters, 0 where uncovered
    normal: np.ndarray     # (H, W, 3) camera space, norm <= 1, 0 where uncovered
    alpha_acc: np.ndarray  # (H, W) in [0, 1]
    coverage: np.ndarray   # (H, W) bool, alpha_acc >= EPS_COV


class _Prepared:
    """Per-view per-surfel tensors shared by all pixel batches."""

    __slots__ = ("mean_x", "mean_y", "ca", "cb", "cc", "opac", "colors", "nx", "ny",
                 "nz", "nc", "nu_p", "z", "n_kept", "dtype", "radius_px", "mean_np",
                 "e1_np", "e2_np", "x_np", "s_np")


def _prepare(params: SceneParams, camera: CameraModel, sh_view_dependent: bool = True):
    dtype = params.positions.data.dtype
    w = camera.rotation.astype(dtype)
    t = camera.translation.astype(dtype)

    # cull on detached data: behind near plane or footprint entirely off-frame
    pos = params.positions.data
    xc = pos @ w.T + t
    z_np = xc[:, 2]
    keep = z_np > NEAR_PLANE
    zs = np.maximum(z_np, NEAR_PLANE)
    # conservative 3-sigma pixel reach: 3 s_max |J| bounded via the Frobenius norm
    tan_sq = (xc[:, 0] / zs) ** 2 + (xc[:, 1] / zs) ** 2
    j_bound = max(camera.fx, camera.fy) / zs * np.sqrt(2.0 + tan_sq)
    r_px = 3.0 * params.scales.data.max(axis=1) * j_bound + 3.0 * np.sqrt(EPS_SIGMA) + 1.0
    u_np = camera.fx * xc[:, 0] / zs + camera.cx
    v_np = camera.fy * xc[:, 1] / zs + camera.cy
    keep &= (u_np > -r_px) & (u_np < camera.width + r_px)
    keep &= (v_np > -r_px) & (v_np < camera.height + r_px)
    kept = np.nonzero(keep)[0]

    prep = _Prepared()
    prep.dtype = dtype
    prep.n_kept = kept.size
    if kept.size == 0:
        return prep
    sub = params.subset(kept)
    e1, e2, nrm = sub.frames()
    x_cam = ad.matmul(sub.positions, Tensor(w.T)) + t
    e1c = ad.matmul(e1, Tensor(w.T))
    e2c = ad.matmul(e2, Tensor(w.T))
    nc = ad.matmul(nrm, Tensor(w.T))

    x, y, z = x_cam[:, 0], x_cam[:, 1], x_cam[:, 2]
    inv_z = 1.0 / z
    prep.mean_x = camera.fx * x * inv_z + camera.cx
    prep.mean_y = camera.fy * y * inv_z + camera.cy

    # cov_2d = sum_k s_k^2 (J e_k)(J e_k)^T, with J the projection Jacobian
    inv_z2 = inv_z * inv_z
    g1x = camera.fx * (e1c[:, 0] * z - e1c[:, 2] * x) * inv_z2
    g1y = camera.fy * (e1c[:, 1] * z - e1c[:, 2] * y) * inv_z2
    g2x = camera.fx * (e2c[:, 0] * z - e2c[:, 2] * x) * inv_z2
    g2y = camera.fy * (e2c[:, 1] * z - e2c[:, 2] * y) * inv_z2
    s1sq = sub.scales[:, 0] * sub.scales[:, 0]
    s2sq = sub.scales[:, 1] * sub.scales[:, 1]
    cov_a = s1sq * g1x * g1x + s2sq * g2x * g2x + EPS_SIGMA
    cov_b = s1sq * g1x * g1y + s2sq * g2x * g2y
    cov_c = s1sq * g1y * g1y + s2sq * g2y * g2y + EPS_SIGMA
    det = cov_a * cov_c - cov_b * cov_b
    prep.ca = cov_c / det          # conic entries: inverse of regularized cov
    prep.cb = cov_b / det * -1.0
    prep.cc = cov_a / det

    # normals oriented toward the camera (sign detached)
    flip = np.where((nc.data * x_cam.data).sum(axis=1) > 0, -1.0, 1.0).astype(dtype)
    nc = nc * flip[:, None]
    prep.nc = nc
    prep.nx, prep.ny, prep.nz = nc[:, 0], nc[:, 1], nc[:, 2]
    prep.nu_p = (nc * x_cam).sum(axis=1)   # n . p for exact plane depth
    prep.z = z
    prep.opac = sub.opacities
    prep.radius_px = r_px[kept]
    prep.mean_np = np.stack([u_np[kept], v_np[kept]], axis=1)
    prep.e1_np = e1c.data
    prep.e2_np = e2c.data
    prep.x_np = x_cam.data
    prep.s_np = np.maximum(sub.scales.data, SCALE_TINY)

    colors = sub.base_colors()
    if sh_view_dependent and params.color_coeffs.data.shape[1] > 1:
        # higher SH bands enter as per-view constants; only DC is differentiable
        dirs = pos[kept] - camera.center
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        full = sh_to_color(sub.color_coeffs.data.astype(np.float64), dirs)
        rest = full - (sub.color_coeffs.data[:, 0, :] * SH_C0 + 0.5)
        colors = colors + rest.astype(dtype)
    prep.colors = colors
    return prep


def _composite(prep: _Prepared, camera: CameraModel, uv: np.ndarray,
               band_idx: np.ndarray, background: np.ndarray):
    """Composite arbitrary sample coordinates against a surfel subset.

    Returns dict of Tensors keyed color/depth/normal/alpha_acc for the (P,)
    sample points.
    """
    dtype = prep.dtype
    p = uv.shape[0]
    bg = background.astype(dtype)
    if prep.n_kept == 0 or band_idx.size == 0:
        zero = Tensor(np.zeros(p, dtype=dtype))
        return {"color": Tensor(np.tile(bg, (p, 1))), "depth": zero,
                "normal": Tensor(np.zeros((p, 3), dtype=dtype)), "alpha_acc": zero}

    ub = uv[:, 0:1].astype(dtype)
    vb = uv[:, 1:2].astype(dtype)
    mean_x = prep.mean_x[band_idx].reshape(1, -1)
    mean_y = prep.mean_y[band_idx].reshape(1, -1)
    ca = prep.ca[band_idx].reshape(1, -1)
    cb = prep.cb[band_idx].reshape(1, -1)
    cc = prep.cc[band_idx].reshape(1, -1)
    opac = prep.opac[band_idx].reshape(1, -1)
    nx = prep.nx[band_idx].reshape(1, -1)
    ny = prep.ny[band_idx].reshape(1, -1)
    nz = prep.nz[band_idx].reshape(1, -1)
    nu_p = prep.nu_p[band_idx].reshape(1, -1)
    z = prep.z[band_idx].reshape(1, -1)
    colors = prep.colors[band_idx]

    dx = Tensor(ub) - mean_x
    dy = Tensor(vb) - mean_y
    power = (dx * dx * ca + dy * dy * cc) * -0.5 - dx * dy * cb
    visible = power.data >= ALPHA_CUTOFF
    alpha = ad.clip(opac * ad.exp(power), 0.0, ALPHA_MAX)
    alpha = ad.where(visible, alpha, ad.constant(np.zeros_like(power.data)))

    # exact per-pixel plane depth; fall back to center depth where the ray is
    # near-parallel or the intersection leaves the 3-sigma in-plane support
    vx = Tensor(((ub - camera.cx) / camera.fx).astype(dtype))
    vy = Tensor(((vb - camera.cy) / camera.fy).astype(dtype))
    denom = vx * nx + vy * ny + nz
    safe = np.abs(denom.data) > EPS_PARALLEL
    denom_safe = ad.where(safe, denom, ad.constant(np.ones_like(denom.data)))
    d_np = np.where(safe, nu_p.data / denom_safe.data, z.data)
    e1b, e2b = prep.e1_np[band_idx], prep.e2_np[band_idx]
    xb, sb = prep.x_np[band_idx], prep.s_np[band_idx]
    lx = vx.data * d_np - xb[:, 0]
    ly = vy.data * d_np - xb[:, 1]
    lz = d_np - xb[:, 2]
    a1 = (lx * e1b[:, 0] + ly * e1b[:, 1] + lz * e1b[:, 2]) / sb[:, 0]
    a2 = (lx * e2b[:, 0] + ly * e2b[:, 1] + lz * e2b[:, 2]) / sb[:, 1]
    supported = safe & (a1 * a1 + a2 * a2 <= SUPPORT_MAHA2)
    d_px = ad.where(supported, nu_p / denom_safe, z)

    key = np.where(alpha.data > 0.0, d_px.data, np.inf)
    order = np.argsort(key, axis=1, kind="stable")
    inv = ad.inverse_permutation(order, axis=1)
    alpha_s = ad.take_along_axis(alpha, order, axis=1, inverse=inv)
    trans = ad.cumprod(1.0 - alpha_s, axis=1)
    t_excl = ad.concatenate([Tensor(np.ones((p, 1), dtype=dtype)), trans[:, :-1]],
                            axis=1)
    live = t_excl.data >= TERMINATE_T
    w_s = ad.where(live, t_excl * alpha_s, ad.constant(np.zeros_like(power.data)))
    w = ad.take_along_axis(w_s, inv, axis=1, inverse=order)

    acc = w.sum(axis=1)
    color = ad.matmul(w, colors) + (1.0 - acc).reshape(-1, 1) * bg
    covered = acc.data >= EPS_COV
    acc_safe = ad.where(covered, acc, ad.constant(np.ones(p, dtype=dtype)))
    depth = ad.where(covered, (w * d_px).sum(axis=1) / acc_safe,
                     ad.constant(np.zeros(p, dtype=dtype)))
    nrm_raw = ad.matmul(w, prep.nc[band_idx])
    normal = ad.where(covered[:, None], nrm_raw / acc_safe.reshape(-1, 1),
                      ad.constant(np.zeros((p, 3), dtype=dtype)))
    return {"color": color, "depth": depth, "normal": normal, "alpha_acc": acc}


def render_tensors(scene, camera: CameraModel, *, background=(0.0, 0.0, 0.0),
                   band_rows: int = 16, sh_view_dependent: bool = True) -> dict:
    """Differentiable full-frame render.

    Returns {"color": (H,W,3), "depth": (H,W), "normal": (H,W,3),
    "alpha_acc": (H,W)} as Tensors plus "coverage" as a bool ndarray.
    """
    params = as_params(scene)
    prep = _prepare(params, camera, sh_view_dependent)
    h, w_img = camera.height, camera.width
    bg = np.asarray(background, dtype=np.float64)

    u, v = camera.pixel_grid()
    outs = {"color": [], "depth": [], "normal": [], "alpha_acc": []}
    for row0 in range(0, h, band_rows):
        row1 = min(row0 + band_rows, h)
        uv = np.stack([u[row0:row1].ravel(), v[row0:row1].ravel()], axis=1)
        if prep.n_kept:
            my = prep.mean_np[:, 1]
            band = np.nonzero((my + prep.radius_px >= row0)
                              & (my - prep.radius_px <= row1))[0]
        else:
            band = np.empty(0, dtype=np.int64)
        res = _composite(prep, camera, uv, band, bg)
        for k in outs:
            outs[k].append(res[k])
    color = ad.concatenate(outs["color"], axis=0).reshape((h, w_img, 3))
    depth = ad.concatenate(outs["depth"], axis=0).reshape((h, w_img))
    normal = ad.concatenate(outs["normal"], axis=0).reshape((h, w_img, 3))
    acc = ad.concatenate(outs["alpha_acc"], axis=0).reshape((h, w_img))
    return {"color": color, "depth": depth, "normal": normal, "alpha_acc": acc,
            "coverage": acc.data >= EPS_COV}


def render_depth_at(scene, camera: CameraModel, uv: np.ndarray) -> dict:
    """Differentiable depth (and coverage) at arbitrary pixel coordinates (K, 2)."""
    params = as_params(scene)
    prep = _prepare(params, camera, sh_view_dependent=False)
    band = np.arange(prep.n_kept)
    res = _composite(prep, camera, np.asarray(uv, dtype=np.float64), band,
                     np.zeros(3))
    res["coverage"] = res["alpha_acc"].data >= EPS_COV
    return res


def render_image(scene: Scene, camera: CameraModel, *, background=(0.0, 0.0, 0.0),
                 band_rows: int = 16) -> RenderBuffers:
    """Forward-only render to plain buffers."""
    out = render_tensors(scene, camera, background=background, band_rows=band_rows)
    return RenderBuffers(out["color"].data.copy(), out["depth"].data.copy(),
                         out["normal"].data.copy(), out["alpha_acc"].data.copy(),
                         out["coverage"].copy())
