"""Ground-truth data factory: analytic scenes, ray-traced renders, datasets.

Scenes are unions of spheres, planes, and boxes with constant or checker
albedo. Views are ray-traced exactly (Lambertian shading with a headlight),
transients come from cone Monte-Carlo over analytic depths with the same soft
binning as the differentiable renderer and unit deposits (no radiometric
falloff), and the whole bundle is written to a hashed dataset directory.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import fileio
from .core import (
    CameraModel,
    LidarConfig,
    Scene,
    SensorRig,
    SH_C0,
    look_at,
    pixel_cone,
)
from .fileio import DataError
from .transient import bin_index, rng_for, sample_cone

AMBIENT = 0.1  # headlight shading: albedo * (AMBIENT + (1-AMBIENT) * max(0, n.l))

TEXTURE_VARIANTS = ("full", "object-only", "plane-only", "none")
SCENE_IDS = ("sphere_plane", "box_plane", "two_spheres")


# -- textures -------------------------------------------------------------------


@dataclass(frozen=True)
class Constant:
    color: tuple

    def albedo(self, points: np.ndarray) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.color, dtype=np.float64),
                               points.shape).copy()


@dataclass(frozen=True)
class Checker:
    """3D world-position checkerboard between two gray/color levels."""

    color1: tuple
    color2: tuple
    period: float

    def albedo(self, points: np.ndarray) -> np.ndarray:
        cells = np.floor(points / self.period).astype(np.int64)
        parity = cells.sum(axis=-1) % 2
        c1 = np.asarray(self.color1, dtype=np.float64)
        c2 = np.asarray(self.color2, dtype=np.float64)
        return np.where(parity[..., None] == 0, c1, c2)


def _as_texture(spec) -> object:
    if isinstance(spec, (Constant, Checker)):
        return spec
    raise DataError(f"unknown texture {spec!r}")


# -- primitives -----------------------------------------------------------------


@dataclass(frozen=True)
class Sphere:
    center: np.ndarray
    radius: float
    texture: object

    def intersect(self, origins, dirs):
        oc = origins - np.asarray(self.center, dtype=np.float64)
        b = (oc * dirs).sum(axis=-1)
        c = (oc * oc).sum(axis=-1) - self.radius**2
        disc = b * b - c
        ok = disc >= 0.0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        t0, t1 = -b - sq, -b + sq
        t = np.where(t0 > 1e-9, t0, t1)
        return np.where(ok & (t > 1e-9), t, np.inf)

    def surface(self, points):
        n = (points - np.asarray(self.center, dtype=np.float64)) / self.radius
        return n, self.texture.albedo(points)


def plane_basis(normal: np.ndarray) -> tuple:
    """Orthonormal in-plane axes (u, v) for a unit normal."""
    n = np.asarray(normal, dtype=np.float64)
    a = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(n, a)
    u /= np.linalg.norm(u)
    return u, np.cross(n, u)


@dataclass(frozen=True)
class Plane:
    point: np.ndarray
    normal: np.ndarray
    extent: float  # half-size of the square patch; np.inf for unbounded
    texture: object

    def intersect(self, origins, dirs):
        n = np.asarray(self.normal, dtype=np.float64)
        n = n / np.linalg.norm(n)
        denom = dirs @ n
        ok = np.abs(denom) > 1e-12
        t = ((np.asarray(self.point, dtype=np.float64) - origins) @ n
             / np.where(ok, denom, 1.0))
        ok &= t > 1e-9
        if np.isfinite(self.extent):
            u, v = plane_basis(n)
            rel = origins + t[..., None] * dirs - np.asarray(self.point, dtype=np.float64)
            ok &= (np.abs(rel @ u) <= self.extent) & (np.abs(rel @ v) <= self.extent)
        return np.where(ok, t, np.inf)

    def surface(self, points):
        n = np.asarray(self.normal, dtype=np.float64)
        n = n / np.linalg.norm(n)
        return np.broadcast_to(n, points.shape).copy(), self.texture.albedo(points)


@dataclass(frozen=True)
class Box:
    vmin: np.ndarray
    vmax: np.ndarray
    texture: object

    def intersect(self, origins, dirs):
        vmin = np.asarray(self.vmin, dtype=np.float64)
        vmax = np.asarray(self.vmax, dtype=np.float64)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
            t0 = (vmin - origins) * inv
            t1 = (vmax - origins) * inv
        tn = np.nanmax(np.minimum(t0, t1), axis=-1)
        tf = np.nanmin(np.maximum(t0, t1), axis=-1)
        ok = (tn <= tf) & (tf > 1e-9)
        t = np.where(tn > 1e-9, tn, tf)
        return np.where(ok, t, np.inf)

    def surface(self, points):
        vmin = np.asarray(self.vmin, dtype=np.float64)
        vmax = np.asarray(self.vmax, dtype=np.float64)
        center, half = (vmin + vmax) / 2.0, (vmax - vmin) / 2.0
        local = (points - center) / half
        axis = np.argmax(np.abs(local), axis=-1)
        n = np.zeros_like(points)
        rows = np.arange(points.shape[0])
        n[rows, axis] = np.sign(local[rows, axis])
        return n, self.texture.albedo(points)


@dataclass(frozen=True)
class AnalyticScene:
    primitives: tuple
    scene_id: str


# -- ray tracing -------------------------------------------------------------------


@dataclass(frozen=True)
class Hit:
    depth: float
    normal: np.ndarray
    albedo: np.ndarray
    primitive: int


def trace_rays(scene: AnalyticScene, origins: np.ndarray, dirs: np.ndarray) -> dict:
    """Nearest-hit results for unit-direction rays.

    Returns dict with depth (inf on miss), world normal oriented toward the
    ray origin, albedo, hit mask, and winning primitive index (-1 on miss).
    """
    origins = np.broadcast_to(np.asarray(origins, dtype=np.float64), dirs.shape)
    dirs = np.asarray(dirs, dtype=np.float64)
    m = dirs.shape[0]
    best_t = np.full(m, np.inf)
    best_p = np.full(m, -1, dtype=np.int64)
    for i, prim in enumerate(scene.primitives):
        t = prim.intersect(origins, dirs)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_p = np.where(closer, i, best_p)
    normals = np.zeros((m, 3))
    albedos = np.zeros((m, 3))
    hit = best_p >= 0
    for i, prim in enumerate(scene.primitives):
        sel = best_p == i
        if not np.any(sel):
            continue
        pts = origins[sel] + best_t[sel, None] * dirs[sel]
        n, a = prim.surface(pts)
        flip = (n * dirs[sel]).sum(axis=-1) > 0  # face the ray origin
        normals[sel] = np.where(flip[:, None], -n, n)
        albedos[sel] = a
    return {"depth": best_t, "normal": normals, "albedo": albedos,
            "hit": hit, "primitive": best_p}


def trace_ray(scene: AnalyticScene, origin, direction) -> Hit | None:
    """Single-ray convenience wrapper."""
    res = trace_rays(scene, np.asarray(origin, dtype=np.float64)[None, :],
                     np.asarray(direction, dtype=np.float64)[None, :])
    if not res["hit"][0]:
        return None
    return Hit(float(res["depth"][0]), res["normal"][0], res["albedo"][0],
               int(res["primitive"][0]))


def shade(albedo: np.ndarray, normals: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Lambertian shading under a camera headlight plus constant ambient."""
    lam = np.maximum(0.0, -(normals * dirs).sum(axis=-1))
    return albedo * (AMBIENT + (1.0 - AMBIENT) * lam)[..., None]


# -- scene catalog --------------------------------------------------------------------


GROUND = Plane(np.zeros(3), np.array([0.0, 0.0, 1.0]), 1.2,
               Checker((0.85, 0.80, 0.70), (0.25, 0.30, 0.40), 0.08))
PLAIN = Constant((0.55, 0.55, 0.55))


def make_scene(scene_id: str, texture_variant: str = "full") -> AnalyticScene:
    """Desk-scale test scene with the requested texture variant applied."""
    if texture_variant not in TEXTURE_VARIANTS:
        raise DataError(f"unknown texture variant {texture_variant!r}; "
                        f"choose from {TEXTURE_VARIANTS}")
    obj_tex = Checker((0.90, 0.35, 0.25), (0.95, 0.90, 0.30), 0.05)
    if scene_id == "sphere_plane":
        objects = [Sphere(np.array([0.0, 0.0, 0.12]), 0.12, obj_tex)]
    elif scene_id == "box_plane":
        objects = [Box(np.array([-0.11, -0.08, 0.0]), np.array([0.11, 0.08, 0.14]),
                       obj_tex)]
    elif scene_id == "two_spheres":
        objects = [Sphere(np.array([-0.11, 0.0, 0.10]), 0.10, obj_tex),
                   Sphere(np.array([0.11, 0.0, 0.08]), 0.08,
                          Checker((0.30, 0.80, 0.85), (0.90, 0.90, 0.85), 0.04))]
    else:
        raise DataError(f"unknown scene id {scene_id!r}; choose from {SCENE_IDS}")
    ground = GROUND
    if texture_variant in ("object-only", "none"):
        ground = replace(ground, texture=PLAIN)
    if texture_variant in ("plane-only", "none"):
        objects = [replace(o, texture=PLAIN) for o in objects]
    return AnalyticScene(tuple([ground] + objects), scene_id)


# -- view rendering ---------------------------------------------------------------------


def render_rgb_view(scene: AnalyticScene, camera: CameraModel):
    """(rgb, z_depth, camera-space normals, hit mask), all exact ray-trace."""
    u, v = camera.pixel_grid()
    dirs_cam = camera.pixel_dirs(u.ravel(), v.ravel())
    dirs_world = camera.cam_to_world_dir(dirs_cam)
    res = trace_rays(scene, camera.center, dirs_world)
    rgb = shade(res["albedo"], res["normal"], dirs_world)
    rgb[~res["hit"]] = 0.0
    z = np.where(res["hit"], res["depth"] * dirs_cam[:, 2], 0.0)
    n_cam = res["normal"] @ camera.rotation.T
    flip = (n_cam * dirs_cam).sum(axis=-1) > 0
    n_cam = np.where(flip[:, None], -n_cam, n_cam)
    n_cam[~res["hit"]] = 0.0
    h, w = camera.height, camera.width
    return (rgb.reshape(h, w, 3), z.reshape(h, w), n_cam.reshape(h, w, 3),
            res["hit"].reshape(h, w))


def render_gt_transient(scene: AnalyticScene, rig: SensorRig, seed, view_index: int,
                        n_rays: int = 1024) -> np.ndarray:
    """(ny, nx, n_bins) cone Monte-Carlo histograms with unit deposits."""
    lidar = rig.lidar
    out = np.zeros((lidar.ny, lidar.nx, lidar.n_bins))
    for iy in range(lidar.ny):
        for ix in range(lidar.nx):
            cone = pixel_cone(lidar, (ix, iy))
            s = sample_cone(cone, n_rays, (seed, view_index, iy * lidar.nx + ix))
            origin, dirs = rig.world_ray(s.dirs)
            res = trace_rays(scene, origin, dirs)
            ba = bin_index(res["depth"][res["hit"]], lidar.bin_width_s, lidar.n_bins)
            w = s.weights[res["hit"]]
            keep = ba.in_range
            np.add.at(out[iy, ix], ba.lower_bin[keep], w[keep] * ba.w1[keep])
            hi = ba.lower_bin[keep] + 1
            ok = hi < lidar.n_bins
            np.add.at(out[iy, ix], hi[ok], (w[keep] * ba.w2[keep])[ok])
    return out


def zone_center_coords(rig: SensorRig, zone: tuple) -> tuple:
    u0, u1, v0, v1 = rig.zone_pixel_rect(zone)
    return (u0 + u1) / 2.0, (v0 + v1) / 2.0


def render_sparse_depths(scene: AnalyticScene, rig: SensorRig) -> list:
    """Exact z-depths at the zone-center rays; depth -1 marks a miss."""
    rows = []
    for ix, iy in ((x, y) for y in range(rig.lidar.ny) for x in range(rig.lidar.nx)):
        u, v = zone_center_coords(rig, (ix, iy))
        d_cam = rig.camera.pixel_dirs(np.array([u]), np.array([v]))
        d_world = rig.camera.cam_to_world_dir(d_cam)
        res = trace_rays(scene, rig.camera.center, d_world)
        depth = float(res["depth"][0] * d_cam[0, 2]) if res["hit"][0] else -1.0
        rows.append((ix, iy, u, v, depth))
    return rows


def add_gaussian_noise(image: np.ndarray, snr_db: float, seed) -> np.ndarray:
    """RGB low-light model: sigma = rms(image) / 10^(snr_db/20), clipped to [0,1].

    +inf dB returns the image untouched; -inf dB replaces it with pure noise
    N(mean(image), rms(image)^2).
    """
    img = np.asarray(image, dtype=np.float64)
    if math.isinf(snr_db) and snr_db > 0:
        return img
    rng = rng_for(seed) if np.isscalar(seed) else rng_for(*np.atleast_1d(seed))
    rms = float(np.sqrt(np.mean(img**2)))
    if math.isinf(snr_db):  # -inf: complete noise
        noise = rng.normal(float(img.mean()), rms, size=img.shape)
        return np.clip(noise, 0.0, 1.0)
    sigma = rms / (10.0 ** (snr_db / 20.0))
    return np.clip(img + rng.normal(0.0, sigma, size=img.shape), 0.0, 1.0)


# -- dataset bundles -----------------------------------------------------------------------


@dataclass
class ViewRecord:
    index: int
    split: str             # "train" | "test"
    rig: SensorRig
    rgb: np.ndarray        # stored measurement (noisy for training views)
    transient: np.ndarray  # (ny, nx, n_bins)
    sparse: list           # rows (ix, iy, u, v, depth_m)
    gt_depth: np.ndarray   # z-depth, 0 where no surface
    gt_normal: np.ndarray  # camera-space unit normals, 0 where no surface


@dataclass
class DatasetBundle:
    views: list
    lidar: LidarConfig
    manifest: dict = field(default_factory=dict)
    root: Path | None = None

    def train_views(self):
        return [v for v in self.views if v.split == "train"]

    def test_views(self):
        return [v for v in self.views if v.split == "test"]


def camera_ring(n: int, radius: float, height: float, lidar: LidarConfig,
                image_size: int, phase: float, target) -> list:
    """Sensor rigs on a circle, all aimed at `target`."""
    rigs = []
    for k in range(n):
        az = phase + 2.0 * math.pi * k / n
        eye = np.array([radius * math.cos(az), radius * math.sin(az), height])
        r, t = look_at(eye, np.asarray(target, dtype=np.float64))
        rigs.append(SensorRig.build(lidar, image_size, r, t))
    return rigs


def make_protocol_dataset(scene_id: str, texture_variant: str, *, n_train: int = 10,
                          n_test: int = 10, snr_db: float = math.inf, seed: int = 0,
                          lidar: LidarConfig | None = None, image_size: int = 128,
                          gt_rays: int = 1024, radius: float = 0.75,
                          height: float = 0.55, target=(0.0, 0.0, 0.08),
                          poisson_photons: float | None = None,
                          out_dir=None) -> DatasetBundle:
    """Render the train/test capture protocol; optionally write it to disk.

    Training views carry the noisy RGB measurement; test views stay clean so
    evaluation compares against uncorrupted signal. Test azimuths are offset
    from training azimuths by half a spacing (disjoint, seed-deterministic).
    """
    lidar = lidar or LidarConfig()
    scene = make_scene(scene_id, texture_variant)
    phase = float(rng_for(seed, 101).uniform(0.0, 2.0 * math.pi))
    train_rigs = camera_ring(n_train, radius, height, lidar, image_size, phase, target)
    test_rigs = camera_ring(n_test, radius, height, lidar, image_size,
                            phase + math.pi / max(n_train, 1), target)
    views = []
    for k, rig in enumerate(train_rigs + test_rigs):
        split = "train" if k < n_train else "test"
        rgb, depth, normal, _ = render_rgb_view(scene, rig.camera)
        if split == "train":
            rgb = add_gaussian_noise(rgb, snr_db, (seed, k, 555))
        hist = render_gt_transient(scene, rig, seed, k, n_rays=gt_rays)
        if poisson_photons:
            rng = rng_for(seed, k, 888)
            hist = rng.poisson(hist * poisson_photons) / poisson_photons
        sparse = render_sparse_depths(scene, rig)
        views.append(ViewRecord(k, split, rig, rgb, hist, sparse, depth, normal))
    manifest = {
        "scene_id": scene_id,
        "texture_variant": texture_variant,
        "seed": seed,
        "snr_db": repr(float(snr_db)),
        "n_train": n_train,
        "n_test": n_test,
        "image_size": image_size,
        "gt_rays": gt_rays,
        "radius": radius,
        "height": height,
        "target": list(np.asarray(target, dtype=np.float64)),
        "lidar": {"nx": lidar.nx, "ny": lidar.ny, "ifov_deg": lidar.ifov_deg,
                  "bin_width_s": lidar.bin_width_s, "n_bins": lidar.n_bins,
                  "max_range_m": lidar.max_range_m,
                  "rays_per_cone": lidar.rays_per_cone},
        "splits": {"train": list(range(n_train)),
                   "test": list(range(n_train, n_train + n_test))},
    }
    bundle = DatasetBundle(views, lidar, manifest)
    if out_dir is not None:
        write_dataset(bundle, out_dir)
    return bundle


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_dataset(bundle: DatasetBundle, out_dir) -> Path:
    """Write the directory layout and a manifest hashing every file."""
    root = Path(out_dir)
    files = {}
    for view in bundle.views:
        vdir = root / "views" / str(view.index)
        fileio.write_png(vdir / "rgb.png", view.rgb)
        fileio.write_transient_bin(vdir / "transient.bin", view.transient)
        fileio.write_sparse_depth_csv(vdir / "sparse_depth.csv", view.sparse)
        fileio.write_pfm(vdir / "gt_depth.pfm", view.gt_depth)
        fileio.write_pfm(vdir / "gt_normal.pfm", view.gt_normal)
        fileio.save_pose_json(view.rig.camera, vdir / "pose.json")
        for name in ("rgb.png", "transient.bin", "sparse_depth.csv",
                     "gt_depth.pfm", "gt_normal.pfm", "pose.json"):
            rel = f"views/{view.index}/{name}"
            files[rel] = _sha256(vdir / name)
    manifest = dict(bundle.manifest)
    manifest["files"] = files
    with fileio.atomic_write(root / "manifest.json") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    bundle.manifest = manifest
    bundle.root = root
    return root


def load_dataset(root) -> DatasetBundle:
    """Read a dataset directory back into memory, verifying the manifest."""
    root = Path(root)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read dataset manifest under {root}: {e}") from e
    lc = manifest["lidar"]
    lidar = LidarConfig(nx=lc["nx"], ny=lc["ny"], ifov_deg=lc["ifov_deg"],
                        bin_width_s=lc["bin_width_s"], n_bins=lc["n_bins"],
                        max_range_m=lc["max_range_m"],
                        rays_per_cone=lc["rays_per_cone"])
    views = []
    for split in ("train", "test"):
        for k in manifest["splits"][split]:
            vdir = root / "views" / str(k)
            if not vdir.is_dir():
                raise DataError(f"dataset view directory missing: {vdir}")
            cam = fileio.load_pose_json(vdir / "pose.json")
            rig = SensorRig(cam, lidar)
            rgb = fileio.read_png(vdir / "rgb.png")
            hist = fileio.read_transient_bin(vdir / "transient.bin").astype(np.float64)
            sparse = fileio.read_sparse_depth_csv(vdir / "sparse_depth.csv")
            depth = fileio.read_pfm(vdir / "gt_depth.pfm").astype(np.float64)
            normal = fileio.read_pfm(vdir / "gt_normal.pfm").astype(np.float64)
            views.append(ViewRecord(k, split, rig, rgb, hist, sparse, depth, normal))
    return DatasetBundle(views, lidar, manifest, root)


# -- surfels on the analytic surface -----------------------------------------------------


def _quat_from_normal(n: np.ndarray) -> np.ndarray:
    """Unit quaternion whose rotation's third column equals n."""
    n = np.asarray(n, dtype=np.float64)
    n = n / np.linalg.norm(n)
    z = np.array([0.0, 0.0, 1.0])
    c = float(np.dot(z, n))
    if c > 1.0 - 1e-12:
        return np.array([1.0, 0.0, 0.0, 0.0])
    if c < -1.0 + 1e-12:
        return np.array([0.0, 1.0, 0.0, 0.0])  # 180 deg about x
    axis = np.cross(z, n)
    axis /= np.linalg.norm(axis)
    half = math.acos(c) / 2.0
    return np.array([math.cos(half), *(math.sin(half) * axis)])


def _plane_points(prim: Plane, spacing: float, region_radius: float):
    n = np.asarray(prim.normal, dtype=np.float64)
    n /= np.linalg.norm(n)
    u, v = plane_basis(n)
    half = min(prim.extent, region_radius)
    k = max(1, int(round(2 * half / spacing)))
    coords = (np.arange(k) + 0.5) / k * 2 * half - half
    a, b = np.meshgrid(coords, coords, indexing="ij")
    pts = (np.asarray(prim.point, dtype=np.float64)
           + a.reshape(-1, 1) * u + b.reshape(-1, 1) * v)
    return pts, np.broadcast_to(n, pts.shape).copy()


def _sphere_points(prim: Sphere, spacing: float):
    count = max(8, int(round(4 * math.pi * prim.radius**2 / spacing**2)))
    golden = math.pi * (3.0 - math.sqrt(5.0))
    i = np.arange(count)
    z = 1.0 - 2.0 * (i + 0.5) / count
    r = np.sqrt(1.0 - z * z)
    th = golden * i
    normals = np.stack([r * np.cos(th), r * np.sin(th), z], axis=1)
    return np.asarray(prim.center) + prim.radius * normals, normals


def _box_points(prim: Box, spacing: float):
    vmin = np.asarray(prim.vmin, dtype=np.float64)
    vmax = np.asarray(prim.vmax, dtype=np.float64)
    pts, normals = [], []
    for axis in range(3):
        o1, o2 = (axis + 1) % 3, (axis + 2) % 3
        k1 = max(1, int(round((vmax[o1] - vmin[o1]) / spacing)))
        k2 = max(1, int(round((vmax[o2] - vmin[o2]) / spacing)))
        c1 = vmin[o1] + (np.arange(k1) + 0.5) / k1 * (vmax[o1] - vmin[o1])
        c2 = vmin[o2] + (np.arange(k2) + 0.5) / k2 * (vmax[o2] - vmin[o2])
        a, b = np.meshgrid(c1, c2, indexing="ij")
        for side, coord in ((-1.0, vmin[axis]), (1.0, vmax[axis])):
            p = np.zeros((k1 * k2, 3))
            p[:, axis], p[:, o1], p[:, o2] = coord, a.ravel(), b.ravel()
            n = np.zeros((k1 * k2, 3))
            n[:, axis] = side
            pts.append(p)
            normals.append(n)
    return np.concatenate(pts), np.concatenate(normals)


def surface_surfels(scene: AnalyticScene, spacing: float, *, opacity: float = 1.0,
                    scale_factor: float = 0.7, region_radius: float = 0.5) -> Scene:
    """Surfels lying exactly on the analytic surfaces (oracle scenes for tests).

    Planes get a square grid limited to `region_radius`; spheres a Fibonacci
    point set; boxes a grid per face. DC color encodes the local albedo.
    """
    positions, normals, albedos = [], [], []
    for prim in scene.primitives:
        if isinstance(prim, Plane):
            pts, nrm = _plane_points(prim, spacing, region_radius)
        elif isinstance(prim, Sphere):
            pts, nrm = _sphere_points(prim, spacing)
        elif isinstance(prim, Box):
            pts, nrm = _box_points(prim, spacing)
        else:
            raise DataError(f"unsupported primitive {type(prim).__name__}")
        positions.append(pts)
        normals.append(nrm)
        albedos.append(prim.texture.albedo(pts))
    positions = np.concatenate(positions)
    normals = np.concatenate(normals)
    albedos = np.concatenate(albedos)
    quats = np.stack([_quat_from_normal(n) for n in normals])
    n = len(positions)
    coeffs = ((albedos - 0.5) / SH_C0)[:, None, :]
    return Scene(positions, quats, np.full((n, 2), spacing * scale_factor),
                 np.full(n, opacity), coeffs)
