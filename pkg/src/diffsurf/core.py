"""Domain types and pure geometric/color primitives.

Defines surfels (flattened rank-2 3D Gaussians), the RGB camera model, the
diffuse-LiDAR grid geometry, and transient containers, plus the evaluations
every other module consumes: covariance construction, Gaussian evaluation,
spherical-harmonic color, and per-zone sampling cones.

Conventions: distances in meters; camera frame is x-right, y-down, z-forward;
quaternions are (w, x, y, z); pixel (i, j) is sampled at (i + 0.5, j + 0.5).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

C_LIGHT = 299_792_458.0  # m/s

# real spherical-harmonic constants, bands 0..3 (basis order matches export)
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
         0.3731763325901154, -0.4570457994644658, 1.445305721320277,
         -0.5900435899266435)


class InvalidParameterError(ValueError):
    """Raised when a geometric/color primitive receives invalid parameters."""


def bin_range_width(bin_width_s: float) -> float:
    """One-way distance covered by a single time bin (round-trip halved)."""
    return C_LIGHT * bin_width_s / 2.0


# -- quaternions ---------------------------------------------------------------


def normalize_quaternion(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise InvalidParameterError("zero quaternion")
    return q / norm


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices from unit quaternions (w, x, y, z); shape (..., 3, 3)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    rows = [
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def random_unit_quaternions(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform samples on the quaternion sphere (normalized 4D normals)."""
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


# -- surfels and scenes ----------------------------------------------------------


@dataclass(frozen=True)
class Surfel:
    """One 2D Gaussian primitive: an oriented, colored surface element."""

    position: np.ndarray      # (3,) world
    rotation: np.ndarray      # (4,) unit quaternion; third rotation column = normal
    scale: np.ndarray         # (2,) principal radii; third axis fixed to 0
    opacity: float            # in [0, 1]
    color_coeffs: np.ndarray  # ((L+1)^2, 3) spherical-harmonic coefficients

    def normal(self) -> np.ndarray:
        return quat_to_rotmat(self.rotation)[:, 2]


@dataclass
class Scene:
    """Struct-of-arrays surfel collection (the optimized representation)."""

    positions: np.ndarray     # (N, 3)
    rotations: np.ndarray     # (N, 4)
    scales: np.ndarray        # (N, 2)
    opacities: np.ndarray     # (N,)
    color_coeffs: np.ndarray  # (N, (L+1)^2, 3)

    def __post_init__(self):
        self.positions = np.atleast_2d(np.asarray(self.positions, dtype=np.float64))
        self.rotations = np.atleast_2d(np.asarray(self.rotations, dtype=np.float64))
        self.scales = np.atleast_2d(np.asarray(self.scales, dtype=np.float64))
        self.opacities = np.atleast_1d(np.asarray(self.opacities, dtype=np.float64))
        self.color_coeffs = np.asarray(self.color_coeffs, dtype=np.float64)
        if self.color_coeffs.ndim == 2:
            self.color_coeffs = self.color_coeffs[:, None, :]
        n = self.positions.shape[0]
        shapes = (self.rotations.shape, self.scales.shape, self.opacities.shape,
                  self.color_coeffs.shape)
        if (self.rotations.shape != (n, 4) or self.scales.shape != (n, 2)
                or self.opacities.shape != (n,) or self.color_coeffs.shape[0] != n
                or self.color_coeffs.shape[2] != 3):
            raise InvalidParameterError(f"inconsistent scene arrays: {shapes}")
        bands = self.color_coeffs.shape[1]
        degree = int(round(math.sqrt(bands))) - 1
        if (degree + 1) ** 2 != bands or not 0 <= degree <= 3:
            raise InvalidParameterError(f"unsupported SH coefficient count {bands}")

    @property
    def n_surfels(self) -> int:
        return self.positions.shape[0]

    @property
    def sh_degree(self) -> int:
        return int(round(math.sqrt(self.color_coeffs.shape[1]))) - 1

    def surfel(self, i: int) -> Surfel:
        return Surfel(self.positions[i], self.rotations[i], self.scales[i],
                      float(self.opacities[i]), self.color_coeffs[i])

    def copy(self) -> "Scene":
        return Scene(self.positions.copy(), self.rotations.copy(), self.scales.copy(),
                     self.opacities.copy(), self.color_coeffs.copy())

    def validate(self) -> None:
        """Raise if any invariant is violated (called after optimizer steps)."""
        for name, arr in (("positions", self.positions), ("rotations", self.rotations),
                          ("scales", self.scales), ("opacities", self.opacities),
                          ("color_coeffs", self.color_coeffs)):
            if not np.all(np.isfinite(arr)):
                raise InvalidParameterError(f"non-finite values in {name}")
        norms = np.linalg.norm(self.rotations, axis=-1)
        if not np.allclose(norms, 1.0, atol=1e-6):
            raise InvalidParameterError("quaternions not unit norm")
        if np.any(self.scales < 0):
            raise InvalidParameterError("negative scale")
        if np.any((self.opacities < 0) | (self.opacities > 1)):
            raise InvalidParameterError("opacity outside [0, 1]")

    @staticmethod
    def from_surfels(surfels) -> "Scene":
        return Scene(
            np.stack([s.position for s in surfels]),
            np.stack([s.rotation for s in surfels]),
            np.stack([s.scale for s in surfels]),
            np.array([s.opacity for s in surfels]),
            np.stack([s.color_coeffs for s in surfels]),
        )

    def normals(self) -> np.ndarray:
        """(N, 3) world-space normals: third column of each rotation matrix."""
        return quat_to_rotmat(self.rotations)[..., :, 2]


def covariance_from_params(rotation: np.ndarray, scale: np.ndarray) -> np.ndarray:
    """3x3 covariance (RS)(RS)^T with S = diag(s1, s2, 0): PSD, rank <= 2."""
    rotation = np.asarray(rotation, dtype=np.float64)
    scale = np.asarray(scale, dtype=np.float64)
    if not (np.all(np.isfinite(rotation)) and np.all(np.isfinite(scale))):
        raise InvalidParameterError("non-finite rotation or scale")
    r = quat_to_rotmat(normalize_quaternion(rotation))
    s3 = np.concatenate([scale, [0.0]])
    rs = r * s3[None, :]
    return rs @ rs.T


def evaluate_gaussian(x: np.ndarray, surfel: Surfel) -> float:
    """Gaussian value at world point x, restricted to the surfel's plane.

    The covariance is rank-2, so the quadratic form uses the pseudo-inverse on
    the tangent subspace; the out-of-plane coordinate is handled by exact
    ray-plane intersection in the rasterizer, not here. A zero scale collapses
    support to a line/point along that axis.
    """
    x = np.asarray(x, dtype=np.float64)
    r = quat_to_rotmat(normalize_quaternion(surfel.rotation))
    local = r.T @ (x - surfel.position)
    q = 0.0
    for k in range(2):
        s = float(surfel.scale[k])
        if s > 0:
            q += (local[k] / s) ** 2
        elif abs(local[k]) > 1e-12:
            return 0.0
    return float(np.exp(-0.5 * q))


def sh_to_color(color_coeffs: np.ndarray, view_dir: np.ndarray) -> np.ndarray:
    """RGB from real spherical harmonics: degree 0 gives SH_C0*C0 + 0.5.

    `color_coeffs` has shape (..., (L+1)^2, 3); `view_dir` broadcasts with the
    leading dims. Output is not clamped (clamping happens at image assembly).
    """
    coeffs = np.asarray(color_coeffs, dtype=np.float64)
    bands = coeffs.shape[-2]
    degree = int(round(math.sqrt(bands))) - 1
    if (degree + 1) ** 2 != bands or not 0 <= degree <= 3:
        raise InvalidParameterError(f"coefficient count {bands} matches no degree <= 3")
    out = SH_C0 * coeffs[..., 0, :] + 0.5
    if degree == 0:
        return out
    d = np.asarray(view_dir, dtype=np.float64)
    x, y, z = d[..., 0:1], d[..., 1:2], d[..., 2:3]
    out = out + SH_C1 * (-y * coeffs[..., 1, :] + z * coeffs[..., 2, :] - x * coeffs[..., 3, :])
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out = out + (SH_C2[0] * x * y * coeffs[..., 4, :]
                     + SH_C2[1] * y * z * coeffs[..., 5, :]
                     + SH_C2[2] * (2 * zz - xx - yy) * coeffs[..., 6, :]
                     + SH_C2[3] * x * z * coeffs[..., 7, :]
                     + SH_C2[4] * (xx - yy) * coeffs[..., 8, :])
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        out = out + (SH_C3[0] * y * (3 * xx - yy) * coeffs[..., 9, :]
                     + SH_C3[1] * x * y * z * coeffs[..., 10, :]
                     + SH_C3[2] * y * (4 * zz - xx - yy) * coeffs[..., 11, :]
                     + SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy) * coeffs[..., 12, :]
                     + SH_C3[4] * x * (4 * zz - xx - yy) * coeffs[..., 13, :]
                     + SH_C3[5] * z * (xx - yy) * coeffs[..., 14, :]
                     + SH_C3[6] * x * (xx - yy) * coeffs[..., 15, :])
    return out


# -- cameras ---------------------------------------------------------------------


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera: intrinsics in pixels plus a world-to-camera transform."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray     # (3, 3) world-to-camera
    translation: np.ndarray  # (3,) so that x_cam = R @ x_world + t

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64))
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidParameterError("focal lengths must be positive")
        r = self.rotation
        if not (np.allclose(r @ r.T, np.eye(3), atol=1e-8)
                and np.isclose(np.linalg.det(r), 1.0, atol=1e-8)):
            raise InvalidParameterError("pose rotation must be orthonormal with det +1")

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def world_to_cam(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def cam_to_world_dir(self, dirs: np.ndarray) -> np.ndarray:
        return np.asarray(dirs, dtype=np.float64) @ self.rotation

    def project(self, points_cam: np.ndarray) -> np.ndarray:
        """Pixel coordinates (u, v) of camera-space points (requires z > 0)."""
        p = np.asarray(points_cam, dtype=np.float64)
        z = p[..., 2]
        return np.stack([self.fx * p[..., 0] / z + self.cx,
                         self.fy * p[..., 1] / z + self.cy], axis=-1)

    def pixel_dirs(self, u: np.ndarray, v: np.ndarray, normalized: bool = True) -> np.ndarray:
        """Camera-space ray directions through pixel coordinates (u, v)."""
        x = (np.asarray(u, dtype=np.float64) - self.cx) / self.fx
        y = (np.asarray(v, dtype=np.float64) - self.cy) / self.fy
        d = np.stack([x, y, np.ones_like(x)], axis=-1)
        if normalized:
            d = d / np.linalg.norm(d, axis=-1, keepdims=True)
        return d

    def pixel_grid(self) -> tuple[np.ndarray, np.ndarray]:
        """(u, v) sample coordinates at pixel centers, each shape (H, W)."""
        u = np.arange(self.width, dtype=np.float64) + 0.5
        v = np.arange(self.height, dtype=np.float64) + 0.5
        return np.meshgrid(u, v, indexing="xy")

    @staticmethod
    def from_fov(width: int, height: int, fov_x_deg: float, fov_y_deg: float,
                 rotation: np.ndarray, translation: np.ndarray) -> "CameraModel":
        fx = width / (2.0 * math.tan(math.radians(fov_x_deg) / 2.0))
        fy = height / (2.0 * math.tan(math.radians(fov_y_deg) / 2.0))
        return CameraModel(fx, fy, width / 2.0, height / 2.0, width, height,
                           rotation, translation)


def look_at(eye: np.ndarray, target: np.ndarray, up=(0.0, 0.0, 1.0)):
    """World-to-camera (R, t) with z toward `target`, y roughly opposite `up`."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward = forward / np.linalg.norm(forward)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(forward, up)
    if np.linalg.norm(right) < 1e-8:  # looking along up: pick any orthogonal axis
        up = np.array([1.0, 0.0, 0.0]) if abs(forward[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        right = np.cross(forward, up)
    right = right / np.linalg.norm(right)
    down = np.cross(forward, right)
    r = np.stack([right, down, forward])
    return r, -r @ eye


# -- diffuse LiDAR ------------------------------------------------------------------


@dataclass(frozen=True)
class LidarConfig:
    """Diffuse-LiDAR grid: zone layout, per-zone cone, and timing resolution."""

    nx: int = 8
    ny: int = 8
    ifov_deg: float = 4.9       # full cone angle per zone; total FOV = n * ifov
    bin_width_s: float = 40e-12
    n_bins: int = 256
    max_range_m: float = 1.5
    rays_per_cone: int = 64

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise InvalidParameterError("grid dimensions must be >= 1")
        if self.n_bins * bin_range_width(self.bin_width_s) < self.max_range_m:
            raise InvalidParameterError(
                "n_bins * (c*dt/2) must cover max_range_m "
                f"({self.n_bins * bin_range_width(self.bin_width_s):.4f} m "
                f"< {self.max_range_m} m)")

    @property
    def fov_x_deg(self) -> float:
        return self.nx * self.ifov_deg

    @property
    def fov_y_deg(self) -> float:
        return self.ny * self.ifov_deg

    @property
    def bin_distance_m(self) -> float:
        return bin_range_width(self.bin_width_s)


@dataclass(frozen=True)
class Cone:
    """Sampling cone of one LiDAR zone, in the sensor-local (camera) frame."""

    apex: np.ndarray     # (3,)
    axis: np.ndarray     # (3,) unit, through the zone center
    half_angle: float    # radians; equal-solid-angle cone approximation
    tan_rect: tuple      # (x0, x1, y0, y1) tangent-plane bounds of the zone

    def contains(self, dirs: np.ndarray, slack: float = 1e-9) -> np.ndarray:
        """True where unit directions fall inside the zone's tangent rectangle."""
        d = np.asarray(dirs, dtype=np.float64)
        x0, x1, y0, y1 = self.tan_rect
        tx, ty = d[..., 0] / d[..., 2], d[..., 1] / d[..., 2]
        return ((d[..., 2] > 0) & (tx >= x0 - slack) & (tx <= x1 + slack)
                & (ty >= y0 - slack) & (ty <= y1 + slack))


def _rect_solid_angle(x0, x1, y0, y1) -> float:
    """Solid angle of a tangent-plane rectangle seen from the origin."""

    def corner(a, b):
        return math.atan2(a * b, math.sqrt(1.0 + a * a + b * b))

    return abs(corner(x1, y1) - corner(x0, y1) - corner(x1, y0) + corner(x0, y0))


def pixel_cone(lidar: LidarConfig, zone: tuple) -> Cone:
    """Sampling cone for zone (ix, iy); zones tile the frustum in tangent space."""
    ix, iy = zone
    if not (0 <= ix < lidar.nx and 0 <= iy < lidar.ny):
        raise InvalidParameterError(f"zone {zone} outside {lidar.nx}x{lidar.ny} grid")
    tan_x = math.tan(math.radians(lidar.fov_x_deg) / 2.0)
    tan_y = math.tan(math.radians(lidar.fov_y_deg) / 2.0)
    x0 = -tan_x + 2.0 * tan_x * ix / lidar.nx
    x1 = -tan_x + 2.0 * tan_x * (ix + 1) / lidar.nx
    y0 = -tan_y + 2.0 * tan_y * iy / lidar.ny
    y1 = -tan_y + 2.0 * tan_y * (iy + 1) / lidar.ny
    cxt, cyt = 0.5 * (x0 + x1), 0.5 * (y0 + y1)
    axis = np.array([cxt, cyt, 1.0])
    axis /= np.linalg.norm(axis)
    omega = _rect_solid_angle(x0, x1, y0, y1)
    half_angle = math.acos(max(-1.0, 1.0 - omega / (2.0 * math.pi)))
    return Cone(np.zeros(3), axis, half_angle, (x0, x1, y0, y1))


@dataclass(frozen=True)
class TransientImage:
    """Per-zone photon histograms: histograms[iy, ix, t] (file order [Ny][Nx][Nt])."""

    histograms: np.ndarray  # (ny, nx, n_bins), counts >= 0
    bin_width_s: float

    def __post_init__(self):
        object.__setattr__(self, "histograms",
                           np.asarray(self.histograms, dtype=np.float64))
        if self.histograms.ndim != 3:
            raise InvalidParameterError("histograms must be (ny, nx, n_bins)")
        if np.any(self.histograms < 0):
            raise InvalidParameterError("negative histogram counts")

    @property
    def n_bins(self) -> int:
        return self.histograms.shape[2]

    @property
    def grid_shape(self) -> tuple:
        """(nx, ny)"""
        return self.histograms.shape[1], self.histograms.shape[0]


@dataclass(frozen=True)
class SensorRig:
    """Co-located RGB camera and diffuse LiDAR sharing one pose.

    The LiDAR grid tiles the camera frustum: zone (ix, iy) covers exactly the
    pixel rectangle returned by `zone_pixel_rect`, which requires the camera
    FOV to equal the LiDAR FOV and the resolution to divide by the grid.
    """

    camera: CameraModel
    lidar: LidarConfig

    def zone_pixel_rect(self, zone: tuple) -> tuple:
        """(u0, u1, v0, v1) pixel bounds of the zone's RGB patch."""
        ix, iy = zone
        w, h = self.camera.width, self.camera.height
        u0 = ix * w // self.lidar.nx
        u1 = (ix + 1) * w // self.lidar.nx
        v0 = iy * h // self.lidar.ny
        v1 = (iy + 1) * h // self.lidar.ny
        return u0, u1, v0, v1

    def zones(self):
        for iy in range(self.lidar.ny):
            for ix in range(self.lidar.nx):
                yield (ix, iy)

    def world_ray(self, dirs_local: np.ndarray) -> tuple:
        """(origin, world directions) for sensor-local unit directions."""
        return self.camera.center, self.camera.cam_to_world_dir(dirs_local)

    @staticmethod
    def build(lidar: LidarConfig, image_size: int, rotation: np.ndarray,
              translation: np.ndarray) -> "SensorRig":
        """Square camera whose frustum matches the LiDAR grid exactly."""
        if image_size % lidar.nx != 0 or image_size % lidar.ny != 0:
            raise InvalidParameterError("image size must divide by the LiDAR grid")
        cam = CameraModel.from_fov(image_size, image_size, lidar.fov_x_deg,
                                   lidar.fov_y_deg, rotation, translation)
        return SensorRig(cam, lidar)


__all__ = [
    "C_LIGHT", "SH_C0", "SH_C1", "SH_C2", "SH_C3",
    "InvalidParameterError", "bin_range_width",
    "normalize_quaternion", "quat_to_rotmat", "random_unit_quaternions",
    "Surfel", "Scene", "covariance_from_params", "evaluate_gaussian", "sh_to_color",
    "CameraModel", "look_at",
    "LidarConfig", "Cone", "pixel_cone", "TransientImage", "SensorRig",
]
