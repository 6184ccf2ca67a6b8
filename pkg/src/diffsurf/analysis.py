"""Recoverability analysis on a voxelized 2D scene.

A planar scene is discretized into n x n occupancy cells and a time-resolved
sensor sweeps around it on a circle. Each (view, pixel, bin) measurement is
modeled as a binary incidence row over the cells: 1 where the cell center
falls inside the pixel's angular wedge and its round-trip distance lands in
the bin (no occlusion, no falloff). The rank of the stacked matrix measures
how much scene structure the configuration can recover; sweeping view counts
compares wide-wedge (diffuse) against pencil-beam (sparse) sensing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import C_LIGHT

DEFAULT_GRID_N = 30
DEFAULT_PIXELS_PER_VIEW = 8
DEFAULT_BINS = 64
SPARSE_WEDGE_RATIO = 50.0     # pencil beam = diffuse wedge / 50
VIEW_RADIUS_FACTOR = 2.0      # sensor circle radius = 2 x grid extent
RANK_TOL_FACTOR = 2.0 ** -40  # tol = max(m, n) * sigma_max * this
DEFAULT_VIEW_COUNTS = (1, 2, 4, 8, 16)
CONFIG_NAMES = ("diffuse", "sparse")


@dataclass(frozen=True)
class VoxelGrid2D:
    """Axis-aligned rectangle split into n x n square-ish cells."""

    lo: tuple
    hi: tuple
    n: int = DEFAULT_GRID_N

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=np.float64)
        hi = np.asarray(self.hi, dtype=np.float64)
        if lo.shape != (2,) or hi.shape != (2,):
            raise ValueError("grid corners must be 2D points")
        if not (hi > lo).all():
            raise ValueError("grid must have positive extent")
        if self.n < 1:
            raise ValueError("grid resolution must be >= 1")
        object.__setattr__(self, "lo", tuple(float(v) for v in lo))
        object.__setattr__(self, "hi", tuple(float(v) for v in hi))

    @property
    def n_cells(self) -> int:
        return self.n * self.n

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (np.asarray(self.lo) + np.asarray(self.hi))

    @property
    def extent(self) -> float:
        """Largest side length; the sensor circle scales with this."""
        size = np.asarray(self.hi) - np.asarray(self.lo)
        return float(size.max())

    @property
    def half_diagonal(self) -> float:
        size = np.asarray(self.hi) - np.asarray(self.lo)
        return 0.5 * float(np.linalg.norm(size))

    def cell_centers(self) -> np.ndarray:
        """(n*n, 2) cell centers, row-major over (iy, ix)."""
        lo = np.asarray(self.lo)
        hi = np.asarray(self.hi)
        xs = lo[0] + (np.arange(self.n) + 0.5) * (hi[0] - lo[0]) / self.n
        ys = lo[1] + (np.arange(self.n) + 0.5) * (hi[1] - lo[1]) / self.n
        gx, gy = np.meshgrid(xs, ys, indexing="xy")
        return np.stack([gx.ravel(), gy.ravel()], axis=1)

    @staticmethod
    def square(extent: float = 1.0, n: int = DEFAULT_GRID_N) -> "VoxelGrid2D":
        h = extent / 2.0
        return VoxelGrid2D((-h, -h), (h, h), n)


@dataclass(frozen=True)
class Pose2D:
    """Sensor position and facing direction in the plane."""

    position: tuple
    heading: float  # radians

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=np.float64)
        if pos.shape != (2,) or not np.isfinite(pos).all() \
                or not math.isfinite(self.heading):
            raise ValueError("pose must be a finite 2D position and heading")
        object.__setattr__(self, "position", tuple(float(v) for v in pos))


@dataclass
class ForwardMatrix:
    """Stacked binary incidence rows y = A x with per-row provenance."""

    matrix: np.ndarray       # (rows, n_cells) of {0, 1}
    view_index: np.ndarray   # (rows,)
    pixel_index: np.ndarray  # (rows,)
    bin_index: np.ndarray    # (rows,)
    grid: VoxelGrid2D

    @property
    def shape(self) -> tuple:
        return self.matrix.shape


def wrap_angle(a):
    """Map angles to (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(a, dtype=np.float64), 2.0 * np.pi)


def build_forward_matrix(grid: VoxelGrid2D, sensor_path, ifov: float,
                         pixels_per_view: int = DEFAULT_PIXELS_PER_VIEW,
                         bins: int = DEFAULT_BINS, bin_width_s: float = None, *,
                         pixel_spacing: float = None) -> ForwardMatrix:
    """Binary incidence matrix over (view, pixel, bin) measurement rows.

    `ifov` is each pixel's angular wedge width (radians); pixel centers are
    laid out symmetrically around the pose heading every `pixel_spacing`
    radians (default: ifov, i.e. contiguous wedges). A narrower-than-spacing
    ifov models pencil beams sampling the same directions. `bin_width_s` is
    the time-of-flight bin width; a cell occupies the bin its round-trip
    distance falls in.
    """
    poses = list(sensor_path)
    if not poses:
        raise ValueError("sensor path must contain at least one pose")
    if not ifov > 0.0:
        raise ValueError("ifov must be positive")
    if pixels_per_view < 1 or bins < 1:
        raise ValueError("pixels_per_view and bins must be >= 1")
    if bin_width_s is None or not bin_width_s > 0.0:
        raise ValueError("bin_width_s must be positive")
    spacing = ifov if pixel_spacing is None else float(pixel_spacing)
    if not spacing > 0.0:
        raise ValueError("pixel_spacing must be positive")

    centers = grid.cell_centers()
    n_cells = centers.shape[0]
    n_rows = len(poses) * pixels_per_view * bins
    a = np.zeros((n_rows, n_cells))
    view_idx = np.repeat(np.arange(len(poses)), pixels_per_view * bins)
    pixel_idx = np.tile(np.repeat(np.arange(pixels_per_view), bins), len(poses))
    bin_idx = np.tile(np.arange(bins), len(poses) * pixels_per_view)

    offsets = (np.arange(pixels_per_view) - (pixels_per_view - 1) / 2.0) * spacing
    bin_len = C_LIGHT * bin_width_s  # round-trip distance per bin
    cell_ids = np.arange(n_cells)
    for v, pose in enumerate(poses):
        rel = centers - np.asarray(pose.position)
        ang = np.arctan2(rel[:, 1], rel[:, 0])
        b = np.floor(2.0 * np.hypot(rel[:, 0], rel[:, 1]) / bin_len).astype(np.int64)
        in_range = (b >= 0) & (b < bins)
        for p in range(pixels_per_view):
            direction = pose.heading + offsets[p]
            hit = (np.abs(wrap_angle(ang - direction)) <= ifov / 2.0) & in_range
            if not hit.any():
                continue
            rows = (v * pixels_per_view + p) * bins + b[hit]
            a[rows, cell_ids[hit]] = 1.0
    return ForwardMatrix(a, view_idx, pixel_idx, bin_idx, grid)


def matrix_rank(a: np.ndarray, tol: float = None) -> int:
    """Singular values above `tol` (default max(m,n) * sigma_max * 2^-40)."""
    a = np.asarray(a, dtype=np.float64)
    if a.size == 0:
        return 0
    if not np.isfinite(a).all():
        raise ValueError("matrix must be finite")
    sigma = np.linalg.svd(a, compute_uv=False)
    if sigma.size == 0 or sigma[0] == 0.0:
        return 0
    if tol is None:
        tol = max(a.shape) * sigma[0] * RANK_TOL_FACTOR
    return int(np.count_nonzero(sigma > tol))


def circle_poses(grid: VoxelGrid2D, n_views: int, radius: float = None) -> list:
    """Uniformly spaced poses on a circle around the grid, aimed at its center."""
    if n_views < 0:
        raise ValueError("n_views must be >= 0")
    if radius is None:
        radius = VIEW_RADIUS_FACTOR * grid.extent
    cx, cy = grid.center
    poses = []
    for k in range(n_views):
        az = 2.0 * math.pi * k / n_views
        pos = (cx + radius * math.cos(az), cy + radius * math.sin(az))
        poses.append(Pose2D(pos, wrap_angle(az + math.pi)))
    return poses


def auto_bin_width(grid: VoxelGrid2D, radius: float = None,
                   bins: int = DEFAULT_BINS) -> float:
    """Bin width (seconds) so `bins` bins cover every cell seen from the circle."""
    if radius is None:
        radius = VIEW_RADIUS_FACTOR * grid.extent
    reach = radius + grid.half_diagonal
    return 2.0 * reach * (1.0 + 1e-9) / (C_LIGHT * bins)


def sensor_fov(grid: VoxelGrid2D, radius: float = None) -> float:
    """Full angle under which the grid's bounding circle is seen."""
    if radius is None:
        radius = VIEW_RADIUS_FACTOR * grid.extent
    if not radius > grid.half_diagonal:
        raise ValueError("sensor circle must lie outside the grid")
    return 2.0 * math.asin(grid.half_diagonal / radius)


def rank_sweep(grid: VoxelGrid2D = None, view_counts=DEFAULT_VIEW_COUNTS, *,
               pixels_per_view: int = DEFAULT_PIXELS_PER_VIEW,
               bins: int = DEFAULT_BINS, sparse_ratio: float = SPARSE_WEDGE_RATIO,
               radius: float = None, bin_width_s: float = None,
               configs=CONFIG_NAMES) -> list:
    """Rank-vs-view-count table for wide-wedge and pencil-beam sensing.

    Returns one dict per (config, view count): {"config", "views", "rank",
    "fraction", "rows"}; fraction is rank / cell count. Both configurations
    sample the same pixel directions; the sparse config's wedge is
    `sparse_ratio` times narrower.
    """
    grid = grid or VoxelGrid2D.square()
    counts = list(view_counts)
    if counts != sorted(counts):
        raise ValueError("view counts must be ascending")
    if any(c < 0 for c in counts):
        raise ValueError("view counts must be >= 0")
    if sparse_ratio < 1.0:
        raise ValueError("sparse_ratio must be >= 1")
    unknown = [c for c in configs if c not in CONFIG_NAMES]
    if unknown:
        raise ValueError(f"unknown configs {unknown}; choose from {CONFIG_NAMES}")
    if radius is None:
        radius = VIEW_RADIUS_FACTOR * grid.extent
    if bin_width_s is None:
        bin_width_s = auto_bin_width(grid, radius, bins)
    spacing = sensor_fov(grid, radius) / pixels_per_view
    widths = {"diffuse": spacing, "sparse": spacing / sparse_ratio}

    table = []
    for config in configs:
        for count in counts:
            if count == 0:
                table.append({"config": config, "views": 0, "rank": 0,
                              "fraction": 0.0, "rows": 0})
                continue
            poses = circle_poses(grid, count, radius)
            fwd = build_forward_matrix(grid, poses, widths[config],
                                       pixels_per_view, bins, bin_width_s,
                                       pixel_spacing=spacing)
            rank = matrix_rank(fwd.matrix)
            table.append({"config": config, "views": count, "rank": rank,
                          "fraction": rank / grid.n_cells,
                          "rows": fwd.matrix.shape[0]})
    return table
