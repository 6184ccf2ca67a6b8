"""Image, depth, and normal quality metrics plus per-dataset evaluation reports.

All metrics compare a rendered view against its reference buffers:

* PSNR over full [0, 1] RGB frames, capped for identical images.
* SSIM (same Gaussian-window statistic the photometric loss uses).
* Depth mean absolute error in meters over jointly covered pixels.
* Normal mean angular error in degrees over jointly covered pixels.

Depth / normal metrics are ``None`` when the joint mask is empty; aggregates
average each metric over the views where it is present.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .loss import ssim
from .raster import RenderBuffers, render_image

PSNR_CAP_DB = 99.0


def psnr_db(pred: np.ndarray, ref: np.ndarray, cap: float = PSNR_CAP_DB) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1].

    Identical images have infinite PSNR and are reported as ``cap``.
    """
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {ref.shape}")
    mse = float(np.mean((pred - ref) ** 2))
    if mse <= 0.0:
        return float(cap)
    return float(min(10.0 * np.log10(1.0 / mse), cap))


def ssim_value(pred: np.ndarray, ref: np.ndarray, *, window_size: int = 11) -> float:
    """Forward-only mean SSIM between two images (dynamic range 1)."""
    return float(ssim(np.asarray(pred, dtype=np.float64),
                      np.asarray(ref, dtype=np.float64),
                      window_size=window_size).data)


def depth_mae_m(pred: np.ndarray, ref: np.ndarray, mask: np.ndarray):
    """Mean |pred - ref| in meters over ``mask``; None when the mask is empty."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return None
    diff = np.abs(np.asarray(pred, dtype=np.float64)
                  - np.asarray(ref, dtype=np.float64))
    return float(diff[mask].mean())


def normal_mae_deg(pred: np.ndarray, ref: np.ndarray, mask: np.ndarray):
    """Mean angle in degrees between unit-normalized normals over ``mask``.

    Pixels whose predicted or reference normal has (near-)zero length are
    dropped from the mask. Returns None when nothing remains.
    """
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    pn = np.linalg.norm(pred, axis=-1)
    rn = np.linalg.norm(ref, axis=-1)
    ok = mask & (pn > 1e-12) & (rn > 1e-12)
    if not ok.any():
        return None
    dots = (pred[ok] * ref[ok]).sum(axis=-1) / (pn[ok] * rn[ok])
    ang = np.degrees(np.arccos(np.clip(dots, -1.0, 1.0)))
    return float(ang.mean())


def _round_trip(value):
    return None if value is None else float(value)


@dataclass
class ViewMetrics:
    """Per-view metric values plus the mask sizes they were computed over."""

    view_index: int
    psnr_db: float
    ssim: float
    depth_mae_m: object          # float | None
    normal_mae_deg: object       # float | None
    depth_pixels: int            # size of the joint depth mask
    normal_pixels: int           # size of the joint normal mask

    def to_dict(self) -> dict:
        return {
            "view_index": int(self.view_index),
            "psnr_db": float(self.psnr_db),
            "ssim": float(self.ssim),
            "depth_mae_m": _round_trip(self.depth_mae_m),
            "normal_mae_deg": _round_trip(self.normal_mae_deg),
            "depth_pixels": int(self.depth_pixels),
            "normal_pixels": int(self.normal_pixels),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ViewMetrics":
        return cls(view_index=int(d["view_index"]),
                   psnr_db=float(d["psnr_db"]),
                   ssim=float(d["ssim"]),
                   depth_mae_m=_round_trip(d["depth_mae_m"]),
                   normal_mae_deg=_round_trip(d["normal_mae_deg"]),
                   depth_pixels=int(d["depth_pixels"]),
                   normal_pixels=int(d["normal_pixels"]))


@dataclass
class MetricsReport:
    """Per-view metrics plus aggregate means over the evaluated views."""

    views: list
    aggregate: dict

    def to_dict(self) -> dict:
        return {"views": [v.to_dict() for v in self.views],
                "aggregate": dict(self.aggregate)}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        views = [ViewMetrics.from_dict(v) for v in d["views"]]
        agg = {k: _round_trip(v) if k != "n_views" else int(v)
               for k, v in d["aggregate"].items()}
        return cls(views=views, aggregate=agg)


_AGG_FIELDS = ("psnr_db", "ssim", "depth_mae_m", "normal_mae_deg")


def aggregate_metrics(views: list) -> dict:
    """Mean of each metric over the views where it is present."""
    agg: dict = {"n_views": len(views)}
    for name in _AGG_FIELDS:
        vals = [getattr(v, name) for v in views if getattr(v, name) is not None]
        agg[name] = float(np.mean(vals)) if vals else None
    return agg


def compute_view_metrics(pred: RenderBuffers, view, *,
                         ssim_window: int = 11) -> ViewMetrics:
    """Compare rendered buffers against a view record's reference buffers.

    Depth error uses pixels covered by both the render and the reference;
    normal error additionally requires nonzero normals on both sides.
    """
    gt_hit = np.asarray(view.gt_depth) > 0.0
    depth_mask = pred.coverage & gt_hit
    depth = depth_mae_m(pred.depth, view.gt_depth, depth_mask)
    gt_n = np.asarray(view.gt_normal, dtype=np.float64)
    normal_mask = (pred.coverage & gt_hit
                   & (np.linalg.norm(pred.normal, axis=-1) > 1e-12)
                   & (np.linalg.norm(gt_n, axis=-1) > 1e-12))
    normal = normal_mae_deg(pred.normal, gt_n, normal_mask)
    return ViewMetrics(view_index=int(view.index),
                       psnr_db=psnr_db(pred.color, view.rgb),
                       ssim=ssim_value(pred.color, view.rgb,
                                       window_size=ssim_window),
                       depth_mae_m=depth,
                       normal_mae_deg=normal,
                       depth_pixels=int(depth_mask.sum()),
                       normal_pixels=int(normal_mask.sum()))


def evaluate_scene(scene, views: list, *, ssim_window: int = 11,
                   band_rows: int = 16) -> MetricsReport:
    """Render ``scene`` from each view's camera and score it against the refs."""
    per_view = []
    for view in views:
        pred = render_image(scene, view.rig.camera, band_rows=band_rows)
        per_view.append(compute_view_metrics(pred, view, ssim_window=ssim_window))
    return MetricsReport(views=per_view, aggregate=aggregate_metrics(per_view))
