"""Delimited report tables and matplotlib figures for CLI runs.

All writers are deterministic: fixed column orders, fixed dpi, and PNGs saved
without a Software metadata chunk so identical runs produce identical bytes.
"""
from __future__ import annotations

import csv
import io
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402

from .fileio import atomic_write  # noqa: E402

_DPI = 120
_PNG_META = {"Software": None}  # drop the version chunk -> reproducible bytes

TRACE_COLUMNS = ("iteration", "total", "rgb", "transient", "reg", "sparse",
                 "n_surfels")
RANK_COLUMNS = ("config", "views", "rank", "fraction", "rows")
METRIC_COLUMNS = ("view_index", "psnr_db", "ssim", "depth_mae_m",
                  "normal_mae_deg", "depth_pixels", "normal_pixels")


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_table_csv(path, rows: list, columns: tuple,
                    header_comments: tuple = ()) -> None:
    """Write dict rows as CSV with a fixed column order, atomically.

    ``header_comments`` lines are emitted first, prefixed with '# '.
    """
    buf = io.StringIO()
    for line in header_comments:
        buf.write(f"# {line}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row.get(c)) for c in columns])
    with atomic_write(path) as fh:
        fh.write(buf.getvalue())


def read_table_csv(path) -> list:
    """Read a CSV written by write_table_csv back into dict rows (strings)."""
    rows = []
    with open(path, newline="") as fh:
        data = [ln for ln in fh if not ln.startswith("#")]
    for row in csv.DictReader(data):
        rows.append(dict(row))
    return rows


def _save(fig, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=_DPI, metadata=_PNG_META)
    plt.close(fig)


def render_loss_curves(trace: list, path) -> None:
    """Loss components vs iteration, log-scaled where strictly positive."""
    fig, ax = plt.subplots(figsize=(7.0, 4.5))
    if trace:
        its = [row["iteration"] for row in trace]
        for key in ("total", "rgb", "transient", "reg", "sparse"):
            vals = [row.get(key, 0.0) for row in trace]
            if any(v != 0.0 for v in vals):
                ax.plot(its, vals, label=key)
        if any(v > 0.0 for row in trace for v in [row.get("total", 0.0)]):
            ax.set_yscale("log")
        ax.legend(loc="upper right", fontsize=8)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_title("optimization trace")
    _save(fig, path)


def render_weight_map(weights: np.ndarray, path, *,
                      title: str = "per-zone photometric weight") -> None:
    """Heatmap of the (ny, nx) patch weight map in [0, 1]."""
    fig, ax = plt.subplots(figsize=(4.5, 4.0))
    im = ax.imshow(np.asarray(weights, dtype=float), vmin=0.0, vmax=1.0,
                   cmap="viridis", interpolation="nearest")
    fig.colorbar(im, ax=ax, shrink=0.85)
    ax.set_title(title, fontsize=10)
    ax.set_xlabel("zone x")
    ax.set_ylabel("zone y")
    _save(fig, path)


def render_rank_curves(rows: list, path, full_rank: int) -> None:
    """Measurement-matrix rank vs view count, one line per sensor config."""
    fig, ax = plt.subplots(figsize=(6.5, 4.5))
    configs = sorted({row["config"] for row in rows})
    for name in configs:
        sub = sorted((r for r in rows if r["config"] == name),
                     key=lambda r: r["views"])
        ax.plot([r["views"] for r in sub], [r["rank"] for r in sub],
                marker="o", label=name)
    ax.axhline(full_rank, color="gray", linestyle="--", linewidth=1.0,
               label=f"full rank ({full_rank})")
    ax.set_xlabel("number of views")
    ax.set_ylabel("matrix rank")
    ax.set_title("recoverable rank vs views")
    ax.legend(loc="lower right", fontsize=8)
    _save(fig, path)


def render_view_comparison(pred, view, path) -> None:
    """Rendered vs reference RGB and depth panels for one test view."""
    gt_depth = np.asarray(view.gt_depth, dtype=float)
    dmax = float(max(gt_depth.max(), pred.depth.max(), 1e-6))
    fig, axes = plt.subplots(2, 2, figsize=(7.5, 7.0))
    panels = [(np.clip(pred.color, 0.0, 1.0), "rendered RGB", None),
              (np.clip(view.rgb, 0.0, 1.0), "reference RGB", None),
              (pred.depth, "rendered depth", (0.0, dmax)),
              (gt_depth, "reference depth", (0.0, dmax))]
    for ax, (img, title, rng) in zip(axes.ravel(), panels):
        if img.ndim == 2:
            ax.imshow(img, cmap="magma", vmin=rng[0], vmax=rng[1])
        else:
            ax.imshow(img)
        ax.set_title(title, fontsize=9)
        ax.axis("off")
    fig.suptitle(f"test view {view.index}")
    _save(fig, path)
