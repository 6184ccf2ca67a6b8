"""Command-line entry points: simulate, reconstruct, analyze-rank, eval, export-ply.

Set ``DIFFSURF_THREADS`` to pin the BLAS/OpenMP thread count; it must be read
before numpy is imported, which is why this module configures the environment
at the very top.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical divergence.

A learned monocular-depth baseline is intentionally not provided: every
reconstruction mode here uses only the physics-based sensor models, so results
stay self-contained and exactly reproducible.
"""
from __future__ import annotations

import os


def _set_thread_env() -> None:
    n = os.environ.get("DIFFSURF_THREADS")
    if n:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS",
                    "VECLIB_MAXIMUM_THREADS"):
            os.environ.setdefault(var, n)


_set_thread_env()

import argparse  # noqa: E402
import dataclasses  # noqa: E402
import json  # noqa: E402
import sys  # noqa: E402
import time  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from . import __version__  # noqa: E402
from . import analysis, metrics, report  # noqa: E402
from .config import (ConfigError, SimulateConfig, load_json_config,  # noqa: E402
                     optim_config_snapshot, reconstruct_config_from_dict)
from .fileio import (DataError, atomic_write, export_ply,  # noqa: E402
                     load_scene_json, save_scene_json)
from .loss import MODES, build_patch_weights, effective_weights  # noqa: E402
from .manifest import RunManifest  # noqa: E402
from .optim import OptimError, optimize  # noqa: E402
from .sim import load_dataset, make_protocol_dataset, write_dataset  # noqa: E402

_EXIT_OK = 0
_EXIT_CONFIG = 2
_EXIT_DATA = 3
_EXIT_NUMERIC = 4


def _write_json(path, payload: dict) -> None:
    with atomic_write(path) as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_config_dict(path) -> dict:
    return load_json_config(path) if path else {}


def _finish_manifest(mf: RunManifest, out_dir: Path, t0: float) -> None:
    """Hash every artifact under ``out_dir`` and write run_manifest.json."""
    for p in sorted(out_dir.rglob("*")):
        if p.is_file() and p.name != "run_manifest.json":
            mf.add_output(p, root=out_dir)
    mf.wall_time_s = time.perf_counter() - t0
    mf.write(out_dir / "run_manifest.json")


def cmd_simulate(args) -> int:
    t0 = time.perf_counter()
    raw = _load_config_dict(args.config)
    cfg = SimulateConfig.from_dict(raw)
    out_dir = Path(args.out)
    mf = RunManifest("simulate", _argv_snapshot(args), cfg.snapshot(),
                     {"seed": cfg.seed})
    if args.config:
        mf.add_input("config.json", args.config)
    bundle = make_protocol_dataset(
        cfg.scene_id, cfg.texture_variant, n_train=cfg.n_train,
        n_test=cfg.n_test, snr_db=cfg.snr_db, seed=cfg.seed, lidar=cfg.lidar,
        image_size=cfg.image_size, gt_rays=cfg.gt_rays, radius=cfg.radius,
        height=cfg.height, target=cfg.target,
        poisson_photons=cfg.poisson_photons)
    write_dataset(bundle, out_dir)
    _finish_manifest(mf, out_dir, t0)
    n_train = len(bundle.train_views())
    n_test = len(bundle.test_views())
    print(f"simulate: wrote {n_train} train + {n_test} test views to {out_dir}")
    return _EXIT_OK


def _mode_requirements(mode: str) -> tuple:
    """Measurement channels a mode consumes: subset of {rgb, transient, sparse}."""
    needs = {"rgb"}
    if mode in ("fusion", "diffuse-only", "fusion-no-adaptive"):
        needs.add("transient")
    if mode in ("fusion", "sparse-baseline", "sparse-only",
                "fusion-no-adaptive"):
        needs.add("sparse")
    if mode in ("diffuse-only", "sparse-only"):
        needs.discard("rgb")
    return tuple(sorted(needs))


def _check_channels(bundle, mode: str) -> None:
    for view in bundle.train_views():
        missing = []
        needs = _mode_requirements(mode)
        if "transient" in needs and float(np.sum(view.transient)) <= 0.0:
            missing.append("transient histograms")
        if "sparse" in needs and not any(r[4] > 0 for r in view.sparse):
            missing.append("sparse depth returns")
        if missing:
            raise DataError(
                f"mode '{mode}' needs {', '.join(missing)} but view "
                f"{view.index} has none")


def cmd_reconstruct(args) -> int:
    t0 = time.perf_counter()
    raw = _load_config_dict(args.config)
    cfg = reconstruct_config_from_dict(raw, mode=args.mode)
    if args.iterations is not None:
        if args.iterations < 1:
            raise ConfigError("config field 'iterations' must be >= 1")
        cfg = dataclasses.replace(cfg, iterations=args.iterations)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    out_dir = Path(args.out)
    bundle = load_dataset(args.dataset)
    _check_channels(bundle, cfg.mode)

    mf = RunManifest("reconstruct", _argv_snapshot(args),
                     optim_config_snapshot(cfg), {"seed": cfg.seed})
    mf.add_input("dataset", args.dataset)
    if args.config:
        mf.add_input("config.json", args.config)

    def progress(row):
        print(f"  iter {row['iteration']:>6d}  total {row['total']:.6f}  "
              f"surfels {row['n_surfels']}")

    result = optimize(bundle, cfg, progress=progress if args.verbose else None)

    save_scene_json(result.scene, out_dir / "final_scene.json")
    export_ply(result.scene, out_dir / "final_scene.ply")
    report.write_table_csv(out_dir / "trace.csv", result.trace,
                           report.TRACE_COLUMNS)
    for it, scene in result.checkpoints:
        save_scene_json(scene, out_dir / "checkpoints" / f"scene_{it:06d}.json")
        export_ply(scene, out_dir / "checkpoints" / f"scene_{it:06d}.ply")
    report.render_loss_curves(result.trace, out_dir / "loss_curves.png")

    train = bundle.train_views()
    if train:
        lidar = bundle.lidar
        pwm = build_patch_weights(train[0].rgb, lidar.nx, lidar.ny,
                                  a=cfg.patch_a, b=cfg.patch_b, k=cfg.patch_k)
        report.render_weight_map(effective_weights(pwm.weights, cfg.mode),
                                 out_dir / "weight_map.png")

    test = bundle.test_views()
    payload = {"mode": cfg.mode, "iterations_run": result.iterations_run,
               "aborted": result.aborted, "abort_reason": result.abort_reason,
               "final_loss": result.trace[-1]["total"] if result.trace else None}
    if test and not result.aborted:
        rep = metrics.evaluate_scene(result.scene, test,
                                     ssim_window=cfg.ssim_window)
        payload["metrics"] = rep.to_dict()
        rows = [v.to_dict() for v in rep.views]
        report.write_table_csv(out_dir / "report.csv", rows,
                               report.METRIC_COLUMNS)
        for view in test:
            pred = metrics.render_image(result.scene, view.rig.camera)
            report.render_view_comparison(
                pred, view, out_dir / "figures" / f"view_{view.index}.png")
    _write_json(out_dir / "report.json", payload)
    _finish_manifest(mf, out_dir, t0)

    if result.aborted:
        print(f"reconstruct: diverged ({result.abort_reason}); "
              f"last good scene written to {out_dir}", file=sys.stderr)
        return _EXIT_NUMERIC
    agg = payload.get("metrics", {}).get("aggregate", {})
    psnr = agg.get("psnr_db")
    extra = f"  test PSNR {psnr:.2f} dB" if psnr is not None else ""
    print(f"reconstruct[{cfg.mode}]: {result.iterations_run} iterations, "
          f"{result.scene.n_surfels} surfels{extra} -> {out_dir}")
    return _EXIT_OK


def _parse_view_counts(text: str) -> tuple:
    try:
        counts = tuple(int(x) for x in text.split(",") if x.strip() != "")
    except ValueError as e:
        raise ConfigError(f"--views must be comma-separated integers: {e}")
    if not counts:
        raise ConfigError("--views must name at least one view count")
    return counts


def cmd_analyze_rank(args) -> int:
    t0 = time.perf_counter()
    if args.grid < 1:
        raise ConfigError("--grid must be >= 1")
    if args.bins < 1:
        raise ConfigError("--bins must be >= 1")
    if args.pixels < 1:
        raise ConfigError("--pixels must be >= 1")
    if args.ifov_ratio < 1.0:
        raise ConfigError("--ifov-ratio must be >= 1")
    counts = _parse_view_counts(args.views)
    grid = analysis.VoxelGrid2D.square(extent=1.0, n=args.grid)
    rows = analysis.rank_sweep(grid=grid, view_counts=counts,
                               pixels_per_view=args.pixels, bins=args.bins,
                               sparse_ratio=args.ifov_ratio)
    out_dir = Path(args.out)
    mf = RunManifest("analyze-rank", _argv_snapshot(args),
                     {"grid": args.grid, "bins": args.bins,
                      "pixels": args.pixels, "ifov_ratio": args.ifov_ratio,
                      "views": list(counts)}, {})
    full_rank = grid.n_cells
    header = (f"full-rank target: {full_rank} cells "
              f"({args.grid} x {args.grid} grid)",
              f"pixels per view: {args.pixels}, bins: {args.bins}, "
              f"sparse wedge ratio: {args.ifov_ratio}")
    report.write_table_csv(out_dir / "rank_sweep.csv", rows,
                           report.RANK_COLUMNS, header_comments=header)
    report.render_rank_curves(rows, out_dir / "rank_curves.png", full_rank)
    _finish_manifest(mf, out_dir, t0)
    by_cfg = {name: max(r["rank"] for r in rows if r["config"] == name)
              for name in sorted({r["config"] for r in rows})}
    summary = ", ".join(f"{k} max rank {v}/{full_rank}"
                        for k, v in by_cfg.items())
    print(f"analyze-rank: {summary} -> {out_dir}")
    return _EXIT_OK


def cmd_eval(args) -> int:
    t0 = time.perf_counter()
    bundle = load_dataset(args.dataset)
    try:
        scene = load_scene_json(args.scene)
    except (OSError, json.JSONDecodeError, KeyError, ValueError) as e:
        raise DataError(f"cannot load scene {args.scene}: {e}") from e
    test = bundle.test_views()
    if not test:
        raise DataError("dataset has no test views to evaluate")
    out_dir = Path(args.out)
    mf = RunManifest("eval", _argv_snapshot(args), {}, {})
    mf.add_input("dataset", args.dataset)
    mf.add_input("scene", args.scene)
    rep = metrics.evaluate_scene(scene, test)
    _write_json(out_dir / "report.json", rep.to_dict())
    rows = [v.to_dict() for v in rep.views]
    report.write_table_csv(out_dir / "report.csv", rows, report.METRIC_COLUMNS)
    for view in test:
        pred = metrics.render_image(scene, view.rig.camera)
        report.render_view_comparison(
            pred, view, out_dir / "figures" / f"view_{view.index}.png")
    _finish_manifest(mf, out_dir, t0)
    agg = rep.aggregate
    print(f"eval: {agg['n_views']} views, PSNR {agg['psnr_db']:.2f} dB, "
          f"SSIM {agg['ssim']:.4f} -> {out_dir}")
    return _EXIT_OK


def cmd_export_ply(args) -> int:
    try:
        scene = load_scene_json(args.scene)
    except (OSError, json.JSONDecodeError, KeyError, ValueError) as e:
        raise DataError(f"cannot load scene {args.scene}: {e}") from e
    export_ply(scene, args.out)
    print(f"export-ply: {scene.n_surfels} surfels -> {args.out}")
    return _EXIT_OK


def _argv_snapshot(args) -> list:
    return [f"{k}={v}" for k, v in sorted(vars(args).items())
            if k != "func" and v is not None]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="diffsurf",
        description="Surface reconstruction from RGB images and diffuse "
                    "time-of-flight histograms via differentiable surfel "
                    "splatting.",
        epilog="Environment: DIFFSURF_THREADS pins the BLAS/OpenMP thread "
               "count. Note: a learned monocular-depth baseline is "
               "intentionally absent; all modes use only physics-based "
               "sensor models.")
    parser.add_argument("--version", action="version",
                        version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate",
                       help="render a synthetic train/test capture to disk")
    p.add_argument("--config", help="JSON config file (strict fields)")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("reconstruct",
                       help="optimize a surfel scene against a dataset")
    p.add_argument("--dataset", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="JSON config file (strict fields)")
    p.add_argument("--mode", choices=sorted(MODES),
                   help="loss mode (overrides the config file)")
    p.add_argument("--iterations", type=int, help="override iteration count")
    p.add_argument("--seed", type=int, help="override RNG seed")
    p.add_argument("--verbose", action="store_true",
                   help="print per-log-interval loss lines")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("analyze-rank",
                       help="rank of the transient measurement matrix vs view "
                            "count for wide and narrow pixel footprints")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--grid", type=int, default=analysis.DEFAULT_GRID_N,
                   help="voxel grid side length (full rank = grid^2)")
    p.add_argument("--bins", type=int, default=analysis.DEFAULT_BINS,
                   help="time-of-flight bins per pixel")
    p.add_argument("--pixels", type=int,
                   default=analysis.DEFAULT_PIXELS_PER_VIEW,
                   help="sensor pixels per view")
    p.add_argument("--ifov-ratio", type=float,
                   default=analysis.SPARSE_WEDGE_RATIO,
                   help="wedge-width ratio between diffuse and sparse pixels")
    p.add_argument("--views", default=",".join(str(v) for v in range(1, 21)),
                   help="comma-separated view counts (default 1..20)")
    p.set_defaults(func=cmd_analyze_rank)

    p = sub.add_parser("eval",
                       help="score a saved scene against a dataset's test "
                            "views")
    p.add_argument("--dataset", required=True, help="dataset directory")
    p.add_argument("--scene", required=True, help="scene JSON file")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-ply", help="convert a scene JSON to PLY")
    p.add_argument("--scene", required=True, help="scene JSON file")
    p.add_argument("--out", required=True, help="output PLY path")
    p.set_defaults(func=cmd_export_ply)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return _EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return _EXIT_DATA
    except OptimError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return _EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
