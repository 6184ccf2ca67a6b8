"""Surfel optimization: Adam updates over the render+loss graph.

`loss_and_gradient` differentiates the full pipeline (image render, transient
render, adaptive loss) in one reverse pass; `step` applies per-group Adam with
parameter projections (unit quaternions, clamped opacities, floored scales);
`optimize` runs the round-robin training loop with periodic opacity pruning
and a deterministic, seed-keyed metrics trace.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .core import Scene, SensorRig, random_unit_quaternions
from .loss import (DEFAULT_A, DEFAULT_B, DEFAULT_K, DEFAULT_LAMBDA_REG,
                   DEFAULT_LAMBDA_SSIM, MODES, LossBreakdown, build_patch_weights,
                   depth_normal_reg, effective_weights, mode_terms, rgb_loss,
                   sparse_lidar_loss, total_loss, transient_loss)
from .params import SceneParams
from .raster import render_depth_at, render_tensors
from .transient import normalize_histogram, render_transient, rng_for

GROUPS = ("positions", "rotations", "scales", "opacities", "color_coeffs")


class OptimError(RuntimeError):
    """Optimization failure: bad configuration, non-finite values, empty scene."""


# -- flat parameter plumbing -----------------------------------------------------------


@dataclass
class ParamVector:
    """Flat float64 view of all surfel parameters with a recoverable layout."""

    data: np.ndarray
    layout: tuple  # ((name, offset, shape), ...)

    def group(self, name: str) -> np.ndarray:
        for nm, off, shape in self.layout:
            if nm == name:
                return self.data[off:off + int(np.prod(shape))].reshape(shape)
        raise KeyError(name)

    def copy(self) -> "ParamVector":
        return ParamVector(self.data.copy(), self.layout)

    def describe_index(self, flat_index: int) -> str:
        for nm, off, shape in self.layout:
            size = int(np.prod(shape))
            if off <= flat_index < off + size:
                local = np.unravel_index(flat_index - off, shape)
                return f"{nm}{tuple(int(i) for i in local)}"
        return f"index {flat_index}"


def scene_to_vector(scene: Scene) -> ParamVector:
    layout = []
    chunks = []
    offset = 0
    for name in GROUPS:
        arr = np.asarray(getattr(scene, name), dtype=np.float64)
        layout.append((name, offset, arr.shape))
        chunks.append(arr.ravel())
        offset += arr.size
    return ParamVector(np.concatenate(chunks), tuple(layout))


def vector_to_scene(vec: ParamVector) -> Scene:
    return Scene(**{name: vec.group(name).copy() for name in GROUPS})


# -- configuration ---------------------------------------------------------------------


@dataclass
class OptimConfig:
    """Training hyperparameters; all recorded in run manifests."""

    iterations: int = 7000
    mode: str = "fusion"
    lr_position: float = 2e-3      # multiplied by scene_extent
    lr_rotation: float = 1e-3
    lr_scale: float = 5e-3
    lr_opacity: float = 2.5e-2
    lr_color: float = 2.5e-3
    lr_decay: float = 1.0          # per-iteration exponential factor; 1 = constant
    scene_extent: float = 1.0
    n_init_surfels: int = 256
    prune_interval: int = 500
    prune_opacity: float = 0.02
    seed: int = 0
    rays_per_cone: int = 64
    transient_mode: str = "transmittance"
    lambda_ssim: float = DEFAULT_LAMBDA_SSIM
    lambda_reg: float = DEFAULT_LAMBDA_REG
    lambda_lidar: float = 1.0
    patch_a: float = DEFAULT_A
    patch_b: float = DEFAULT_B
    patch_k: float = DEFAULT_K
    ssim_window: int = 11
    log_every: int = 50
    checkpoint_every: int = 0      # 0: final checkpoint only
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    dtype: str = "float32"

    def validate(self) -> None:
        if self.iterations < 1:
            raise OptimError("iterations must be >= 1")
        for nm in ("lr_position", "lr_rotation", "lr_scale", "lr_opacity", "lr_color"):
            if getattr(self, nm) <= 0:
                raise OptimError(f"{nm} must be positive")
        if self.mode not in MODES:
            raise OptimError(f"unknown mode {self.mode!r}; choose from {MODES}")
        if not 0.0 <= self.prune_opacity < 1.0:
            raise OptimError("prune_opacity must be in [0, 1)")
        if not 0.0 < self.lr_decay <= 1.0:
            raise OptimError("lr_decay must be in (0, 1]")
        if self.rays_per_cone < 1:
            raise OptimError("rays_per_cone must be >= 1")
        if self.n_init_surfels < 1:
            raise OptimError("n_init_surfels must be >= 1")

    def group_lr(self, name: str) -> float:
        return {
            "positions": self.lr_position * self.scene_extent,
            "rotations": self.lr_rotation,
            "scales": self.lr_scale,
            "opacities": self.lr_opacity,
            "color_coeffs": self.lr_color,
        }[name]

    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32


# -- training views --------------------------------------------------------------------


@dataclass
class TrainView:
    """One view's measurements prepared for the loss: weights, normalized
    histograms (zones without signal zeroed), and sparse sample rays."""

    index: int
    rig: SensorRig
    rgb: np.ndarray          # (H, W, 3) observed (possibly noisy)
    weights: np.ndarray      # (ny, nx) effective per-patch RGB trust
    gt_rows: np.ndarray      # (Z, T) normalized histograms; all-zero = excluded
    sparse_uv: np.ndarray    # (Z, 2) zone-center pixel coordinates
    sparse_depth: np.ndarray  # (Z,) ground-truth z-depth, -1 = miss


def prepare_view(view, config: OptimConfig) -> TrainView:
    """Precompute per-view loss inputs from a dataset view record."""
    lidar = view.rig.lidar
    pwm = build_patch_weights(view.rgb, lidar.nx, lidar.ny, a=config.patch_a,
                              b=config.patch_b, k=config.patch_k)
    weights = effective_weights(pwm.weights, config.mode)

    hist = np.asarray(view.transient, dtype=np.float64)
    rows = hist.reshape(lidar.ny * lidar.nx, lidar.n_bins)
    gt_rows = np.zeros_like(rows)
    for z in range(rows.shape[0]):
        prob, empty = normalize_histogram(rows[z])
        if not empty:
            gt_rows[z] = prob

    sparse = sorted(view.sparse, key=lambda r: (r[1], r[0]))  # zone-major (iy, ix)
    sparse_uv = np.array([[r[2], r[3]] for r in sparse], dtype=np.float64)
    sparse_depth = np.array([r[4] for r in sparse], dtype=np.float64)
    return TrainView(view.index, view.rig, np.asarray(view.rgb, dtype=np.float64),
                     weights, gt_rows, sparse_uv, sparse_depth)


# -- loss + gradient -------------------------------------------------------------------


def view_loss(params: SceneParams, tview: TrainView, config: OptimConfig,
              iteration: int = 0) -> LossBreakdown:
    """Differentiable total loss of one view under the configured mode."""
    terms = mode_terms(config.mode)
    cam = tview.rig.camera
    lidar = tview.rig.lidar
    components = {}
    parts = {}

    if "rgb" in terms or "reg" in terms:
        out = render_tensors(params, cam)
        if "rgb" in terms:
            components["rgb"] = rgb_loss(out["color"], tview.rgb, tview.weights,
                                         config.lambda_ssim,
                                         ssim_window=config.ssim_window, parts=parts)
        if "reg" in terms:
            components["reg"] = depth_normal_reg(out["depth"], out["normal"],
                                                 out["coverage"], cam,
                                                 lambda_reg=config.lambda_reg,
                                                 parts=parts)

    if "transient" in terms:
        rows = []
        for z in range(lidar.ny * lidar.nx):
            if tview.gt_rows[z].sum() <= 0.0:
                rows.append(ad.constant(np.zeros(lidar.n_bins)))
                continue
            zone = (z % lidar.nx, z // lidar.nx)
            hist = render_transient(params, tview.rig, zone,
                                    (config.seed, tview.index, iteration, z),
                                    mode=config.transient_mode,
                                    n_rays=config.rays_per_cone)
            prob, empty = normalize_histogram(hist)
            rows.append(ad.constant(np.zeros(lidar.n_bins)) if empty else prob)
        stacked = ad.stack(rows, axis=0)
        components["transient"] = transient_loss(stacked, tview.gt_rows,
                                                 tview.weights.reshape(-1),
                                                 parts=parts)

    if "sparse" in terms:
        res = render_depth_at(params, cam, tview.sparse_uv)
        components["sparse"] = sparse_lidar_loss(res["depth"], tview.sparse_depth,
                                                 res["coverage"], parts=parts)

    return total_loss(components, config.mode, lambda_lidar=config.lambda_lidar,
                      parts=parts)


def loss_and_gradient(scene: Scene, batch, config: OptimConfig,
                      iteration: int = 0) -> tuple:
    """(LossBreakdown, ParamVector gradient) for a batch of prepared views.

    The gradient is the reverse-mode derivative of the summed view losses;
    non-finite entries raise OptimError naming the offending parameter.
    """
    if not batch:
        raise OptimError("batch must contain at least one view")
    params = SceneParams.from_scene(scene, requires_grad=True,
                                    dtype=config.np_dtype())
    breakdowns = [view_loss(params, tv, config, iteration) for tv in batch]
    total = breakdowns[0].total_tensor
    for bd in breakdowns[1:]:
        total = total + bd.total_tensor
    total.backward()

    template = scene_to_vector(scene)
    grad = np.zeros_like(template.data)
    leaves = params.leaves()
    for name, off, shape in template.layout:
        g = leaves[name].grad
        if g is not None:
            grad[off:off + int(np.prod(shape))] = g.astype(np.float64).ravel()
    gvec = ParamVector(grad, template.layout)

    if not np.all(np.isfinite(grad)):
        bad = int(np.nonzero(~np.isfinite(grad))[0][0])
        raise OptimError(f"non-finite gradient at {gvec.describe_index(bad)}")

    merged = LossBreakdown(
        total=float(sum(b.total for b in breakdowns)),
        rgb=float(sum(b.rgb for b in breakdowns)),
        transient=float(sum(b.transient for b in breakdowns)),
        reg=float(sum(b.reg for b in breakdowns)),
        sparse=float(sum(b.sparse for b in breakdowns)),
        mode=config.mode,
        rgb_l1=float(sum(b.rgb_l1 for b in breakdowns)),
        rgb_ssim=float(sum(b.rgb_ssim for b in breakdowns)),
        total_tensor=total,
    )
    return merged, gvec


# -- Adam with projections ---------------------------------------------------------------


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @staticmethod
    def for_scene(scene: Scene) -> "AdamState":
        zeros = {name: np.zeros_like(np.asarray(getattr(scene, name), dtype=np.float64))
                 for name in GROUPS}
        return AdamState({k: z.copy() for k, z in zeros.items()}, zeros)

    def keep(self, mask: np.ndarray) -> None:
        for d in (self.m, self.v):
            for k in GROUPS:
                d[k] = d[k][mask]


def step(scene: Scene, gradient: ParamVector, config: OptimConfig,
         iteration: int = 0, state: AdamState | None = None) -> Scene:
    """One Adam update with per-group learning rates, then legality projections."""
    if state is None:
        state = AdamState.for_scene(scene)
    state.t += 1
    b1, b2, eps = config.beta1, config.beta2, config.adam_eps
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    decay = config.lr_decay ** iteration

    new = {}
    for name in GROUPS:
        theta = np.asarray(getattr(scene, name), dtype=np.float64)
        g = gradient.group(name)
        m = state.m[name]
        v = state.v[name]
        m[...] = b1 * m + (1.0 - b1) * g
        v[...] = b2 * v + (1.0 - b2) * g * g
        update = (config.group_lr(name) * decay) * (m / c1) / (np.sqrt(v / c2) + eps)
        new[name] = theta - update

    # projections keep every parameter legal after the step
    norms = np.linalg.norm(new["rotations"], axis=1, keepdims=True)
    degenerate = norms[:, 0] < 1e-12
    new["rotations"] = np.where(degenerate[:, None], [1.0, 0.0, 0.0, 0.0],
                                new["rotations"] / np.maximum(norms, 1e-12))
    new["opacities"] = np.clip(new["opacities"], 0.0, 1.0)
    new["scales"] = np.maximum(new["scales"], 1e-6)
    out = Scene(**new)
    out.validate()
    return out


def prune(scene: Scene, opacity_threshold: float) -> tuple:
    """(scene', keep_mask): drop surfels with opacity below the threshold."""
    if not 0.0 <= opacity_threshold < 1.0:
        raise OptimError("opacity threshold must be in [0, 1)")
    keep = scene.opacities >= opacity_threshold
    if not keep.any():
        raise OptimError("pruning removed every surfel")
    if keep.all():
        return scene, keep
    return Scene(scene.positions[keep], scene.rotations[keep], scene.scales[keep],
                 scene.opacities[keep], scene.color_coeffs[keep]), keep


def init_scene(bounds, n_surfels: int, seed: int) -> Scene:
    """Uniform random surfels inside an axis-aligned box."""
    if n_surfels < 1:
        raise OptimError("n_surfels must be >= 1")
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
    if not (hi > lo).all():
        raise OptimError("bounds must have positive extent on every axis")
    rng = rng_for(seed, 301)
    positions = rng.uniform(lo, hi, size=(n_surfels, 3))
    rotations = random_unit_quaternions(n_surfels, rng)
    s = 0.5 * float(np.linalg.norm(hi - lo)) / n_surfels ** (1.0 / 3.0)
    scales = np.full((n_surfels, 2), s)
    # start translucent: surfels seeded off-surface must fade below the prune
    # threshold quickly, and heavy initial occlusion starves the gradient of
    # surfels behind them
    opacities = np.full(n_surfels, 0.1)
    color_coeffs = np.zeros((n_surfels, 1, 3))  # mid-gray under the SH DC term
    return Scene(positions, rotations, scales, opacities, color_coeffs)


def infer_bounds(views, margin: float = 0.2) -> tuple:
    """Bounding box of the valid sparse-LiDAR returns across views, inflated."""
    pts = []
    for tv in views:
        valid = tv.sparse_depth > 0
        if not valid.any():
            continue
        cam = tv.rig.camera
        uv = tv.sparse_uv[valid]
        d = tv.sparse_depth[valid]
        dirs = cam.pixel_dirs(uv[:, 0], uv[:, 1], normalized=False)
        pts.append(cam.center + cam.cam_to_world_dir(dirs) * d[:, None])
    if not pts:
        raise OptimError("cannot infer scene bounds: no valid sparse returns")
    pts = np.concatenate(pts)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    pad = np.maximum(margin * (hi - lo), 0.05)
    return lo - pad, hi + pad


# -- training loop -----------------------------------------------------------------------


@dataclass
class OptimizeResult:
    scene: Scene
    trace: list                    # dicts of per-cadence metrics (deterministic)
    checkpoints: list              # (iteration, Scene)
    aborted: bool = False
    abort_reason: str | None = None
    iterations_run: int = 0
    wall_time_s: float = 0.0
    bounds: tuple | None = None
    config: OptimConfig | None = None


def optimize(dataset_or_views, config: OptimConfig, *, initial_scene: Scene | None = None,
             eval_fn=None, progress=None) -> OptimizeResult:
    """Round-robin training over the prepared views.

    `dataset_or_views` is a dataset bundle (train split used) or a list of
    already-prepared TrainViews. `eval_fn(scene) -> dict`, if given, is merged
    into each logged trace row. Divergence (non-finite loss/gradient) aborts
    with the last finite scene.
    """
    config.validate()
    if hasattr(dataset_or_views, "train_views"):
        views = [prepare_view(v, config) for v in dataset_or_views.train_views()]
    else:
        views = [v if isinstance(v, TrainView) else prepare_view(v, config)
                 for v in dataset_or_views]
    if not views:
        raise OptimError("no training views")

    t0 = time.perf_counter()
    bounds = infer_bounds(views)
    extent = float(np.linalg.norm(bounds[1] - bounds[0]))
    config = replace(config, scene_extent=extent)
    scene = initial_scene.copy() if initial_scene is not None \
        else init_scene(bounds, config.n_init_surfels, config.seed)
    state = AdamState.for_scene(scene)

    trace = []
    checkpoints = []
    aborted = False
    reason = None
    it = 0

    def log_row(it, bd: LossBreakdown):
        row = {"iteration": it, "total": bd.total, "rgb": bd.rgb,
               "transient": bd.transient, "reg": bd.reg, "sparse": bd.sparse,
               "n_surfels": scene.n_surfels}
        if eval_fn is not None:
            row.update(eval_fn(scene))
        trace.append(row)
        if progress is not None:
            progress(row)

    for it in range(config.iterations):
        tv = views[it % len(views)]
        try:
            bd, gvec = loss_and_gradient(scene, [tv], config, iteration=it)
        except OptimError as exc:
            aborted, reason = True, str(exc)
            break
        if not bd.finite():
            aborted, reason = True, f"non-finite loss at iteration {it}"
            break
        scene = step(scene, gvec, config, it, state)
        if config.prune_interval and (it + 1) % config.prune_interval == 0:
            scene, keep = prune(scene, config.prune_opacity)
            if not keep.all():
                state.keep(keep)
        if config.log_every and (it % config.log_every == 0
                                 or it == config.iterations - 1):
            log_row(it, bd)
        if config.checkpoint_every and (it + 1) % config.checkpoint_every == 0:
            checkpoints.append((it + 1, scene.copy()))

    done = it if aborted else it + 1
    if not checkpoints or checkpoints[-1][0] != done:
        checkpoints.append((done, scene.copy()))
    return OptimizeResult(scene=scene, trace=trace, checkpoints=checkpoints,
                          aborted=aborted, abort_reason=reason,
                          iterations_run=done,
                          wall_time_s=time.perf_counter() - t0,
                          bounds=bounds, config=config)
