"""Image/depth/normal metrics: hand-computed values, masks, report round-trips."""
import json
import math

import numpy as np
import pytest

from diffsurf import metrics
from diffsurf.raster import RenderBuffers
from diffsurf.transient import rng_for


def _rng(*key):
    return rng_for(*key)


# ---------------------------------------------------------------- PSNR


def test_psnr_identical_images_hits_cap():
    img = _rng(1).uniform(0.0, 1.0, size=(9, 9, 3))
    assert metrics.psnr_db(img, img.copy()) == pytest.approx(99.0)


def test_psnr_known_uniform_error():
    # constant offset 0.1 -> MSE = 0.01 -> PSNR = 10 log10(1/0.01) = 20 dB
    ref = np.full((8, 8, 3), 0.4)
    pred = ref + 0.1
    assert metrics.psnr_db(pred, ref) == pytest.approx(20.0, abs=1e-9)


def test_psnr_oracle_against_direct_formula():
    ref = _rng(2).uniform(0.0, 1.0, size=(7, 5, 3))
    pred = np.clip(ref + _rng(3).normal(0.0, 0.05, size=ref.shape), 0.0, 1.0)
    expect = 10.0 * math.log10(1.0 / np.mean((pred - ref) ** 2))
    assert metrics.psnr_db(pred, ref) == pytest.approx(expect, rel=1e-12)


def test_psnr_shape_mismatch_rejected():
    with pytest.raises(ValueError, match="shape"):
        metrics.psnr_db(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


def test_ssim_identical_images_is_one():
    img = _rng(4).uniform(0.0, 1.0, size=(16, 16, 3))
    assert metrics.ssim_value(img, img.copy()) == pytest.approx(1.0, abs=1e-12)


def test_ssim_degrades_with_noise():
    ref = _rng(5).uniform(0.2, 0.8, size=(24, 24, 3))
    noisy = np.clip(ref + _rng(6).normal(0.0, 0.2, size=ref.shape), 0.0, 1.0)
    assert metrics.ssim_value(noisy, ref) < 0.9


# ------------------------------------------------------- depth / normal MAE


def test_depth_mae_constant_offset():
    ref = _rng(7).uniform(0.5, 2.0, size=(10, 10))
    pred = ref + 0.05
    mask = np.ones_like(ref, dtype=bool)
    assert metrics.depth_mae_m(pred, ref, mask) == pytest.approx(0.05, rel=1e-12)


def test_depth_mae_respects_mask():
    ref = np.zeros((4, 4))
    pred = ref.copy()
    pred[0, 0] = 123.0           # excluded by the mask
    mask = np.ones_like(ref, dtype=bool)
    mask[0, 0] = False
    assert metrics.depth_mae_m(pred, ref, mask) == pytest.approx(0.0)


def test_depth_mae_empty_mask_is_absent():
    assert metrics.depth_mae_m(np.ones((3, 3)), np.ones((3, 3)),
                               np.zeros((3, 3), dtype=bool)) is None


def test_normal_mae_uniform_rotation_recovered():
    # normals in the y-z plane rotated 10 degrees about x move by exactly 10
    theta = math.radians(10.0)
    rot = np.array([[1.0, 0.0, 0.0],
                    [0.0, math.cos(theta), -math.sin(theta)],
                    [0.0, math.sin(theta), math.cos(theta)]])
    phi = _rng(8).uniform(0.0, 2.0 * math.pi, size=(12, 12))
    ref = np.stack([np.zeros_like(phi), np.cos(phi), np.sin(phi)], axis=-1)
    pred = ref @ rot.T
    mask = np.ones((12, 12), dtype=bool)
    assert metrics.normal_mae_deg(pred, ref, mask) == pytest.approx(10.0,
                                                                    abs=1e-9)


def test_normal_mae_unnormalized_inputs_ok():
    ref = np.zeros((2, 2, 3))
    ref[..., 2] = 1.0
    pred = ref * 7.5             # same direction, different length
    mask = np.ones((2, 2), dtype=bool)
    assert metrics.normal_mae_deg(pred, ref, mask) == pytest.approx(0.0,
                                                                    abs=1e-9)


def test_normal_mae_drops_zero_normals():
    ref = np.zeros((2, 2, 3))
    ref[0, 0] = [0.0, 0.0, 1.0]
    pred = np.zeros((2, 2, 3))
    pred[0, 0] = [0.0, 1.0, 0.0]  # 90 degrees off
    mask = np.ones((2, 2), dtype=bool)
    # only (0,0) has nonzero normals on both sides
    assert metrics.normal_mae_deg(pred, ref, mask) == pytest.approx(90.0)


def test_normal_mae_empty_mask_is_absent():
    z = np.zeros((3, 3, 3))
    assert metrics.normal_mae_deg(z, z, np.ones((3, 3), dtype=bool)) is None


# ------------------------------------------------------------ aggregation


def _vm(idx, psnr=30.0, ssim=0.9, depth=0.01, normal=5.0):
    return metrics.ViewMetrics(view_index=idx, psnr_db=psnr, ssim=ssim,
                               depth_mae_m=depth, normal_mae_deg=normal,
                               depth_pixels=10, normal_pixels=10)


def test_aggregate_means_over_views():
    views = [_vm(0, psnr=20.0, depth=0.02), _vm(1, psnr=40.0, depth=0.04)]
    agg = metrics.aggregate_metrics(views)
    assert agg["n_views"] == 2
    assert agg["psnr_db"] == pytest.approx(30.0)
    assert agg["depth_mae_m"] == pytest.approx(0.03)


def test_aggregate_skips_absent_metrics():
    views = [_vm(0, depth=0.02), _vm(1, depth=None)]
    agg = metrics.aggregate_metrics(views)
    assert agg["depth_mae_m"] == pytest.approx(0.02)   # only view 0 counted
    agg_none = metrics.aggregate_metrics([_vm(0, depth=None, normal=None)])
    assert agg_none["depth_mae_m"] is None
    assert agg_none["normal_mae_deg"] is None


def test_report_json_round_trip_identity():
    views = [_vm(0), _vm(3, depth=None)]
    rep = metrics.MetricsReport(views=views,
                                aggregate=metrics.aggregate_metrics(views))
    blob = json.dumps(rep.to_dict(), sort_keys=True)
    back = metrics.MetricsReport.from_dict(json.loads(blob))
    assert json.dumps(back.to_dict(), sort_keys=True) == blob


# ------------------------------------------------- view-level computation


class _FakeView:
    def __init__(self, index, rgb, gt_depth, gt_normal):
        self.index = index
        self.rgb = rgb
        self.gt_depth = gt_depth
        self.gt_normal = gt_normal


def _buffers(color, depth, normal, coverage):
    acc = coverage.astype(float)
    return RenderBuffers(color=color, depth=depth, normal=normal,
                         alpha_acc=acc, coverage=coverage)


def test_compute_view_metrics_joint_masking():
    h = w = 6
    rgb = np.full((h, w, 3), 0.5)
    gt_depth = np.zeros((h, w))
    gt_depth[:, :3] = 1.0                 # reference covers the left half
    gt_normal = np.zeros((h, w, 3))
    gt_normal[:, :3, 2] = 1.0
    coverage = np.zeros((h, w), dtype=bool)
    coverage[:3, :] = True                # render covers the top half
    depth = np.where(coverage, 1.1, 0.0)  # constant 0.1 m error where covered
    normal = np.zeros((h, w, 3))
    normal[coverage] = [0.0, 0.0, 1.0]
    vm = metrics.compute_view_metrics(
        _buffers(rgb.copy(), depth, normal, coverage),
        _FakeView(7, rgb, gt_depth, gt_normal), ssim_window=3)
    assert vm.view_index == 7
    assert vm.psnr_db == pytest.approx(99.0)       # identical RGB
    assert vm.depth_pixels == 9                    # 3x3 overlap quadrant
    assert vm.depth_mae_m == pytest.approx(0.1, rel=1e-12)
    assert vm.normal_pixels == 9
    assert vm.normal_mae_deg == pytest.approx(0.0, abs=1e-9)


def test_compute_view_metrics_absent_when_disjoint():
    h = w = 4
    rgb = np.zeros((h, w, 3))
    gt_depth = np.zeros((h, w))
    gt_depth[:, :2] = 1.0
    coverage = np.zeros((h, w), dtype=bool)
    coverage[:, 2:] = True                # no overlap with the reference
    vm = metrics.compute_view_metrics(
        _buffers(rgb, np.ones((h, w)), np.zeros((h, w, 3)), coverage),
        _FakeView(0, rgb, gt_depth, np.zeros((h, w, 3))), ssim_window=3)
    assert vm.depth_mae_m is None and vm.depth_pixels == 0
    assert vm.normal_mae_deg is None and vm.normal_pixels == 0


def test_evaluate_scene_on_matching_geometry():
    # a surfel disk rendered, then scored against its own render = perfect view
    from diffsurf.core import Scene, SensorRig, LidarConfig
    from diffsurf.raster import render_image
    lidar = LidarConfig(nx=2, ny=2, ifov_deg=19.6, n_bins=64,
                        bin_width_s=160e-12, max_range_m=1.5, rays_per_cone=8)
    rig = SensorRig.build(lidar, 16, np.eye(3), np.zeros(3))
    scene = Scene(positions=np.array([[0.0, 0.0, 0.8]]),
                  rotations=np.array([[1.0, 0.0, 0.0, 0.0]]),
                  scales=np.array([[0.4, 0.4]]),
                  opacities=np.array([0.95]),
                  color_coeffs=np.full((1, 1, 3), 0.7))
    pred = render_image(scene, rig.camera)
    view = _FakeView(0, pred.color.copy(), pred.depth.copy(),
                     pred.normal.copy())
    view.rig = rig
    rep = metrics.evaluate_scene(scene, [view])
    agg = rep.aggregate
    assert agg["psnr_db"] == pytest.approx(99.0)
    assert agg["ssim"] == pytest.approx(1.0, abs=1e-12)
    assert agg["depth_mae_m"] == pytest.approx(0.0, abs=1e-12)
    assert agg["normal_mae_deg"] == pytest.approx(0.0, abs=1e-7)
    assert rep.views[0].depth_pixels > 0
