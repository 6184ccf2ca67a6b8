"""Analytic simulator tests: tracing, shading, noise, dataset protocol."""

import hashlib
import math

import numpy as np
import pytest

from diffsurf.core import LidarConfig, SensorRig, quat_to_rotmat
from diffsurf.fileio import DataError
from diffsurf.sim import (
    AnalyticScene,
    Checker,
    Constant,
    Plane,
    Sphere,
    add_gaussian_noise,
    camera_ring,
    load_dataset,
    make_protocol_dataset,
    make_scene,
    render_gt_transient,
    render_rgb_view,
    render_sparse_depths,
    surface_surfels,
    trace_ray,
    trace_rays,
)

RNG = np.random.default_rng(3)


def small_lidar(**kw):
    defaults = dict(nx=4, ny=4, ifov_deg=9.8, bin_width_s=40e-12, n_bins=256,
                    max_range_m=1.5, rays_per_cone=16)
    defaults.update(kw)
    return LidarConfig(**defaults)


# -- primitives ----------------------------------------------------------------


def test_trace_axis_ray_unit_sphere():
    scene = AnalyticScene((Sphere(np.array([0.0, 0.0, 2.0]), 1.0, Constant((1, 1, 1))),),
                          "t")
    hit = trace_ray(scene, [0, 0, 0], [0, 0, 1])
    assert hit.depth == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(hit.normal, [0, 0, -1], atol=1e-12)


def test_trace_ray_parallel_to_plane_misses():
    scene = AnalyticScene((Plane(np.zeros(3), np.array([0.0, 0.0, 1.0]), np.inf,
                                 Constant((1, 1, 1))),), "t")
    assert trace_ray(scene, [0, 0, 1.0], [1, 0, 0]) is None


def test_trace_tangent_ray_single_root():
    # origin (1,0,1), dir +z, sphere center (0,0,2) r=1: disc == 0 exactly
    scene = AnalyticScene((Sphere(np.array([0.0, 0.0, 2.0]), 1.0, Constant((1, 1, 1))),),
                          "t")
    hit = trace_ray(scene, [1.0, 0.0, 1.0], [0.0, 0.0, 1.0])
    d = math.sqrt(2.0)  # origin-to-center distance
    assert hit.depth == pytest.approx(math.sqrt(d * d - 1.0), abs=1e-12)


def test_trace_nearest_of_two():
    scene = AnalyticScene(
        (Plane(np.array([0.0, 0.0, 2.0]), np.array([0.0, 0.0, 1.0]), np.inf,
               Constant((0, 0, 0))),
         Sphere(np.array([0.0, 0.0, 1.0]), 0.25, Constant((1, 1, 1)))), "t")
    hit = trace_ray(scene, [0, 0, 0], [0, 0, 1])
    assert hit.primitive == 1 and hit.depth == pytest.approx(0.75)
    side = trace_ray(scene, [0.5, 0, 0], [0, 0, 1])
    assert side.primitive == 0 and side.depth == pytest.approx(2.0)


def test_checker_period():
    tex = Checker((1.0, 1.0, 1.0), (0.0, 0.0, 0.0), 0.1)
    p = np.array([[0.02, 0.02, 0.0]])
    np.testing.assert_array_equal(tex.albedo(p), tex.albedo(p + [0.2, 0.0, 0.0]))
    assert not np.array_equal(tex.albedo(p), tex.albedo(p + [0.1, 0.0, 0.0]))


def test_box_intersection_and_normals():
    from diffsurf.sim import Box

    scene = AnalyticScene((Box(np.array([-1.0, -1.0, 1.0]), np.array([1.0, 1.0, 2.0]),
                               Constant((1, 1, 1))),), "t")
    hit = trace_ray(scene, [0, 0, 0], [0, 0, 1])
    assert hit.depth == pytest.approx(1.0)
    np.testing.assert_allclose(hit.normal, [0, 0, -1], atol=1e-12)
    assert trace_ray(scene, [2.0, 0, 0], [0, 0, 1]) is None


# -- view rendering -----------------------------------------------------------------


def top_down_rig(height=0.7, lidar=None, size=32):
    lidar = lidar or small_lidar()
    # camera at +z looking straight down
    r = np.array([[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]])
    t = -r @ np.array([0.0, 0.0, height])
    return SensorRig.build(lidar, size, r, t)


def test_render_plane_view_depth_and_normals():
    scene = AnalyticScene((Plane(np.zeros(3), np.array([0.0, 0.0, 1.0]), np.inf,
                                 Constant((0.5, 0.5, 0.5))),), "t")
    rig = top_down_rig(height=1.0)
    rgb, depth, normal, hit = render_rgb_view(scene, rig.camera)
    assert hit.all()
    np.testing.assert_allclose(depth, 1.0, atol=1e-12)  # z-depth, not euclidean
    norms = np.linalg.norm(normal, axis=-1)
    np.testing.assert_allclose(norms, 1.0, atol=1e-12)
    assert np.all(normal[..., 2] < 0)  # toward the camera
    assert rgb.max() <= 0.5 and rgb.min() >= 0.05  # shaded constant albedo


def test_plane_zone_histograms_are_narrow_pulses():
    scene = AnalyticScene((Plane(np.zeros(3), np.array([0.0, 0.0, 1.0]), np.inf,
                                 Constant((0.5, 0.5, 0.5))),), "t")
    rig = top_down_rig(height=0.7)
    hist = render_gt_transient(scene, rig, seed=0, view_index=0, n_rays=256)
    for iy in range(4):
        for ix in range(4):
            h = hist[iy, ix]
            assert h.sum() == pytest.approx(1.0, abs=1e-9)
            nz = np.nonzero(h > 1e-9)[0]
            # one contiguous pulse, a few bins wide (corner zones spread most)
            assert np.all(np.diff(nz) == 1)
            assert nz.max() - nz.min() <= 16


def test_sphere_occluding_plane_bimodal_zone():
    scene = make_scene("sphere_plane", "none")
    rig = top_down_rig(height=0.6, size=32)
    hist = render_gt_transient(scene, rig, seed=0, view_index=0, n_rays=512)
    found = False
    for iy in range(4):
        for ix in range(4):
            h = hist[iy, ix]
            nz = np.nonzero(h > 1e-6)[0]
            if len(nz) < 2:
                continue
            gaps = np.diff(nz)
            if gaps.max() >= 3:  # two separated lobes
                cut = nz[np.argmax(gaps)] + 1
                if h[:cut].sum() > 0.05 and h[cut:].sum() > 0.05:
                    found = True
    assert found


def test_energy_constant_per_zone_across_views():
    # fully in-range scene: every cone ray lands on the plane within max range
    scene = AnalyticScene((Plane(np.zeros(3), np.array([0.0, 0.0, 1.0]), np.inf,
                                 Constant((0.5, 0.5, 0.5))),), "t")
    lidar = small_lidar()
    rigs = camera_ring(3, 0.4, 0.5, lidar, 32, phase=0.3, target=(0, 0, 0.05))
    for view, rig in enumerate(rigs):
        hist = render_gt_transient(scene, rig, seed=1, view_index=view, n_rays=64)
        np.testing.assert_allclose(hist.sum(axis=2), 1.0, atol=1e-9)


def test_sparse_depths_match_retrace():
    scene = make_scene("sphere_plane", "full")
    rig = top_down_rig(height=0.7)
    rows = render_sparse_depths(scene, rig)
    assert len(rows) == 16
    for ix, iy, u, v, d in rows:
        d_cam = rig.camera.pixel_dirs(np.array([u]), np.array([v]))
        res = trace_rays(scene, rig.camera.center,
                         rig.camera.cam_to_world_dir(d_cam))
        assert d == pytest.approx(float(res["depth"][0] * d_cam[0, 2]), abs=1e-12)


# -- noise ------------------------------------------------------------------------


def test_noise_infinite_snr_identity():
    img = RNG.uniform(0, 1, size=(32, 32, 3))
    out = add_gaussian_noise(img, math.inf, seed=0)
    np.testing.assert_array_equal(out, img)


def test_noise_sigma_parameterization():
    img = np.full((256, 256, 3), 0.5)
    out = add_gaussian_noise(img, 20.0, seed=1)  # sigma = rms/10 = 0.05
    emp = np.std(out - img)
    assert emp == pytest.approx(0.05, rel=0.05)


def test_noise_zero_db_order_of_magnitude():
    img = np.full((256, 256, 3), 0.5)
    out = add_gaussian_noise(img, 0.0, seed=2)  # sigma = 0.5, heavily clipped
    assert 0.25 < np.std(out - img) < 0.55


def test_noise_negative_infinity_decorrelates():
    scene = make_scene("sphere_plane", "full")
    rig = top_down_rig(height=0.7, size=256 // 8 * 8)
    rig = SensorRig.build(small_lidar(), 256, rig.camera.rotation,
                          rig.camera.translation)
    rgb, *_ = render_rgb_view(scene, rig.camera)
    out = add_gaussian_noise(rgb, -math.inf, seed=3)
    rho = np.corrcoef(rgb.ravel(), out.ravel())[0, 1]
    assert abs(rho) < 0.05
    assert out.min() >= 0 and out.max() <= 1


def test_noise_deterministic_per_seed():
    img = RNG.uniform(0, 1, size=(16, 16, 3))
    a = add_gaussian_noise(img, 10.0, seed=(7, 1))
    b = add_gaussian_noise(img, 10.0, seed=(7, 1))
    c = add_gaussian_noise(img, 10.0, seed=(7, 2))
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


# -- protocol datasets ----------------------------------------------------------------


def tiny_bundle(tmp_path=None, variant="full", **kw):
    args = dict(n_train=2, n_test=2, seed=5, lidar=small_lidar(), image_size=32,
                gt_rays=64, out_dir=tmp_path)
    args.update(kw)
    return make_protocol_dataset("sphere_plane", variant, **args)


def test_dataset_layout_and_hashes(tmp_path):
    bundle = tiny_bundle(tmp_path / "d")
    root = bundle.root
    assert (root / "manifest.json").is_file()
    for k in range(4):
        for name in ("rgb.png", "transient.bin", "sparse_depth.csv",
                     "gt_depth.pfm", "gt_normal.pfm", "pose.json"):
            assert (root / "views" / str(k) / name).is_file()
    for rel, digest in bundle.manifest["files"].items():
        assert hashlib.sha256((root / rel).read_bytes()).hexdigest() == digest


def test_dataset_regeneration_identical(tmp_path):
    a = tiny_bundle(tmp_path / "a")
    b = tiny_bundle(tmp_path / "b")
    assert a.manifest["files"] == b.manifest["files"]


def test_dataset_roundtrip(tmp_path):
    bundle = tiny_bundle(tmp_path / "d")
    back = load_dataset(bundle.root)
    assert len(back.views) == 4
    assert [v.split for v in back.views] == ["train", "train", "test", "test"]
    for orig, rt in zip(bundle.views, back.views):
        assert rt.index == orig.index
        np.testing.assert_allclose(rt.rgb, orig.rgb, atol=1.0 / 255.0 + 1e-9)
        np.testing.assert_allclose(rt.transient, orig.transient, rtol=1e-6, atol=1e-9)
        assert rt.sparse == orig.sparse
        np.testing.assert_allclose(rt.gt_depth, orig.gt_depth, atol=1e-6)
        np.testing.assert_array_equal(rt.rig.camera.rotation, orig.rig.camera.rotation)


def test_train_test_poses_disjoint():
    bundle = tiny_bundle()
    train_eyes = [v.rig.camera.center for v in bundle.train_views()]
    test_eyes = [v.rig.camera.center for v in bundle.test_views()]
    dmin = min(np.linalg.norm(a - b) for a in train_eyes for b in test_eyes)
    assert dmin > 0.05


def patch_variances(rgb, patches=4):
    h = rgb.shape[0] // patches
    lum = rgb.mean(axis=2)
    return [lum[i * h:(i + 1) * h, j * h:(j + 1) * h].var()
            for i in range(patches) for j in range(patches)]


def test_texture_variant_none_is_flat():
    # constant albedo leaves only shading variance (large just at silhouettes)
    flat = tiny_bundle(variant="none")
    full = tiny_bundle(variant="full")
    v_flat = np.array(patch_variances(flat.train_views()[0].rgb))
    v_full = np.array(patch_variances(full.train_views()[0].rgb))
    assert np.median(v_flat) < 0.003
    assert np.median(v_full) > 5 * np.median(v_flat)
    assert np.sort(v_flat)[len(v_flat) // 4] < 5e-4  # plane-only patches are flat


def test_unknown_variant_and_scene_rejected():
    with pytest.raises(DataError):
        make_scene("sphere_plane", "bogus")
    with pytest.raises(DataError):
        make_scene("teapot", "full")


# -- surface surfels -----------------------------------------------------------------


def test_surface_surfels_lie_on_surfaces():
    scene = make_scene("sphere_plane", "full")
    surf = surface_surfels(scene, spacing=0.04, region_radius=0.3)
    assert surf.n_surfels > 50
    center, radius = np.array([0.0, 0.0, 0.12]), 0.12
    on_sphere = np.abs(np.linalg.norm(surf.positions - center, axis=1) - radius) < 1e-9
    on_plane = np.abs(surf.positions[:, 2]) < 1e-9
    assert np.all(on_sphere | on_plane)
    normals = surf.normals()
    for i in range(0, surf.n_surfels, 17):
        np.testing.assert_allclose(
            quat_to_rotmat(surf.rotations[i])[:, 2], normals[i], atol=1e-12)
        if on_sphere[i]:
            expected = (surf.positions[i] - center) / radius
            np.testing.assert_allclose(normals[i], expected, atol=1e-9)
        else:
            np.testing.assert_allclose(normals[i], [0, 0, 1], atol=1e-12)
