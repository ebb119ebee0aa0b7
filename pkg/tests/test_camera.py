import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oponerf.camera import (
    Camera,
    RigSpec,
    apply_homography,
    arc_rig,
    homography,
    intrinsics,
    look_at,
    ray_for_pixel,
    rays_for_pixels,
    all_pixels,
    sample_depths,
    training_indices,
)


def axis_camera(fx=50.0, w=64, h=48, t=(0.0, 0.0, 0.0)):
    K = intrinsics(fx, fx, w / 2 - 0.5, h / 2 - 0.5)
    return Camera(K=K, R=np.eye(3), t=np.asarray(t), width=w, height=h)


def test_principal_pixel_looks_down_the_axis():
    ray = ray_for_pixel(axis_camera(), 31, 23)
    assert np.allclose(ray.direction, [0.0, 0.0, 1.0], atol=1e-15)


def test_identity_extrinsics_origin_at_zero():
    assert np.array_equal(ray_for_pixel(axis_camera(), 3, 4).origin, np.zeros(3))


def test_adjacent_pixels_differ_by_one_over_fx():
    cam = axis_camera(fx=500.0, w=640, h=480)
    a = ray_for_pixel(cam, 319, 239).direction
    b = ray_for_pixel(cam, 320, 239).direction
    angle = np.arccos(np.clip(a @ b, -1, 1))
    assert angle == pytest.approx(np.arctan(1 / 500.0), rel=1e-9)
    assert angle == pytest.approx(1 / 500.0, rel=1e-5)


@pytest.mark.parametrize("u, v", [(-1, 0), (0, -1), (64, 0), (0, 48)])
def test_pixel_out_of_range_rejected(u, v):
    with pytest.raises(ValueError):
        ray_for_pixel(axis_camera(), u, v)


def test_camera_rejects_bad_rotation_and_focal():
    K = intrinsics(10, 10, 5, 5)
    with pytest.raises(ValueError):
        Camera(K=K, R=np.diag([1.0, 1.0, 1.1]), t=np.zeros(3), width=10, height=10)
    with pytest.raises(ValueError):
        Camera(K=intrinsics(-1, 10, 5, 5), R=np.eye(3), t=np.zeros(3), width=10, height=10)


def test_all_rig_directions_face_forward_and_are_unit():
    for cam in arc_rig():
        o, d = rays_for_pixels(cam, *all_pixels(cam))
        assert np.all(d @ cam.axis > 0)
        assert np.max(np.abs(np.linalg.norm(d, axis=1) - 1)) < 1e-12
        assert np.max(np.abs(cam.R.T @ cam.R - np.eye(3))) < 1e-9


def test_pixel_ray_projects_back_to_pixel_center():
    cam = arc_rig()[3]
    us, vs = np.array([0, 10, 47]), np.array([5, 30, 47])
    o, d = rays_for_pixels(cam, us, vs)
    u, v, z = cam.project(o + 2.5 * d)
    assert np.allclose(u, us + 0.5, atol=1e-9)
    assert np.allclose(v, vs + 0.5, atol=1e-9)
    assert np.all(z > 0)


# -- depth sampling -----------------------------------------------------------


def test_midpoints():
    assert np.allclose(sample_depths(0, 1, 4, False), [0.125, 0.375, 0.625, 0.875], rtol=0, atol=1e-15)


def test_stratified_is_deterministic_under_seed():
    assert np.array_equal(sample_depths(1, 3, 8, True, seed=5), sample_depths(1, 3, 8, True, seed=5))


def test_stratified_bins_monte_carlo():
    near, far, n = 2.0, 6.0, 8
    draws = sample_depths(near, far, n, True, seed=0, n_rays=10_000)
    step = (far - near) / n
    lo = near + step * np.arange(n)
    assert np.all(draws >= lo) and np.all(draws <= lo + step)
    assert np.all(np.diff(draws, axis=1) > 0)
    centers = lo + step / 2
    assert np.all(np.abs(draws.mean(axis=0) - centers) <= 0.02 * centers)


def test_sample_depths_rejects_bad_args():
    with pytest.raises(ValueError):
        sample_depths(1.0, 1.0, 4)
    with pytest.raises(ValueError):
        sample_depths(0.0, 1.0, 1)


@given(st.floats(0.01, 5), st.floats(0.01, 5), st.integers(2, 64), st.integers(0, 1000))
def test_depths_strictly_increasing(near, span, n, seed):
    for strat in (False, True):
        t = sample_depths(near, near + span, n, strat, seed=seed)
        assert np.all(np.diff(t) > 0)


# -- homography ---------------------------------------------------------------


def test_self_homography_is_identity():
    cam = arc_rig()[4]
    H = homography(cam, cam, 3.0)
    assert np.allclose(H / H[2, 2], np.eye(3), atol=1e-12)


@settings(max_examples=30)
@given(st.floats(0, 47), st.floats(0, 47), st.floats(0.5, 20))
def test_self_homography_fixes_every_pixel(u, v, z):
    cam = arc_rig()[2]
    uu, vv = apply_homography(homography(cam, cam, z), np.array([u]), np.array([v]))
    assert abs(uu[0] - u) < 1e-9 and abs(vv[0] - v) < 1e-9


def test_baseline_gives_stereo_disparity():
    fx, b, z = 80.0, 0.3, 4.0
    ref = axis_camera(fx=fx)
    # support camera shifted by +b along x: x_k = x_ref - b
    other = axis_camera(fx=fx, t=(-b, 0.0, 0.0))
    u, v = np.array([10.0, 30.0]), np.array([7.0, 40.0])
    uu, vv = apply_homography(homography(other, ref, z), u, v)
    assert np.allclose(uu - u, -fx * b / z, atol=1e-12)
    assert np.allclose(vv, v, atol=1e-12)


def test_depth_axis_translation_scales_about_principal_point():
    # moving the support camera forward by dz magnifies around the principal point by z / (z - dz)
    fx, z, dz = 60.0, 5.0, 1.0
    ref = axis_camera(fx=fx)
    other = axis_camera(fx=fx, t=(0.0, 0.0, -dz))
    c = np.array([ref.K[0, 2], ref.K[1, 2]])
    u, v = np.array([c[0] + 10.0]), np.array([c[1] - 4.0])
    uu, vv = apply_homography(homography(other, ref, z), u, v)
    assert np.allclose(uu - c[0], 10.0 * z / (z - dz), atol=1e-12)
    assert np.allclose(vv - c[1], -4.0 * z / (z - dz), atol=1e-12)


def test_homography_matches_geometric_reprojection():
    cams = arc_rig()
    ref, k = cams[10], cams[15]
    z = 3.7
    us, vs = np.array([3.0, 20.5, 44.0]), np.array([8.0, 24.0, 40.0])
    # back-project on the reference fronto-parallel plane and project into k
    pix = np.stack([us, vs, np.ones(3)], axis=1)
    x_ref = z * (pix @ np.linalg.inv(ref.K).T)
    world = (x_ref - ref.t) @ ref.R
    pu, pv, _ = k.project(world)
    hu, hv = apply_homography(homography(k, ref, z), us, vs)
    assert np.allclose(hu, pu, atol=1e-9) and np.allclose(hv, pv, atol=1e-9)


def test_infinite_plane_is_rotation_only():
    cams = arc_rig()
    ref, k = cams[0], cams[6]
    R = k.R @ ref.R.T
    expected = k.K @ R @ np.linalg.inv(ref.K)
    assert np.allclose(homography(k, ref, np.inf), expected, atol=1e-12)
    assert np.allclose(homography(k, ref, 1e12), expected, atol=1e-9)


def test_homography_rejects_non_positive_depth_and_singular_k():
    cam = axis_camera()
    with pytest.raises(ValueError):
        homography(cam, cam, 0.0)
    bad = axis_camera()
    bad.K = np.diag([1.0, 1.0, 0.0])
    with pytest.raises(ValueError):
        homography(bad, cam, 1.0)


# -- rigs ---------------------------------------------------------------------


def test_arc_rig_and_training_indices():
    cams = arc_rig(RigSpec())
    assert len(cams) == 21
    assert training_indices() == [0, 5, 10, 15, 20]
    target_dirs = [-c.center / np.linalg.norm(c.center) for c in cams]
    for c, t in zip(cams, target_dirs):
        assert np.allclose(c.axis, t, atol=1e-12)


def test_look_at_center():
    cam = look_at((1.0, 2.0, -3.0), (0.0, 0.0, 0.0), (0, 1, 0), intrinsics(10, 10, 5, 5), 10, 10)
    assert np.allclose(cam.center, [1.0, 2.0, -3.0], atol=1e-12)
