import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from d2t.geometry import (CameraIntrinsics, GeometryError, Pose, compose, invert, perturb, project,
                          rotation_angle, se3_exp, se3_log, umeyama, unproject, upsample_bilinear)

from conftest import random_pose


def test_principal_pixel_maps_to_axis():
    K = CameraIntrinsics(300.0, 64, 48)
    np.testing.assert_allclose(unproject((32, 24), 3.5, K), [0, 0, 3.5])


def test_one_focal_off_center():
    f = 123.0
    K = CameraIntrinsics(f, 64, 48)
    np.testing.assert_allclose(unproject((32 + f, 24), 1.0, K), [1, 0, 1])
    pr = project(np.array([1.0, 0, 1]), K)
    np.testing.assert_allclose(pr.pixel, [32 + f, 24])
    assert pr.depth == 1.0


def test_project_on_axis():
    K = CameraIntrinsics(50.0, 64, 48)
    pr = project(np.array([0.0, 0, 2]), K)
    np.testing.assert_allclose(pr.pixel, [32, 24])
    assert pr.depth == 2.0 and pr.in_front


def test_behind_camera_is_tagged_not_raised():
    pr = project(np.array([0.0, 0, -1]), CameraIntrinsics(50.0, 64, 48))
    assert not pr.in_front
    assert np.all(np.isnan(pr.pixel))


@pytest.mark.parametrize("depth", [0.0, -1.0])
def test_unproject_rejects_nonpositive_depth(depth):
    with pytest.raises(GeometryError):
        unproject((1, 1), depth, CameraIntrinsics(50.0, 64, 48))


def test_projection_round_trip_1000_draws(rng):
    for _ in range(1000):
        W, H = rng.integers(8, 640, 2)
        K = CameraIntrinsics(rng.uniform(20, 2000), int(W), int(H))
        pix = np.array([rng.integers(0, W), rng.integers(0, H)], dtype=float)
        d = rng.uniform(0.1, 100)
        pr = project(unproject(pix, d, K), K)
        assert np.abs(pr.pixel - pix).max() < 1e-9
        assert pr.depth == d


def test_pose_group_laws(rng):
    for _ in range(200):
        a, b, c = (random_pose(rng, trans=5) for _ in range(3))
        e = compose(a, invert(a))
        np.testing.assert_allclose(e.matrix(), np.eye(4), atol=1e-12)
        lhs = compose(compose(a, b), c).matrix()
        rhs = compose(a, compose(b, c)).matrix()
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)
        assert abs(np.linalg.det(compose(a, b).rotation) - 1) < 1e-12


def test_invert_identity():
    np.testing.assert_array_equal(invert(Pose.identity()).matrix(), np.eye(4))


def test_pose_reorthonormalizes():
    R = np.eye(3) + 1e-5 * np.arange(9).reshape(3, 3)
    p = Pose(R, np.zeros(3))
    assert np.abs(p.rotation @ p.rotation.T - np.eye(3)).max() < 1e-12
    assert abs(np.linalg.det(p.rotation) - 1) < 1e-12


def test_pose_is_immutable():
    p = Pose.identity()
    with pytest.raises(ValueError):
        p.rotation[0, 0] = 2.0


def test_zero_perturbation_is_bit_identical(rng):
    p = random_pose(rng)
    q = perturb(p, np.zeros(6))
    assert np.array_equal(q.rotation, p.rotation) and np.array_equal(q.translation, p.translation)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1.0, 1.0), min_size=6, max_size=6))
def test_se3_log_inverts_exp(xi):
    xi = np.array(xi)
    n = np.linalg.norm(xi[:3])
    if n > 3.0:  # keep the rotation angle below pi
        xi[:3] *= 3.0 / n
    np.testing.assert_allclose(se3_log(se3_exp(xi)), xi, atol=1e-9)


def test_look_at_faces_target():
    p = Pose.look_at([1.0, 0.2, -2.0], [0.0, 0.0, 1.0])
    cam = p.apply(np.array([0.0, 0.0, 1.0]))
    assert cam[2] > 0 and np.hypot(cam[0], cam[1]) < 1e-12
    np.testing.assert_allclose(p.center, [1.0, 0.2, -2.0])


def test_rotation_angle_small_angles():
    for a in (1e-8, 1e-4, 0.5, 3.0):
        R = Pose.from_rotvec([0, a, 0], np.zeros(3)).rotation
        assert abs(rotation_angle(R) - a) < 1e-12


def test_upsample_constant_and_bilinear(rng):
    c = np.full((5, 7), 2.5)
    np.testing.assert_array_equal(upsample_bilinear(c, 13, 19), np.full((13, 19), 2.5))
    # f(x, y) = a + b x + c y + d x y in source pixel coordinates
    a, b, cc, d = rng.standard_normal(4)
    y, x = np.mgrid[0:5, 0:7].astype(float)
    src = a + b * x + cc * y + d * x * y
    up = upsample_bilinear(src, 13, 19)
    Y, X = np.meshgrid(np.linspace(0, 4, 13), np.linspace(0, 6, 19), indexing="ij")
    np.testing.assert_allclose(up, a + b * X + cc * Y + d * X * Y, atol=1e-12)


def test_umeyama_recovers_similarity(rng):
    src = rng.standard_normal((20, 3))
    R = Pose.from_rotvec([0.1, -0.4, 0.3], np.zeros(3)).rotation
    dst = 1.7 * src @ R.T + np.array([0.3, -2.0, 1.0])
    s, R2, t = umeyama(src, dst)
    assert abs(s - 1.7) < 1e-12
    np.testing.assert_allclose(R2, R, atol=1e-12)


def test_umeyama_degenerate():
    pts = np.array([[0.0, 0, 0], [1, 1, 1], [2, 2, 2]])
    with pytest.raises(GeometryError):
        umeyama(pts, pts)
