"""Rigid transforms, Euler rotations, and pinhole projection."""

import numpy as np
import pytest

from ssvo.diffcore.tensor import Tensor
from ssvo.geometry import (
    CameraIntrinsics,
    SE3Transform,
    batch_project,
    euler_to_rotation,
    pixel_grid,
    pose_vec_to_rt,
    pose_vec_to_transform,
    project,
    transform_compose,
    transform_invert,
)

K = CameraIntrinsics(fx=93.6, fy=93.6, cx=51.5, cy=15.5)


def random_transform(seed, scale=0.5):
    rng = np.random.default_rng(seed)
    return SE3Transform(euler_to_rotation(*(rng.uniform(-scale, scale, 3))),
                        rng.uniform(-scale, scale, 3))


# -- SE(3) algebra --------------------------------------------------------------


def test_identity_is_neutral():
    t = random_transform(0)
    for composed in (transform_compose(t, SE3Transform.identity()),
                     transform_compose(SE3Transform.identity(), t)):
        np.testing.assert_array_equal(composed.R, t.R)
        np.testing.assert_array_equal(composed.t, t.t)


def test_invert_round_trip():
    t = random_transform(1)
    eye = transform_compose(t, transform_invert(t))
    np.testing.assert_allclose(eye.R, np.eye(3), atol=1e-15)
    np.testing.assert_allclose(eye.t, 0.0, atol=1e-15)


def test_compose_matches_matrix_product():
    a, b = random_transform(2), random_transform(3)
    np.testing.assert_allclose(transform_compose(a, b).matrix,
                               a.matrix @ b.matrix, rtol=1e-15, atol=1e-15)


def test_compose_is_associative():
    a, b, c = (random_transform(s) for s in (4, 5, 6))
    left = transform_compose(transform_compose(a, b), c)
    right = transform_compose(a, transform_compose(b, c))
    np.testing.assert_allclose(left.matrix, right.matrix, atol=1e-14)


def test_apply_matches_homogeneous_product():
    t = random_transform(7)
    pts = np.random.default_rng(8).standard_normal((3, 10))  # column points
    want = (t.matrix @ np.r_[pts, np.ones((1, 10))])[:3]
    np.testing.assert_allclose(t.apply(pts), want, rtol=1e-14)
    np.testing.assert_allclose(t.apply(pts[:, 0]), want[:, 0], rtol=1e-14)


def test_non_orthonormal_rotation_rejected():
    with pytest.raises(ValueError):
        SE3Transform(np.eye(3) * 2.0, np.zeros(3))


# -- Euler rotations ------------------------------------------------------------


def test_euler_single_axis_hand_values():
    a = 0.3
    c, s = np.cos(a), np.sin(a)
    np.testing.assert_allclose(
        euler_to_rotation(a, 0.0, 0.0),
        [[1, 0, 0], [0, c, -s], [0, s, c]], atol=1e-15)
    np.testing.assert_allclose(
        euler_to_rotation(0.0, a, 0.0),
        [[c, 0, s], [0, 1, 0], [-s, 0, c]], atol=1e-15)
    np.testing.assert_allclose(
        euler_to_rotation(0.0, 0.0, a),
        [[c, -s, 0], [s, c, 0], [0, 0, 1]], atol=1e-15)


def test_euler_composition_order_x_then_y_then_z():
    # the packed form must equal Rx @ Ry @ Rz built from the single-axis
    # matrices — the dual route for the hand-derived entries
    rx, ry, rz = 0.2, -0.4, 0.7
    want = (euler_to_rotation(rx, 0, 0) @ euler_to_rotation(0, ry, 0)
            @ euler_to_rotation(0, 0, rz))
    np.testing.assert_allclose(euler_to_rotation(rx, ry, rz), want, atol=1e-15)


def test_euler_gives_proper_rotation():
    r = euler_to_rotation(0.5, 1.1, -0.8)
    np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-15)
    np.testing.assert_allclose(np.linalg.det(r), 1.0, rtol=1e-15)


def test_pose_vec_layout_translation_first():
    t = pose_vec_to_transform([1.0, 2.0, 3.0, 0.0, 0.0, 0.0])
    np.testing.assert_array_equal(t.t, [1.0, 2.0, 3.0])
    np.testing.assert_array_equal(t.R, np.eye(3))
    r = pose_vec_to_transform([0.0, 0.0, 0.0, 0.1, 0.2, 0.3])
    np.testing.assert_allclose(r.R, euler_to_rotation(0.1, 0.2, 0.3))


def test_pose_vec_rejects_non_finite():
    with pytest.raises(ValueError):
        pose_vec_to_transform([0, 0, float("inf"), 0, 0, 0])


def test_pose_vec_to_rt_matches_scalar_path():
    vec = np.array([0.02, -0.01, 0.005, 0.03, -0.07, 0.11])
    r, t = pose_vec_to_rt(Tensor(vec, requires_grad=True))
    want = pose_vec_to_transform(vec)
    np.testing.assert_allclose(r.data, want.R, atol=1e-15)
    np.testing.assert_array_equal(t.data, want.t)


# -- projection -----------------------------------------------------------------


def test_identity_projection_is_bit_exact():
    for uv in [(0.0, 0.0), (51.5, 15.5), (103.0, 31.0), (17.25, 3.75)]:
        (us, vs), zs, valid = project(uv, 1.37, SE3Transform.identity(), K)
        assert valid
        assert (us, vs) == uv  # exact, not approximately equal
        assert zs == 1.37


def test_pure_z_translation_moves_toward_focus_of_expansion():
    # moving the source camera backwards (target-to-source t_z > 0 in the
    # source frame) shrinks the image: pixels move toward the center
    t = SE3Transform(np.eye(3), np.array([0.0, 0.0, 0.5]))
    (us, vs), zs, valid = project((80.0, 25.0), 1.0, t, K)
    assert valid
    np.testing.assert_allclose(zs, 1.5, rtol=1e-12)
    # hand computation: x/z scales by 1/(1 + 0.5/1)
    np.testing.assert_allclose(us - K.cx, (80.0 - K.cx) / 1.5, rtol=1e-12)
    np.testing.assert_allclose(vs - K.cy, (25.0 - K.cy) / 1.5, rtol=1e-12)


def test_pure_x_translation_shifts_by_disparity():
    t = SE3Transform(np.eye(3), np.array([0.1, 0.0, 0.0]))
    depth = 2.0
    (us, vs), zs, valid = project((40.0, 10.0), depth, t, K)
    assert valid
    np.testing.assert_allclose(us, 40.0 + K.fx * 0.1 / depth, rtol=1e-12)
    np.testing.assert_allclose(vs, 10.0, atol=1e-12)


def test_round_trip_through_inverse_transform():
    # project into the source, then project that point back with T^-1:
    # must land on the original pixel to well under 1e-8 px
    t = random_transform(9, scale=0.05)
    for uv in [(10.0, 5.0), (60.25, 20.5), (100.0, 30.0)]:
        (us, vs), zs, valid = project(uv, 1.2, t, K)
        assert valid
        (ub, vb), zb, valid_b = project((us, vs), zs, transform_invert(t), K)
        assert valid_b
        np.testing.assert_allclose((ub, vb), uv, atol=1e-10)
        np.testing.assert_allclose(zb, 1.2, rtol=1e-12)


def test_behind_camera_flagged_invalid():
    t = SE3Transform(np.eye(3), np.array([0.0, 0.0, -3.0]))
    (_, _), zs, valid = project((51.5, 15.5), 1.0, t, K)
    assert not valid
    assert zs <= 0


def test_non_positive_depth_rejected():
    with pytest.raises(ValueError):
        project((0.0, 0.0), 0.0, SE3Transform.identity(), K)


def test_anisotropic_focal_lengths():
    ka = CameraIntrinsics(fx=100.0, fy=50.0, cx=20.0, cy=10.0)
    t = SE3Transform(np.eye(3), np.array([0.0, 0.2, 0.0]))
    (us, vs), zs, valid = project((25.0, 14.0), 4.0, t, ka)
    assert valid
    np.testing.assert_allclose(vs, 14.0 + 50.0 * 0.2 / 4.0, rtol=1e-12)
    np.testing.assert_allclose(us, 25.0, atol=1e-12)


def test_intrinsics_scaled():
    half = K.scaled(2)
    assert (half.fx, half.fy) == (K.fx / 2, K.fy / 2)
    # a 2x2 fine block becomes one coarse pixel centered at fine 2i + 0.5
    np.testing.assert_allclose(half.cx, (K.cx - 0.5) / 2)
    np.testing.assert_allclose(half.cy, (K.cy - 0.5) / 2)
    # a fine point at the principal axis stays on the principal axis
    np.testing.assert_allclose(half.cx * 2 + 0.5, K.cx)


def test_intrinsics_validation():
    with pytest.raises(ValueError):
        CameraIntrinsics(fx=0.0, fy=1.0, cx=0.0, cy=0.0)


# -- batched projection -----------------------------------------------------------


def test_batch_project_identity_reproduces_grid():
    h, w = 8, 12
    kk = CameraIntrinsics(fx=10.0, fy=10.0, cx=(w - 1) / 2, cy=(h - 1) / 2)
    depth = Tensor(np.full((h, w), 1.3))
    coords, valid, zs = batch_project(depth, np.eye(3), np.zeros(3), kk)
    u, v = pixel_grid(h, w)
    assert valid.all()
    np.testing.assert_array_equal(coords.data[..., 0].ravel(), u)
    np.testing.assert_array_equal(coords.data[..., 1].ravel(), v)
    np.testing.assert_array_equal(zs.data[0], np.full(h * w, 1.3))


def test_batch_project_matches_scalar_projection():
    h, w = 6, 9
    kk = CameraIntrinsics(fx=8.0, fy=7.0, cx=4.0, cy=2.5)
    rng = np.random.default_rng(10)
    depth_map = rng.uniform(0.8, 1.6, (h, w))
    t = random_transform(11, scale=0.1)
    coords, valid, zs = batch_project(Tensor(depth_map), t.R, t.t, kk)
    u, v = pixel_grid(h, w)
    for i in range(0, h * w, 5):
        (us, vs), z, ok = project((u[i], v[i]), depth_map.ravel()[i], t, kk)
        np.testing.assert_allclose(zs.data[0, i], z, rtol=1e-12)
        if ok and 0 <= us <= w - 1 and 0 <= vs <= h - 1:
            assert valid.ravel()[i]
            np.testing.assert_allclose(coords.data.reshape(-1, 2)[i],
                                       (us, vs), rtol=1e-10, atol=1e-10)


def test_batch_project_flags_out_of_frame():
    h, w = 4, 6
    kk = CameraIntrinsics(fx=5.0, fy=5.0, cx=2.5, cy=1.5)
    # huge sideways shift pushes every pixel out of the source frame
    t = np.array([50.0, 0.0, 0.0])
    _, valid, _ = batch_project(Tensor(np.ones((h, w))), np.eye(3), t, kk)
    assert not valid.any()


def test_batch_project_rejects_non_positive_depth():
    with pytest.raises(ValueError):
        batch_project(Tensor(np.zeros((2, 2))), np.eye(3), np.zeros(3), K)


def test_pixel_grid_cached_and_correct():
    u, v = pixel_grid(3, 4)
    assert u is pixel_grid(3, 4)[0]
    np.testing.assert_array_equal(u[:4], [0, 1, 2, 3])
    np.testing.assert_array_equal(v[::4], [0, 1, 2])
