"""Renderer and dataset-generation tests.

The ray caster is checked against closed forms (flat surface at constant
depth, tilted camera over a flat surface, the implicit surface equation for
bumpy scenes, the inverse-square headlamp law with constant albedo) rather
than stored outputs. Dataset assembly is checked for windowing, overlap
dropping, corruption-mask exactness on the 8-bit grid, determinism, and the
on-disk round trip through the training loader.
"""

import numpy as np
import pytest

from ssvo.fileio import quantize_image
from ssvo.geometry import (
    CameraIntrinsics,
    SE3Transform,
    euler_to_rotation,
    pixel_grid,
    transform_compose,
    transform_invert,
)
from ssvo.synthdata import (
    CorruptionSpec,
    RenderError,
    SceneSpec,
    generate_dataset,
    random_trajectory,
    render_view,
    surface_albedo,
    surface_height,
    write_dataset,
)
from ssvo.trainer import load_dataset
from ssvo.warp import inverse_warp
from ssvo.diffcore import Tensor, no_grad

H, W = 24, 32


def _k(h=H, w=W):
    return CameraIntrinsics(fx=0.9 * w, fy=0.9 * w,
                            cx=(w - 1) / 2.0, cy=(h - 1) / 2.0)


def _flat(seed=0, **kw):
    return SceneSpec(seed=seed, **kw)


# -- ray caster against closed forms -----------------------------------------


def test_flat_surface_depth_is_constant_d0():
    image, depth = render_view(_flat(d0=1.3), SE3Transform.identity(),
                               _k(), H, W)
    np.testing.assert_allclose(depth, 1.3, atol=2e-6)
    assert image.shape == (H, W)


def test_tilted_camera_depth_matches_closed_form():
    """Over a flat surface z = d0, a ray from the origin with world direction
    d hits at depth lambda = d0 / d_z (depth being camera z with rays
    normalized to z = 1)."""
    k = _k()
    rot = euler_to_rotation(0.08, -0.05, 0.02)
    pose = SE3Transform(rot, np.zeros(3))
    _, depth = render_view(_flat(d0=1.0), pose, k, H, W)

    u, v = pixel_grid(H, W)
    rays = np.stack([(u - k.cx) / k.fx, (v - k.cy) / k.fy, np.ones(H * W)])
    expected = 1.0 / (rot @ rays)[2]
    np.testing.assert_allclose(depth, expected.reshape(H, W), atol=2e-6)


def test_bumpy_surface_depth_satisfies_surface_equation():
    """Independent root condition: the hit point of every ray must lie on
    z = h(x, y) to the bisection tolerance, for a random scene and a random
    non-trivial pose."""
    spec = SceneSpec.random(seed=5)
    pose = random_trajectory(seed=6, n_frames=4)[-1]
    k = _k()
    _, depth = render_view(spec, pose, k, H, W)

    u, v = pixel_grid(H, W)
    rays = np.stack([(u - k.cx) / k.fx, (v - k.cy) / k.fy, np.ones(H * W)])
    d_world = pose.R @ rays
    lam = depth.reshape(-1)
    hit = pose.t[:, None] + lam * d_world
    residual = hit[2] - surface_height(spec, hit[0], hit[1])
    assert np.max(np.abs(residual)) < 5e-6


def test_render_raises_when_camera_nearly_touches_surface():
    pose = SE3Transform(np.eye(3), np.array([0.0, 0.0, 0.96]))
    with pytest.raises(RenderError, match="bracket"):
        render_view(_flat(d0=1.0), pose, _k(), H, W)


def test_headlamp_follows_inverse_square_law():
    """With texture_contrast=0 the albedo is the constant 0.575, so the
    image must equal clip(strength * 0.575 / r^2) on the 8-bit grid, with
    r^2 = d0^2 * |ray|^2 over a flat surface."""
    k = _k()
    spec = _flat(d0=1.1, texture_contrast=0.0, headlamp_strength=0.8)
    image, _ = render_view(spec, SE3Transform.identity(), k, H, W)

    u, v = pixel_grid(H, W)
    r2 = 1.1 ** 2 * (((u - k.cx) / k.fx) ** 2 + ((v - k.cy) / k.fy) ** 2 + 1.0)
    expected = quantize_image(
        np.clip(0.8 * 0.575 / r2, 0.0, 1.0).reshape(H, W))
    assert np.max(np.abs(image - expected)) <= 1.0 / 255 + 1e-12
    assert np.mean(np.abs(image - expected)) < 1e-3


def test_textured_albedo_has_contrast_and_stays_in_range():
    spec = SceneSpec.random(seed=9, headlamp=False)
    image, _ = render_view(spec, SE3Transform.identity(), _k(), H, W)
    assert image.std() > 0.05
    assert image.min() >= 0.2 - 1e-12
    assert image.max() <= 0.95 + 1e-12


def test_albedo_is_deterministic_function_of_spec():
    spec = SceneSpec.random(seed=10)
    x = np.linspace(-0.4, 0.4, 50)
    y = np.linspace(-0.3, 0.3, 50)
    a = surface_albedo(spec, x, y)
    b = surface_albedo(spec, x, y)
    assert a.tobytes() == b.tobytes()


# -- trajectory generator ------------------------------------------------------


def test_trajectory_respects_step_caps():
    d0 = 1.0
    poses = random_trajectory(seed=3, n_frames=40, d0=d0)
    assert len(poses) == 40
    np.testing.assert_array_equal(poses[0].matrix, np.eye(4))
    for a, b in zip(poses, poses[1:]):
        rel = transform_compose(transform_invert(a), b)
        assert np.linalg.norm(rel.t) <= 0.02 * d0 + 1e-12
        angle = np.degrees(np.arccos(
            np.clip((np.trace(rel.R) - 1.0) / 2.0, -1.0, 1.0)))
        assert angle <= 2.0 + 1e-9
    for p in poses:
        assert abs(p.t[2]) < 0.2 * d0


def test_trajectory_is_deterministic():
    a = random_trajectory(seed=4, n_frames=10)
    b = random_trajectory(seed=4, n_frames=10)
    for pa, pb in zip(a, b):
        assert pa.matrix.tobytes() == pb.matrix.tobytes()


# -- dataset assembly ---------------------------------------------------------


@pytest.fixture(scope="module")
def clean_bundle():
    spec = SceneSpec.random(seed=21)
    trajectory = random_trajectory(seed=22, n_frames=8)
    return generate_dataset(spec, trajectory, _k(), H, W)


@pytest.fixture(scope="module")
def corrupt_bundle():
    spec = SceneSpec.random(seed=23, corruption=CorruptionSpec())
    trajectory = random_trajectory(seed=24, n_frames=6)
    return generate_dataset(spec, trajectory, _k(), H, W)


def test_window_count_and_indices(clean_bundle):
    assert clean_bundle.dropped == 0
    assert [s.index for s in clean_bundle.samples] == list(range(1, 7))
    assert len(clean_bundle.frames) == 8


def test_sample_poses_match_trajectory_matrix_algebra(clean_bundle):
    """Relative poses must equal inv(T_source) @ T_target computed through
    plain 4x4 matrix inversion, an independent route around the SE3 helpers."""
    traj = clean_bundle.trajectory
    for s in clean_bundle.samples:
        t = s.index
        for pose, src in zip(s.poses, (t - 1, t + 1)):
            expected = np.linalg.inv(traj[src].matrix) @ traj[t].matrix
            np.testing.assert_allclose(pose.matrix, expected, atol=1e-12)


def test_sample_triplets_are_the_rendered_frames(clean_bundle):
    for s in clean_bundle.samples:
        t = s.index
        for ch in range(3):
            np.testing.assert_array_equal(s.triplet.i_target[ch],
                                          clean_bundle.frames[t])
            np.testing.assert_array_equal(s.triplet.i_prev[ch],
                                          clean_bundle.frames[t - 1])
            np.testing.assert_array_equal(s.triplet.i_next[ch],
                                          clean_bundle.frames[t + 1])
        np.testing.assert_array_equal(s.depth_t, clean_bundle.depths[t])


def test_ground_truth_warp_reproduces_target(clean_bundle):
    """Warping each clean source with ground-truth depth and pose must
    reproduce the target within 2% mean intensity on valid pixels."""
    k = clean_bundle.intrinsics
    for s in clean_bundle.samples:
        target = s.triplet.i_target[0]
        for i in range(2):
            with no_grad():
                wr = inverse_warp(Tensor(s.clean_sources[i][None]),
                                  Tensor(s.depth_t), s.poses[i], k)
            err = np.abs(wr.synthesized.data[0] - target)[wr.valid]
            assert wr.valid.mean() > 0.3
            assert err.mean() < 0.02


def test_generation_is_bitwise_deterministic(corrupt_bundle):
    spec = SceneSpec.random(seed=23, corruption=CorruptionSpec())
    trajectory = random_trajectory(seed=24, n_frames=6)
    again = generate_dataset(spec, trajectory, _k(), H, W)
    assert len(again.samples) == len(corrupt_bundle.samples)
    for a, b in zip(again.samples, corrupt_bundle.samples):
        assert a.triplet.i_prev.tobytes() == b.triplet.i_prev.tobytes()
        assert a.triplet.i_next.tobytes() == b.triplet.i_next.tobytes()
        assert a.depth_t.tobytes() == b.depth_t.tobytes()
        assert a.corruption_mask.tobytes() == b.corruption_mask.tobytes()


def test_depth_envelope_violations_raise():
    far = SE3Transform(np.eye(3), np.array([0.0, 0.0, -1.1]))
    near = SE3Transform(np.eye(3), np.array([0.0, 0.0, 0.6]))
    for bad in (far, near):
        with pytest.raises(RenderError, match="envelope"):
            generate_dataset(_flat(d0=1.0),
                             [SE3Transform.identity(), bad,
                              SE3Transform.identity()], _k(), H, W)


def test_low_overlap_windows_are_dropped():
    k = _k()
    shift = SE3Transform(np.eye(3), np.array([0.85, 0.0, 0.0]))
    trajectory = [SE3Transform.identity(), shift,
                  SE3Transform.identity(), SE3Transform.identity()]
    strict = generate_dataset(_flat(), trajectory, k, H, W, min_overlap=0.3)
    assert strict.dropped == 2 and strict.samples == []
    lax = generate_dataset(_flat(), trajectory, k, H, W, min_overlap=0.01)
    assert lax.dropped == 0 and len(lax.samples) == 2


# -- corruption ----------------------------------------------------------------


def test_source_masks_flag_exactly_the_changed_pixels(corrupt_bundle):
    for s in corrupt_bundle.samples:
        for i, src in enumerate((s.triplet.i_prev, s.triplet.i_next)):
            recomputed = src[0] != s.clean_sources[i]
            np.testing.assert_array_equal(s.source_masks[i], recomputed)
            assert s.source_masks[i].any()
        np.testing.assert_array_equal(
            s.corruption_mask, s.target_masks[0] | s.target_masks[1])


def test_target_frame_is_never_corrupted(corrupt_bundle):
    for s in corrupt_bundle.samples:
        t = s.index
        np.testing.assert_array_equal(s.triplet.i_target[0],
                                      corrupt_bundle.frames[t])


def test_specular_blobs_only_brighten():
    spec = SceneSpec.random(
        seed=31, corruption=CorruptionSpec(n_specular=2, n_occluders=0))
    bundle = generate_dataset(spec, random_trajectory(seed=32, n_frames=3),
                              _k(), H, W)
    s = bundle.samples[0]
    for i, src in enumerate((s.triplet.i_prev, s.triplet.i_next)):
        diff = src[0] - s.clean_sources[i]
        assert np.all(diff >= 0.0)
        assert diff.max() > 0.1


def test_occluder_disc_paints_constant_shade():
    shade = 0.65
    spec = SceneSpec.random(
        seed=33,
        corruption=CorruptionSpec(n_specular=0, n_occluders=1,
                                  occluder_shade=shade))
    bundle = generate_dataset(spec, random_trajectory(seed=34, n_frames=3),
                              _k(), H, W)
    s = bundle.samples[0]
    flagged = s.triplet.i_prev[0][s.source_masks[0]]
    assert flagged.size > 0
    np.testing.assert_allclose(flagged, quantize_image(np.array([shade]))[0])


# -- on-disk round trip ---------------------------------------------------------


def test_write_then_load_round_trip(tmp_path, corrupt_bundle):
    write_dataset(tmp_path, corrupt_bundle)
    store = load_dataset(tmp_path, H, W)

    assert store.n_frames == len(corrupt_bundle.frames)
    assert len(store.triplets) == len(corrupt_bundle.samples)
    k = corrupt_bundle.intrinsics
    for got, want in ((store.intrinsics.fx, k.fx), (store.intrinsics.fy, k.fy),
                      (store.intrinsics.cx, k.cx), (store.intrinsics.cy, k.cy)):
        assert got == want

    for trip, s in zip(store.triplets, corrupt_bundle.samples):
        assert trip.index == s.index
        assert trip.i_prev.tobytes() == s.triplet.i_prev.tobytes()
        assert trip.i_target.tobytes() == s.triplet.i_target.tobytes()
        assert trip.i_next.tobytes() == s.triplet.i_next.tobytes()

    assert store.gt_depths is not None
    for depth, s in zip(store.gt_depths, corrupt_bundle.samples):
        # depth files hold float32, so the round trip is exact at that precision
        at_stored_precision = s.depth_t.astype(np.float32).astype(np.float64)
        assert depth.tobytes() == at_stored_precision.tobytes()

    assert store.corruption_masks is not None
    for masks, s in zip(store.corruption_masks, corrupt_bundle.samples):
        for i in range(2):
            np.testing.assert_array_equal(masks[i], s.target_masks[i])

    assert store.gt_poses is not None
    for pair, s in zip(store.gt_poses, corrupt_bundle.samples):
        for loaded, direct in zip(pair, s.poses):
            np.testing.assert_allclose(loaded.matrix, direct.matrix,
                                       atol=1e-12)


# -- spec validation -------------------------------------------------------------


def test_scene_spec_rejects_mismatched_bump_tuples():
    with pytest.raises(ValueError, match="equal length"):
        SceneSpec(seed=0, bump_amps=(0.1,), bump_freqs=(), bump_phases=(0.0,))


def test_scene_spec_rejects_too_many_bumps():
    n = 9
    with pytest.raises(ValueError, match="at most 8"):
        SceneSpec(seed=0, bump_amps=(0.01,) * n,
                  bump_freqs=((0.3, 0.3),) * n, bump_phases=(0.0,) * n)


def test_generate_requires_three_poses():
    with pytest.raises(ValueError, match="at least 3"):
        generate_dataset(_flat(), [SE3Transform.identity()] * 2, _k(), H, W)
