"""Loss-term tests against independent oracles: brute-force numpy
recomputation for the photometric term, stencil recomputation for
smoothness, np.logaddexp for the mask regularizer, and the algebraic
identities the training objective promises (mask-of-ones equivalence,
recomposition, degenerate mask pair).
"""

import numpy as np
import pytest

from ssvo.diffcore import NumericalError, Tensor, as_tensor
from ssvo.losses import (
    NoValidPixels,
    area_downsample,
    build_pyramid,
    mask_from_logits,
    mask_regularization,
    photometric_loss,
    smoothness_loss,
    total_loss,
)
from ssvo.warp import WarpResult


def _warp(synth, valid):
    synth = np.asarray(synth, dtype=np.float64)
    h, w = synth.shape[-2:]
    return WarpResult(synthesized=as_tensor(synth),
                      valid=np.asarray(valid, dtype=bool),
                      coords=as_tensor(np.zeros((h, w, 2))))


def _random_inputs(seed, c=2, h=6, w=8, n_sources=2):
    rng = np.random.default_rng(seed)
    target = rng.uniform(0.0, 1.0, (c, h, w))
    warps, valids = [], []
    for _ in range(n_sources):
        synth = rng.uniform(0.0, 1.0, (c, h, w))
        valid = rng.uniform(size=(h, w)) > 0.25
        synth = synth * valid  # invalid pixels come back exactly zero
        warps.append(_warp(synth, valid))
        valids.append(valid)
    return target, warps, valids, rng


# -- photometric term ------------------------------------------------------


def test_photometric_matches_brute_force():
    target, warps, valids, rng = _random_inputs(0)
    masks = [rng.uniform(0.0, 1.0, valids[0].shape) for _ in warps]
    got = photometric_loss(target, warps, [as_tensor(m) for m in masks])
    want = 0.0
    for wr, valid, mask in zip(warps, valids, masks):
        residual = np.abs((target - wr.synthesized.data) * valid) * mask
        want += residual.sum() / (valid.sum() * target.shape[0])
    assert float(got.data) == pytest.approx(want, rel=1e-14)


def test_photometric_with_unit_mask_equals_unmasked_exactly():
    target, warps, _, _ = _random_inputs(1)
    ones = [as_tensor(np.ones(target.shape[1:])) for _ in warps]
    masked = photometric_loss(target, warps, ones)
    unmasked = photometric_loss(target, warps, None)
    assert float(masked.data) == float(unmasked.data)


def test_photometric_with_zero_mask_is_exactly_zero():
    target, warps, _, _ = _random_inputs(2)
    zeros = [as_tensor(np.zeros(target.shape[1:])) for _ in warps]
    assert float(photometric_loss(target, warps, zeros).data) == 0.0


def test_photometric_normalization_is_resolution_independent():
    """A constant residual of r on all-valid pixels gives loss r per source
    at any resolution, and invalid pixels change nothing."""
    for h, w in ((4, 6), (8, 12)):
        target = np.full((3, h, w), 0.7)
        wr = _warp(np.full((3, h, w), 0.5), np.ones((h, w)))
        assert float(photometric_loss(target, [wr]).data) == \
            pytest.approx(0.2, rel=1e-14)
    valid = np.zeros((4, 6), dtype=bool)
    valid[:2] = True
    target = np.full((3, 4, 6), 0.7) * valid
    wr = _warp(np.full((3, 4, 6), 0.5) * valid, valid)
    assert float(photometric_loss(target, [wr]).data) == \
        pytest.approx(0.2, rel=1e-14)


def test_photometric_skips_fully_invalid_source():
    target, warps, valids, _ = _random_inputs(3, n_sources=1)
    dead = _warp(np.zeros_like(target), np.zeros(target.shape[1:]))
    both = photometric_loss(target, warps + [dead])
    alone = photometric_loss(target, warps)
    assert float(both.data) == float(alone.data)


def test_photometric_all_invalid_raises():
    target = np.zeros((1, 4, 4))
    dead = _warp(np.zeros((1, 4, 4)), np.zeros((4, 4)))
    with pytest.raises(NoValidPixels):
        photometric_loss(target, [dead, dead])


def test_photometric_shape_and_mask_count_validation():
    target, warps, _, _ = _random_inputs(4)
    bad = _warp(np.zeros((2, 3, 3)), np.ones((3, 3)))
    with pytest.raises(ValueError, match="shape"):
        photometric_loss(target, [bad])
    with pytest.raises(ValueError, match="masks for"):
        photometric_loss(target, warps, [as_tensor(np.ones((6, 8)))])


def test_photometric_mask_gradient_is_normalized_residual():
    """d loss / d mask at each pixel is |residual| * valid / (n_valid * C),
    derivable by hand from the definition."""
    target, warps, valids, rng = _random_inputs(5, n_sources=1)
    mask = Tensor(rng.uniform(0.2, 0.8, valids[0].shape), requires_grad=True)
    loss = photometric_loss(target, warps, [mask])
    loss.backward()
    residual = np.abs((target - warps[0].synthesized.data) * valids[0])
    want = residual.sum(axis=0) / (valids[0].sum() * target.shape[0])
    np.testing.assert_allclose(mask.grad, want, atol=1e-15)


# -- smoothness term ------------------------------------------------------


def test_smoothness_matches_stencil_recomputation():
    rng = np.random.default_rng(6)
    d = rng.normal(size=(5, 7))
    got = float(smoothness_loss(d).data)
    dxx = d[:, 2:] - 2 * d[:, 1:-1] + d[:, :-2]
    dyy = d[2:, :] - 2 * d[1:-1, :] + d[:-2, :]
    dxy = d[1:, 1:] - d[1:, :-1] - d[:-1, 1:] + d[:-1, :-1]
    want = np.abs(dxx).mean() + np.abs(dyy).mean() + np.abs(dxy).mean()
    assert got == pytest.approx(want, rel=1e-14)


def test_smoothness_vanishes_on_affine_disparity():
    """Second-order stencils annihilate a + b*x + c*y, so tilted-plane
    disparity costs nothing (unlike a first-order penalty)."""
    y, x = np.mgrid[0:6, 0:9].astype(np.float64)
    affine = 0.3 + 0.125 * x - 0.25 * y
    assert float(smoothness_loss(affine).data) == pytest.approx(0.0, abs=1e-13)
    assert float(smoothness_loss(np.full((6, 9), 2.4)).data) == 0.0


def test_smoothness_rejects_tiny_maps():
    with pytest.raises(ValueError, match="too small"):
        smoothness_loss(np.ones((2, 9)))


# -- mask regularizer ----------------------------------------------------------


def test_mask_regularization_matches_logaddexp():
    rng = np.random.default_rng(7)
    logits = rng.normal(0.0, 3.0, (2, 5, 6))
    got = float(mask_regularization(as_tensor(logits)).data)
    want = np.mean(np.logaddexp(logits[0], logits[1]) - logits[0])
    assert got == pytest.approx(want, rel=1e-14)


def test_mask_regularization_is_ln2_at_zero_logits():
    assert float(mask_regularization(np.zeros((2, 3, 3))).data) == \
        pytest.approx(np.log(2.0), rel=1e-15)


def test_mask_regularization_stable_at_extreme_logits():
    logits = np.zeros((2, 2, 2))
    logits[1] = 800.0  # naive exp would overflow
    got = float(mask_regularization(logits).data)
    assert got == pytest.approx(800.0, rel=1e-12)


def test_mask_regularization_decreases_as_mask_rises():
    """Driving the reliable channel up strictly lowers the penalty, so the
    regularizer opposes mask collapse: values near mask=0 are the maximal
    ones."""
    values = []
    for delta in (-6.0, -2.0, 0.0, 2.0, 6.0):
        logits = np.zeros((2, 4, 4))
        logits[0] = delta
        values.append(float(mask_regularization(logits).data))
    assert all(a > b for a, b in zip(values, values[1:]))


def test_mask_regularization_shape_validation():
    with pytest.raises(ValueError, match=r"\(2, H, W\)"):
        mask_regularization(np.zeros((3, 4, 4)))


def test_mask_from_logits_is_pair_softmax_channel_zero():
    rng = np.random.default_rng(8)
    logits = rng.normal(0.0, 2.0, (2, 4, 5))
    got = mask_from_logits(as_tensor(logits)).data
    e = np.exp(logits - logits.max(axis=0))
    want = e[0] / e.sum(axis=0)
    np.testing.assert_allclose(got, want, atol=1e-15)
    assert np.all((got > 0.0) & (got < 1.0))
    assert float(mask_from_logits(np.zeros((2, 1, 1))).data[0, 0]) == 0.5


# -- total over scales ----------------------------------------------------------


def _pyramid_inputs(seed, n_scales=2, with_masks=True):
    rng = np.random.default_rng(seed)
    targets, warps, disps, logits = [], [], [], []
    h, w = 8, 12
    for _ in range(n_scales):
        targets.append(as_tensor(rng.uniform(0.0, 1.0, (1, h, w))))
        valid = rng.uniform(size=(h, w)) > 0.2
        warps.append([_warp(rng.uniform(0.0, 1.0, (1, h, w)) * valid, valid)
                      for _ in range(2)])
        disps.append(as_tensor(rng.uniform(0.5, 2.0, (h, w))))
        logits.append([as_tensor(rng.normal(0.0, 1.0, (2, h, w)))
                       for _ in range(2)])
        h, w = h // 2, w // 2
    return targets, warps, disps, (logits if with_masks else None)


def test_total_loss_recomposition_identity():
    targets, warps, disps, logits = _pyramid_inputs(9)
    breakdown = total_loss(targets, warps, disps, logits,
                           lambda_s=0.5, lambda_e=0.2)
    assert abs(breakdown.recompose() - float(breakdown.total.data)) < 1e-10
    assert len(breakdown.per_scale) == 2


def test_total_loss_scale_weighting():
    """The smoothness weight halves per level: recombining the logged
    components with the documented lambda_s / 2^l schedule reproduces the
    total, and zero weights leave only the photometric terms."""
    targets, warps, disps, logits = _pyramid_inputs(10)
    bare = total_loss(targets, warps, disps, None,
                      lambda_s=0.0, lambda_e=0.0)
    want = sum(float(photometric_loss(t, w).data)
               for t, w in zip(targets, warps))
    assert float(bare.total.data) == pytest.approx(want, rel=1e-14)
    assert all(rg == 0.0 for _, _, rg in bare.per_scale)

    weighted = total_loss(targets, warps, disps, logits,
                          lambda_s=0.8, lambda_e=0.3)
    by_hand = sum(vs + 0.8 / 2.0 ** l * sm + 0.3 * rg
                  for l, (vs, sm, rg) in enumerate(weighted.per_scale))
    assert float(weighted.total.data) == pytest.approx(by_hand, rel=1e-12)


def test_total_loss_without_mask_reports_zero_regularizer():
    targets, warps, disps, _ = _pyramid_inputs(11, with_masks=False)
    breakdown = total_loss(targets, warps, disps, None)
    assert all(rg == 0.0 for _, _, rg in breakdown.per_scale)


def test_total_loss_nonfinite_terms_are_named():
    targets, warps, disps, logits = _pyramid_inputs(12)
    disps[1] = as_tensor(np.full(disps[1].data.shape, np.nan))
    with pytest.raises(NumericalError, match="smooth loss at scale 1"):
        total_loss(targets, warps, disps, logits)
    targets2, warps2, disps2, logits2 = _pyramid_inputs(13)
    targets2[0] = as_tensor(np.full(targets2[0].data.shape, np.nan))
    with pytest.raises(NumericalError, match="vs loss at scale 0"):
        total_loss(targets2, warps2, disps2, logits2)


def test_total_loss_pyramid_length_validation():
    targets, warps, disps, logits = _pyramid_inputs(14)
    with pytest.raises(ValueError, match="equal length"):
        total_loss(targets, warps[:1], disps, logits)
    with pytest.raises(ValueError, match="mask pyramid"):
        total_loss(targets, warps, disps, logits[:1])


def test_total_loss_propagates_no_valid_pixels():
    targets, warps, disps, logits = _pyramid_inputs(15)
    dead = _warp(np.zeros(targets[1].data.shape),
                 np.zeros(targets[1].data.shape[1:]))
    warps[1] = [dead, dead]
    with pytest.raises(NoValidPixels):
        total_loss(targets, warps, disps, logits)


# -- pyramids -----------------------------------------------------------------


def test_area_downsample_is_block_mean():
    img = np.arange(24, dtype=np.float64).reshape(4, 6)
    got = area_downsample(img)
    want = img.reshape(2, 2, 3, 2).mean(axis=(1, 3))
    np.testing.assert_array_equal(got, want)
    tri = area_downsample(np.stack([img, 2 * img]))
    assert tri.shape == (2, 2, 3)
    np.testing.assert_array_equal(tri[1], 2 * want)


def test_area_downsample_rejects_odd_dimensions():
    with pytest.raises(ValueError, match="even"):
        area_downsample(np.ones((3, 4)))


def test_build_pyramid_shapes_and_identity_base():
    img = np.random.default_rng(16).uniform(size=(2, 16, 24))
    pyramid = build_pyramid(img, levels=4)
    assert [p.shape for p in pyramid] == \
        [(2, 16, 24), (2, 8, 12), (2, 4, 6), (2, 2, 3)]
    np.testing.assert_array_equal(pyramid[0], img)
    # each level conserves the mean (area averaging)
    for p in pyramid[1:]:
        assert p.mean() == pytest.approx(img.mean(), rel=1e-14)
