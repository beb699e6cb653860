import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from warpgeo.camera import CameraIntrinsics, PoseSE3, se3_log
from warpgeo.gradcheck import finite_diff_check, random_scene
from warpgeo.losses import (
    ABLATIONS,
    CSV_HEADER,
    TERM_NAMES,
    Ablation,
    LossWeights,
    downsample,
    downsample_vjp,
    gradient_matching_loss,
    mask_loss,
    photometric_loss,
    pyramid_levels,
    sigmoid,
    smoothness_loss,
    total_objective,
)
from warpgeo.scene import Plane, SceneSpec, camera_at, make_sequence, sine_texture

unit = st.floats(0, 1, allow_nan=False)


def test_photometric_examples():
    assert photometric_loss([[0.5]], [np.array([[0.2]])], [np.array([[1.0]])]).value == pytest.approx(0.3)
    img = np.random.default_rng(0).uniform(size=(4, 5, 3))
    assert photometric_loss(img, [img], [np.ones((4, 5))]).value == 0
    other = np.random.default_rng(1).uniform(size=(4, 5, 3))
    assert photometric_loss(img, [other], [np.zeros((4, 5))]).value == 0


def test_photometric_sums_channels_and_excludes_invalid():
    t = np.zeros((1, 2, 3))
    hat = np.ones((1, 2, 3))
    valid = [np.array([[True, False]])]
    term = photometric_loss(t, [hat], [np.ones((1, 2))], valid)
    assert term.value == pytest.approx(3.0)
    assert not term.grads["warped"][0][0, 1].any()
    mean = photometric_loss(t, [hat], [np.ones((1, 2))], valid, reduction="mean")
    assert mean.value == pytest.approx(3.0)


def test_photometric_no_valid_pixels_flags_diagnostic():
    term = photometric_loss(np.zeros((2, 2)), [np.ones((2, 2))], [np.ones((2, 2))],
                            [np.zeros((2, 2), bool)], reduction="mean")
    assert term.value == 0 and term.diagnostics


def test_smoothness_examples():
    img = np.zeros((1, 3))
    assert smoothness_loss(np.array([[0.0, 0.0, 1.0]]), 2, img, 0.7).value == pytest.approx(1.0)
    ramp = np.add.outer(np.arange(5.0), 2 * np.arange(6.0))
    assert smoothness_loss(ramp, 2, np.zeros((5, 6)), 0.1).value == 0
    normals = np.broadcast_to([0.0, 0.0, -1.0], (4, 4, 3))
    assert smoothness_loss(normals, 1, np.zeros((4, 4)), 0.1).value == 0
    with pytest.raises(ValueError):
        smoothness_loss(ramp, 3, np.zeros((5, 6)), 0.1)


def test_smoothness_edge_weighting():
    field = np.array([[0.0, 1.0]])
    img = np.array([[0.0, 1.0]])
    assert smoothness_loss(field, 1, img, 2.0).value == pytest.approx(np.exp(-2.0))
    assert smoothness_loss(field, 1, img, 0.0).value == pytest.approx(1.0)


def test_mask_loss_examples():
    n = 12
    assert mask_loss([np.full((3, 4), 0.5)]).value == pytest.approx(n * np.log(2))
    assert mask_loss([np.full((3, 4), 1.0 - 1e-15)]).value < 1e-12


def test_mask_loss_gradient(rng):
    m = rng.uniform(0.1, 0.9, (3, 4))

    def f(m):
        t = mask_loss([m])
        return t.value, {"m": t.grads["masks"][0]}

    rep = finite_diff_check(f, {"m": m}, tol=1e-5)
    assert rep.passed, rep.table()


def test_gradient_matching_examples():
    t = np.array([[0.0, 1.0, 0.0]])
    term = gradient_matching_loss(t, [np.zeros((1, 3))], [np.ones((1, 3))])
    assert term.value == pytest.approx(2.0)
    assert gradient_matching_loss(t, [t.copy()], [np.ones((1, 3))]).value == 0


def test_brightness_offset_invariance(rng):
    t = rng.uniform(size=(5, 6, 3))
    m = [np.ones((5, 6))]
    shifted = [t + 0.1]
    assert gradient_matching_loss(t, shifted, m).value == pytest.approx(0.0, abs=1e-12)
    assert photometric_loss(t, shifted, m).value == pytest.approx(0.1 * 5 * 6 * 3)


@settings(max_examples=50, deadline=None)
@given(arrays(float, (4, 5), elements=unit), arrays(float, (4, 5), elements=unit),
       arrays(float, (4, 5), elements=st.floats(0.01, 0.99)))
def test_terms_are_nonnegative(a, b, m):
    assert photometric_loss(a, [b], [m]).value >= 0
    assert gradient_matching_loss(a, [b], [m]).value >= 0
    assert smoothness_loss(a, 2, b, 0.1).value >= 0
    assert smoothness_loss(a, 1, b, 0.1).value >= 0
    assert mask_loss([m]).value >= 0


def test_sigmoid_stays_inside_unit_interval():
    x = np.array([-800.0, -30.0, 0.0, 30.0, 800.0])
    s = sigmoid(x)
    assert np.all((s >= 0) & (s <= 1)) and s[2] == 0.5
    assert np.all(sigmoid(np.linspace(-20, 20, 41)) > 0)


def test_downsample_drops_trailing_row_and_vjp_is_adjoint(rng):
    x = rng.normal(size=(5, 7))
    y = downsample(x)
    assert y.shape == (2, 3)
    assert y[0, 0] == pytest.approx(x[:2, :2].mean())
    g = rng.normal(size=y.shape)
    assert np.sum(g * y) == pytest.approx(np.sum(downsample_vjp(g, x.shape) * x))


def test_pyramid_levels_cap():
    assert pyramid_levels(32, 104, 4) == 3
    assert pyramid_levels(128, 416, 4) == 4
    assert pyramid_levels(8, 12, 4) == 1
    assert pyramid_levels(64, 64, 1) == 1


def test_loss_weight_defaults():
    w = LossWeights()
    assert (w.lambda_s, w.lambda_m, w.lambda_n, w.alpha_smooth) == (0.5, 0.2, 1.0, 0.1)
    assert w.lambda_g == w.lambda_s
    assert LossWeights(lambda_s=0.3).lambda_g == 0.3
    with pytest.raises(ValueError):
        LossWeights(lambda_m=-1.0)


def test_ablation_labels():
    assert set(ABLATIONS) == {"no d-n", "smooth no gradient", "no img grad for d-n", "no normal smooth"}
    assert not Ablation.named("no d-n").use_dn
    assert not Ablation.named("smooth no gradient").edge_smooth
    assert not Ablation.named("no img grad for d-n").edge_dn
    assert not Ablation.named("no normal smooth").normal_smooth
    assert Ablation.named("full") == Ablation()
    with pytest.raises(KeyError):
        Ablation.named("bogus")


@pytest.fixture(scope="module")
def small():
    return random_scene(8, 12, seed=3)


def test_report_total_matches_parts(small):
    obs, depth, twists, logits, _ = small
    for full in (False, True):
        for label in ("full", *ABLATIONS):
            r = total_objective(obs, depth, twists, logits, ablation=Ablation.named(label), full=full)
            assert abs(r.total - r.recomputed_total()) <= 1e-12
            assert all(r.terms[k] >= 0 for k in TERM_NAMES)
    assert CSV_HEADER == ["step", "vs", "smooth_depth", "smooth_normal", "mask", "grad", "total"]
    row = r.csv_row(7)
    assert row[0] == 7 and row[-1] == r.total
    assert json.loads(r.to_json())["total"] == r.total


def test_zero_weights_leave_photometric_only(small):
    obs, depth, twists, logits, _ = small
    w = LossWeights(lambda_s=0.0, lambda_m=0.0, lambda_g=0.0, lambda_n=0.0)
    r = total_objective(obs, depth, twists, logits, w)
    assert r.total == r.terms["vs"]


def test_stage_one_drops_gradient_and_normal_terms(small):
    obs, depth, twists, logits, _ = small
    r = total_objective(obs, depth, twists, logits, full=False)
    assert r.weights["lambda_g"] == 0 and r.weights["lambda_n"] == 0
    r = total_objective(obs, depth, twists, logits, ablation=Ablation.named("no normal smooth"))
    assert r.weights["lambda_n"] == 0 and r.weights["lambda_g"] == LossWeights().lambda_g


def test_gradients_without_consistency_layers(small):
    obs, depth, twists, logits, _ = small
    ab = Ablation.named("no d-n")
    r = total_objective(obs, depth, twists, logits, ablation=ab)
    assert np.array_equal(r.refined_depth, depth)

    def f(depth, twists, mask_logits):
        r = total_objective(obs, depth, twists, mask_logits, ablation=ab)
        return r.total, {"depth": r.grad_depth, "twists": r.grad_twists, "mask_logits": r.grad_mask_logits}

    rep = finite_diff_check(f, {"depth": depth, "twists": twists, "mask_logits": logits}, max_coords=60)
    assert rep.passed, rep.table()


def _shift_scene(shift_px: float, height=32, width=104):
    K = CameraIntrinsics.default(height, width)
    depth = 10.0
    b = shift_px * depth / K.fx
    plane = Plane([0.0, 0.0, -1.0], -depth, sine_texture(K.fx, depth, seed=2))
    spec = SceneSpec([plane], K, PoseSE3.identity(), [camera_at([-b, 0, 0]), camera_at([b, 0, 0])])
    return make_sequence(spec)


@pytest.mark.parametrize("shift", [0.0, 4.0])
def test_ground_truth_gives_perfect_warp(shift):
    """Integer pixel shifts at every pyramid level make the warp exact."""
    seq = _shift_scene(shift)
    twists = np.array([se3_log(p) for p in seq.poses])
    logits = np.full((2,) + seq.depth_gt.shape, 40.0)
    r = total_objective(seq.observation(), seq.depth_gt, twists, logits, levels=3)
    assert r.terms["vs"] < 1e-6 and r.terms["grad"] < 1e-6


def test_objective_is_deterministic(small):
    obs, depth, twists, logits, _ = small
    a = total_objective(obs, depth, twists, logits)
    b = total_objective(obs, depth, twists, logits)
    assert a.total == b.total
    assert np.array_equal(a.grad_depth, b.grad_depth)
    assert np.array_equal(a.grad_twists, b.grad_twists)
    assert np.array_equal(a.grad_mask_logits, b.grad_mask_logits)
