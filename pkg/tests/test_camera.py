import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from warpgeo.camera import (
    CameraIntrinsics,
    PoseSE3,
    backproject,
    project,
    se3_exp,
    se3_exp_jacobian,
    se3_log,
    twist_vjp,
    warp_coords,
    warp_field,
    warp_field_vjp,
)
from warpgeo.gradcheck import finite_diff_check

from conftest import expm_oracle, twist_matrix

finite = dict(allow_nan=False, allow_infinity=False)


def test_intrinsics_validation():
    with pytest.raises(ValueError):
        CameraIntrinsics(0.0, 1.0, 0.0, 0.0, 4, 4)
    with pytest.raises(ValueError):
        CameraIntrinsics(1.0, -1.0, 0.0, 0.0, 4, 4)
    with pytest.raises(ValueError):
        CameraIntrinsics(1.0, 1.0, 4.0, 0.0, 4, 4)
    with pytest.raises(ValueError):
        CameraIntrinsics(1.0, 1.0, 0.0, -0.1, 4, 4)


def test_intrinsics_json_round_trip():
    K = CameraIntrinsics.default(32, 104)
    assert CameraIntrinsics.from_dict(json.loads(json.dumps(K.to_dict()))) == K
    assert set(K.to_dict()) == {"fx", "fy", "cx", "cy", "width", "height"}
    assert np.allclose(K.matrix @ K.inverse, np.eye(3))


def test_halved_intrinsics_track_area_downsample():
    K = CameraIntrinsics(40.0, 30.0, 7.5, 3.5, 16, 8)
    k = K.halved()
    assert (k.width, k.height, k.fx, k.fy) == (8, 4, 20.0, 15.0)
    # fine pixels 2u' and 2u'+1 average into coarse pixel u'
    assert k.cx == pytest.approx(3.5) and k.cy == pytest.approx(1.5)


def test_rays_are_read_only_and_unit_z():
    K = CameraIntrinsics.default(8, 12)
    r = K.rays()
    assert r.shape == (8, 12, 3) and np.all(r[..., 2] == 1)
    with pytest.raises(ValueError):
        r[0, 0, 0] = 1.0


def test_backproject_examples(K_small):
    assert np.allclose(backproject((0, 0), 2.0, CameraIntrinsics(1, 1, 0, 0, 1, 1)), [0, 0, 2])
    assert np.allclose(backproject((50, 50), 3.0, K_small), [0, 0, 3])
    oracle = 3.0 * np.linalg.inv(K_small.matrix) @ np.array([150.0, 50.0, 1.0])
    assert np.allclose(backproject((150, 50), 3.0, K_small), oracle)
    assert np.allclose(oracle, [3, 0, 3])


@pytest.mark.parametrize("d", [0.0, -1.0])
def test_backproject_rejects_non_positive_depth(K_small, d):
    with pytest.raises(ValueError):
        backproject((1, 1), d, K_small)


def test_warp_examples(K_small):
    x, z, ok = warp_coords((50, 50), 10.0, PoseSE3.identity(), K_small)
    assert ok and z == 10.0 and np.array_equal(x, [50.0, 50.0])
    x, z, ok = warp_coords((50, 50), 10.0, PoseSE3(np.eye(3), [1.0, 0.0, 0.0]), K_small)
    assert ok and np.allclose(x, [60, 50]) and z == pytest.approx(10.0)
    x, z, ok = warp_coords((50, 50), 10.0, PoseSE3(np.eye(3), [0.0, 0.0, -10.0]), K_small)
    assert not ok and z == 0.0


def test_warp_field_matches_pointwise(rng):
    K = CameraIntrinsics.default(6, 9)
    D = rng.uniform(2, 5, (6, 9))
    pose = se3_exp(rng.normal(0, 0.1, 6))
    wp = warp_field(D, pose, K)
    for r, c in [(0, 0), (3, 4), (5, 8)]:
        x, z, ok = warp_coords((c, r), D[r, c], pose, K)
        assert ok == wp.valid[r, c]
        assert np.allclose(x, [wp.u[r, c], wp.v[r, c]], atol=1e-10)
        assert z == pytest.approx(wp.z[r, c])


def test_se3_exp_zero_is_identity():
    p = se3_exp(np.zeros(6))
    assert np.array_equal(p.rotation, np.eye(3)) and np.array_equal(p.translation, np.zeros(3))


def test_se3_exp_quarter_turn_against_expm():
    twist = np.array([0, 0, np.pi / 2, 0.3, -0.2, 0.5])
    pose = se3_exp(twist)
    assert np.allclose(pose.rotation, [[0, -1, 0], [1, 0, 0], [0, 0, 1]], atol=1e-12)
    assert np.allclose(pose.matrix, expm_oracle(twist_matrix(twist)), atol=1e-12)


def test_se3_exp_against_expm_random(rng):
    for _ in range(50):
        axis = rng.normal(size=3)
        twist = np.concatenate([axis / np.linalg.norm(axis) * rng.uniform(0, 3), rng.normal(size=3)])
        assert np.allclose(se3_exp(twist).matrix, expm_oracle(twist_matrix(twist)), atol=1e-11)


def test_log_exp_round_trip_100_twists(rng):
    worst = 0.0
    for _ in range(100):
        axis = rng.normal(size=3)
        twist = np.concatenate([axis / np.linalg.norm(axis) * rng.uniform(0, 3), rng.normal(size=3)])
        worst = max(worst, np.abs(se3_log(se3_exp(twist)) - twist).max())
    assert worst < 1e-7


@pytest.mark.parametrize("angle", [0.0, 1e-12, 1e-6, 0.05, 0.0999, 0.1001, 1.0, np.pi - 1e-4, np.pi - 1e-7])
def test_exp_log_across_branches(angle, rng):
    axis = rng.normal(size=3)
    twist = np.concatenate([axis / np.linalg.norm(axis) * angle, rng.normal(size=3)])
    pose = se3_exp(twist)
    back = se3_exp(se3_log(pose))
    assert np.allclose(back.matrix, pose.matrix, atol=1e-7)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-1.0, 1.0, **finite), min_size=6, max_size=6))
def test_rotation_is_orthonormal(values):
    R = se3_exp(np.array(values)).rotation
    assert np.abs(R.T @ R - np.eye(3)).max() < 1e-9
    assert abs(np.linalg.det(R) - 1.0) < 1e-9


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.floats(-0.5, 0.5, **finite), min_size=6, max_size=6),
    st.lists(st.floats(-0.5, 0.5, **finite), min_size=6, max_size=6),
    st.floats(0.0, 100.0), st.floats(0.0, 100.0), st.floats(5.0, 20.0),
)
def test_composition_through_3d(t1, t2, u, v, d):
    K = CameraIntrinsics(100.0, 100.0, 50.0, 50.0, 101, 101)
    T1, T2 = se3_exp(np.array(t1)), se3_exp(np.array(t2))
    p1 = T1.apply(backproject((u, v), d, K))
    p12 = T2.apply(p1)
    direct = T2.compose(T1).apply(backproject((u, v), d, K))
    assert np.abs(direct - p12).max() < 1e-9
    if p12[2] > 1e-3:
        x, z, ok = warp_coords((u, v), d, T2.compose(T1), K)
        assert ok and z == pytest.approx(p12[2], rel=1e-12)
        assert np.allclose(x, project(p12, K)[0], atol=1e-8)


@settings(max_examples=100, deadline=None)
@given(st.floats(-5, 5, **finite), st.floats(-5, 5, **finite), st.floats(0.01, 50))
def test_backproject_project_round_trip(x, y, z):
    K = CameraIntrinsics(80.0, 90.0, 30.0, 20.0, 64, 48)
    p = np.array([x, y, z])
    uv, depth = project(p, K)
    back = backproject(uv, depth, K)
    assert np.abs(back - p).max() <= 1e-9 * max(1.0, np.abs(p).max())


def test_pose_serialisation_and_inverse(rng):
    pose = se3_exp(rng.normal(0, 0.5, 6))
    values = pose.to_list()
    assert len(values) == 12
    again = PoseSE3.from_list(json.loads(json.dumps(values)))
    assert np.array_equal(again.matrix, pose.matrix)
    assert np.allclose(pose.compose(pose.inverse()).matrix, np.eye(4), atol=1e-12)


def test_exp_jacobian_matches_finite_differences(rng):
    for _ in range(20):
        twist = rng.normal(0, 0.8, 6)
        _, d_rot, d_t = se3_exp_jacobian(twist)
        for k in range(6):
            e = np.zeros(6)
            e[k] = 1e-6
            hi, lo = se3_exp(twist + e), se3_exp(twist - e)
            assert np.allclose(d_rot[k], (hi.rotation - lo.rotation) / 2e-6, atol=1e-7)
            assert np.allclose(d_t[k], (hi.translation - lo.translation) / 2e-6, atol=1e-7)


def test_warp_jacobians_1000_configurations(rng):
    """Field VJP against central differences of the pointwise warp, 1000 configurations."""
    K = CameraIntrinsics(30.0, 30.0, 10.0, 8.0, 21, 17)
    h = 1e-5
    worst = 0.0
    for i in range(1000):
        twist = rng.normal(0, 0.05, 6)
        D = rng.uniform(2.0, 20.0, (17, 21))
        r, c = rng.integers(0, 17), rng.integers(0, 21)
        cu, cv = rng.normal(size=2)
        gu = np.zeros((17, 21))
        gv = np.zeros((17, 21))
        gu[r, c], gv[r, c] = cu, cv
        pose = se3_exp(twist)
        gd, gr, gt = warp_field_vjp(D, pose, K, gu, gv)
        analytic = np.r_[gd[r, c], twist_vjp(twist, gr, gt)]

        def f(d, tw):
            x, _, ok = warp_coords((c, r), d, se3_exp(tw), K)
            assert ok
            return cu * x[0] + cv * x[1]

        numeric = np.r_[(f(D[r, c] + h, twist) - f(D[r, c] - h, twist)) / (2 * h),
                        [(f(D[r, c], twist + h * e) - f(D[r, c], twist - h * e)) / (2 * h) for e in np.eye(6)]]
        err = np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
        worst = max(worst, err.max())
    assert worst < 1e-4


def test_warp_field_vjp_gradcheck(rng):
    K = CameraIntrinsics.default(7, 10)
    D = rng.uniform(3, 6, (7, 10))
    cu, cv = rng.normal(size=(2, 7, 10))

    def f(depth, twist):
        pose = se3_exp(twist)
        wp = warp_field(depth, pose, K)
        gd, gr, gt = warp_field_vjp(depth, pose, K, cu, cv, wp)
        return float(np.sum(cu * wp.u + cv * wp.v)), {"depth": gd, "twist": twist_vjp(twist, gr, gt)}

    rep = finite_diff_check(f, {"depth": D, "twist": rng.normal(0, 0.05, 6)})
    assert rep.passed, rep.table()


def test_behind_camera_pixels_are_invalid_and_gradient_free():
    K = CameraIntrinsics.default(4, 5)
    D = np.full((4, 5), 2.0)
    D[1, 2] = 10.0
    pose = PoseSE3(np.eye(3), [0.0, 0.0, -5.0])
    wp = warp_field(D, pose, K)
    assert wp.valid.sum() == 1 and wp.valid[1, 2]
    gd, _, _ = warp_field_vjp(D, pose, K, np.ones((4, 5)), np.ones((4, 5)), wp)
    assert np.count_nonzero(gd) == 1
