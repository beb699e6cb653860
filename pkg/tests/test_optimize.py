import numpy as np
import pytest

from warpgeo.camera import CameraIntrinsics, PoseSE3
from warpgeo.losses import TERM_NAMES
from warpgeo.optimize import OptimConfig, init_state, optimize
from warpgeo.scene import Plane, SceneSpec, camera_at, make_sequence, preset, sine_texture

DATA_TERMS = [k + 1 for k, name in enumerate(TERM_NAMES) if name != "mask"]


def shift_scene(shift_px=4.0, height=32, width=104):
    """Fronto-parallel plane seen by two sources displaced by whole pixels at every level."""
    K = CameraIntrinsics.default(height, width)
    b = shift_px * 10.0 / K.fx
    plane = Plane([0.0, 0.0, -1.0], -10.0, sine_texture(K.fx, 10.0, seed=2))
    return make_sequence(SceneSpec([plane], K, PoseSE3.identity(), [camera_at([-b, 0, 0]), camera_at([b, 0, 0])]))


@pytest.fixture(scope="module")
def small_seq():
    return make_sequence(preset("slanted", 16, 40, seed=3))


def abs_rel(d, gt):
    return float(np.mean(np.abs(d - gt) / gt))


def test_init_strategies(small_seq):
    st = init_state(small_seq)
    assert np.all(st.depth == 1.0)
    assert all(np.array_equal(p.matrix, np.eye(4)) for p in st.poses)
    assert np.all(st.masks == 0.5)
    st = init_state(small_seq, "perturbed", scale=2.0)
    assert np.allclose(st.depth, 2 * small_seq.depth_gt, rtol=1e-14)
    st = init_state(small_seq, "ground_truth")
    assert np.allclose(st.depth, small_seq.depth_gt, rtol=1e-14)
    with pytest.raises(ValueError):
        init_state(small_seq, "random")


@pytest.mark.parametrize("kwargs", [dict(init="nope"), dict(stage1_fraction=1.5), dict(lr=0.0),
                                    dict(levels=0), dict(max_steps=-1)])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        OptimConfig(**kwargs)


def test_ground_truth_is_a_fixed_point():
    seq = shift_scene()
    res = optimize(seq, OptimConfig(init="ground_truth", max_steps=100))
    trace = np.array(res.trace)
    assert len(trace) == 100 and not res.aborted
    assert trace[:, DATA_TERMS].max() < 1e-6
    assert np.abs(res.raw_depth / seq.depth_gt - 1).max() < 1e-3


def test_optimize_is_deterministic(small_seq):
    cfg = OptimConfig(init="perturbed", max_steps=40, stage1_fraction=0.5, optimize_poses=True)
    a, b = optimize(small_seq, cfg), optimize(small_seq, cfg)
    assert np.array_equal(np.array(a.trace), np.array(b.trace))
    assert np.array_equal(a.depth, b.depth) and np.array_equal(a.normals, b.normals)
    assert np.array_equal(a.state.twists, b.state.twists)


def test_frozen_and_free_variables(small_seq):
    res = optimize(small_seq, OptimConfig(init="perturbed", max_steps=5, optimize_masks=False))
    assert np.all(res.masks == 0.5)
    assert all(np.allclose(p.matrix, q.matrix, atol=1e-12) for p, q in zip(res.poses, small_seq.poses))
    res = optimize(small_seq, OptimConfig(init="perturbed", max_steps=5, optimize_poses=True))
    assert not np.allclose(res.state.twists, 0)


def test_trace_csv(tmp_path, small_seq):
    res = optimize(small_seq, OptimConfig(max_steps=3))
    res.write_trace(tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == ",".join(["step", *TERM_NAMES, "total"])
    assert len(lines) == 4 and lines[1].startswith("0,")
    row = np.array(res.trace[2][1:], dtype=float)
    assert np.array_equal(np.array(lines[3].split(",")[1:], dtype=float), row)


def test_non_finite_input_aborts(small_seq):
    frames = [f.copy() for f in small_seq.frames]
    frames[1][3, 4] = np.nan
    seq = type(small_seq)(frames, small_seq.poses, small_seq.K, small_seq.depth_gt, small_seq.normal_gt)
    res = optimize(seq, OptimConfig(max_steps=10))
    assert res.aborted and "step 0" in res.diagnostic
    assert res.trace == [] and np.all(np.isfinite(res.raw_depth))


def _moving_average(x, n=100):
    c = np.cumsum(np.insert(x, 0, 0.0))
    return (c[n:] - c[:-n]) / n


@pytest.mark.slow
def test_moving_average_trend_is_non_increasing():
    """Per stage, since stage 2 adds terms and the total jumps at the boundary."""
    seq = make_sequence(preset("slanted", 32, 104, seed=0))
    cfg = OptimConfig(init="perturbed", max_steps=600, stage1_fraction=0.5)
    trace = np.array(optimize(seq, cfg).trace)
    for stage in (trace[:300, -1], trace[300:, -1]):
        ma = _moving_average(stage)
        assert np.all(ma <= 1.05 * np.minimum.accumulate(ma))


@pytest.mark.slow
def test_fronto_parallel_from_constant_depth():
    seq = make_sequence(preset("fronto", 32, 104, seed=0))
    d0 = 2 * float(np.median(seq.depth_gt))
    res = optimize(seq, OptimConfig(init="constant", init_depth=d0))
    assert abs_rel(res.depth, seq.depth_gt) < 0.02


@pytest.mark.slow
def test_coarse_to_fine_beats_single_scale():
    seq = make_sequence(preset("slanted", 32, 104, seed=0))
    multi = optimize(seq, OptimConfig(init="perturbed", seed=0))
    single = optimize(seq, OptimConfig(init="perturbed", seed=0, levels=1))
    assert abs_rel(multi.depth, seq.depth_gt) < abs_rel(single.depth, seq.depth_gt)
