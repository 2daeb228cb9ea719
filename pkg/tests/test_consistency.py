import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mirrordepth.consistency import (
    continuity_pairs,
    lower_median,
    reproject_depth,
    sequence_consistency,
    temporal_inconsistency,
    write_continuity_csv,
    write_sequence_csv,
)
from mirrordepth.data import BBox, DepthMap, Intrinsics, Pose
from mirrordepth.metrics import EmptyMaskError
from mirrordepth.synth import dolly_scene, forward_scene, make_sequence

K = Intrinsics(32.0, 32.0, 16.0, 16.0)


def rot(axis, angle):
    c, s = math.cos(angle), math.sin(angle)
    i, j = [(1, 2), (0, 2), (0, 1)][axis]
    r = np.eye(3)
    r[i, i] = r[j, j] = c
    r[i, j], r[j, i] = -s, s
    return r


def splat_oracle(d, pose, k):
    """Per-pixel loop: each source pixel's square, mapped into the reference
    camera, covers the pixel centres in its half-open bounding box; the
    nearest depth wins."""
    h, w = d.shape
    inv_r = pose.rotation.T
    inv_t = -inv_r @ pose.translation

    def to_ref(u, v, z):
        q = inv_r @ np.array([(u - k.cx) / k.fx * z, (v - k.cy) / k.fy * z, z]) + inv_t
        return q[0] / q[2] * k.fx + k.cx, q[1] / q[2] * k.fy + k.cy, q[2]

    best = {}
    for v in range(h):
        for u in range(w):
            if not d.valid[v, u]:
                continue
            z = float(d.depth[v, u])
            corners = [to_ref(u + du, v + dv, z) for du in (-0.5, 0.5) for dv in (-0.5, 0.5)]
            zc = to_ref(u, v, z)[2]
            if zc <= 0 or min(c[2] for c in corners) <= 0:
                continue
            xs = [c[0] for c in corners]
            ys = [c[1] for c in corners]
            for r in range(max(0, math.ceil(min(ys))), min(h, math.ceil(max(ys)))):
                for c in range(max(0, math.ceil(min(xs))), min(w, math.ceil(max(xs)))):
                    if zc < best.get((r, c), np.inf):
                        best[(r, c)] = zc
    return best


def test_plane_translated_forward():
    d = DepthMap(np.full((32, 32), 10.0, np.float32))
    out = reproject_depth(d, Pose(np.eye(3), np.array([0.0, 0.0, 1.0])), K)
    # X_next = X_ref + t, so the reference camera is 1 m further from the plane
    assert out.valid.any()
    np.testing.assert_allclose(out.depth[out.valid], 9.0, atol=1e-4)


def test_magnification_leaves_no_holes():
    # a near square in front of a far plane; the reference camera is closer
    depth = np.full((32, 32), 12.0, np.float32)
    depth[10:22, 10:22] = 4.0
    out = reproject_depth(DepthMap(depth), Pose(np.eye(3), np.array([0.0, 0.0, 1.0])), K)
    assert out.valid[2:30, 2:30].all()
    # the square grows by 4/3 about the centre; no far depth shows through it
    assert np.all(out.depth[9:23, 9:23] == 3.0)


def test_round_trip_on_plane():
    d = DepthMap(np.full((32, 32), 10.0, np.float32))
    pose = Pose(rot(1, 0.05), np.array([0.3, -0.2, 0.5]))
    back = reproject_depth(reproject_depth(d, pose, K), pose.inverse(), K)
    assert back.valid[8:24, 8:24].all()
    np.testing.assert_allclose(back.depth[back.valid], 10.0, rtol=2e-3)


def test_identity_reprojection_is_exact(rng):
    d = DepthMap(rng.uniform(1, 30, (20, 24)).astype(np.float32), rng.uniform(size=(20, 24)) > 0.2)
    out = reproject_depth(d, Pose.identity(), Intrinsics(24.0, 24.0, 12.0, 10.0))
    assert np.array_equal(out.valid, d.valid)
    assert np.array_equal(out.depth[out.valid], d.depth[d.valid])


@settings(max_examples=25)
@given(axis=st.integers(0, 2), angle=st.floats(-0.15, 0.15), seed=st.integers(0, 2**16))
def test_rotation_matches_loop_oracle(axis, angle, seed):
    r = np.random.default_rng(seed)
    d = DepthMap(r.uniform(2, 20, (12, 12)).astype(np.float32))
    k = Intrinsics(12.0, 12.0, 6.0, 6.0)
    pose = Pose(rot(axis, angle), r.uniform(-0.2, 0.2, 3))
    out = reproject_depth(d, pose, k)
    best = splat_oracle(d, pose, k)
    expect = np.zeros((12, 12), bool)
    for (row, col), z in best.items():
        expect[row, col] = True
        assert abs(float(out.depth[row, col]) - z) <= 1e-4
    assert np.array_equal(out.valid, expect)


def test_inconsistency_values():
    a = DepthMap(np.array([[3.0, 1.0]]))
    b = DepthMap(np.array([[1.0, 1.0]]))
    m, mean = temporal_inconsistency(a, b)
    assert m.tolist() == [[0.5, 0.0]] and mean == 0.25
    m, _ = temporal_inconsistency(a, DepthMap(np.array([[1.0, 0.0]])))
    assert m[0, 0] == 0.5 and math.isnan(m[0, 1])
    with pytest.raises(EmptyMaskError):
        temporal_inconsistency(a, DepthMap(np.zeros((1, 2))))
    with pytest.raises(ValueError):
        temporal_inconsistency(a, DepthMap(np.ones((2, 1))))


@given(x=st.floats(1e-3, 1e3), y=st.floats(1e-3, 1e3))
def test_inconsistency_symmetric_and_bounded(x, y):
    a, b = DepthMap(np.array([[x]])), DepthMap(np.array([[y]]))
    _, ab = temporal_inconsistency(a, b)
    _, ba = temporal_inconsistency(b, a)
    assert ab == ba and 0.0 <= ab < 1.0


def _gt(frame):
    return frame.depth


def test_ground_truth_is_consistent_on_dolly():
    frames = make_sequence(dolly_scene(size=64))
    rows = sequence_consistency(_gt, frames, window=2)
    assert len(rows) == 2 + 3 + 4 + 3 + 2
    assert all(r.incons_model == 0.0 and r.incons_gt == 0.0 for r in rows)
    assert all(math.isnan(r.incons_random) for r in rows)


def test_ground_truth_forward_motion():
    # residual error is sub-pixel aliasing along object edges, so its share
    # shrinks with resolution
    rows = sequence_consistency(_gt, make_sequence(forward_scene(size=256)), window=1)
    assert np.mean([r.incons_gt for r in rows]) <= 1e-3
    coarse = sequence_consistency(_gt, make_sequence(forward_scene(size=64)), window=1)
    assert np.mean([r.incons_gt for r in rows]) < np.mean([r.incons_gt for r in coarse]) < 5e-3


def test_window_handling():
    frames = make_sequence(dolly_scene(size=32, n_frames=3))
    assert sequence_consistency(_gt, frames, window=0) == []
    with pytest.raises(ValueError):
        sequence_consistency(_gt, frames, window=-1)
    with pytest.raises(ValueError):
        sequence_consistency(_gt, frames[:1], window=1)
    pairs = [(r.frame, r.neighbor) for r in sequence_consistency(_gt, frames, window=5)]
    assert pairs == [(0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1)]


def test_noisy_baseline_is_less_consistent():
    frames = make_sequence(dolly_scene(size=32))
    rng = np.random.default_rng(0)
    noise = {f.frame_id: rng.uniform(0.3, 3.0, f.size) for f in frames}

    def noisy(frame):
        return DepthMap(frame.depth.depth * noise[frame.frame_id])

    rows = sequence_consistency(_gt, frames, window=1, random_model=noisy)
    assert all(r.incons_random >= r.incons_gt for r in rows)


def test_pairs_without_overlap_score_nan(caplog):
    frames = make_sequence(dolly_scene(size=32, n_frames=2))

    def tiny(frame):  # so close that the dolly step moves every point out of view
        return DepthMap(np.full(frame.size, 0.01, np.float32))

    rows = sequence_consistency(tiny, frames, window=1, random_model=_gt)
    assert all(math.isnan(r.incons_model) and math.isnan(r.incons_gt) for r in rows)
    assert all(r.incons_random == 0.0 for r in rows)
    assert "no co-visible pixels" in caplog.text


def test_lower_median():
    assert lower_median(np.array([3.0, 1.0, 2.0])) == 2.0
    assert lower_median(np.array([4.0, 1.0, 3.0, 2.0])) == 2.0
    with pytest.raises(EmptyMaskError):
        lower_median(np.array([]))


@given(seed=st.integers(0, 2**16), n=st.integers(1, 41).filter(lambda n: n % 2 == 1))
def test_odd_median_matches_numpy(seed, n):
    v = np.random.default_rng(seed).uniform(0, 10, n)
    assert lower_median(v) == np.median(v)


def test_box_medians_equal_scene_depths():
    spec = dolly_scene(size=64)
    frames = make_sequence(spec)
    groups, skipped = continuity_pairs(_gt, frames)
    assert skipped == 0
    want = {o.class_label: o.distance for o in spec.objects}
    for cls, pairs in groups.items():
        assert len(pairs) == len(frames)
        assert all(med == want[cls] for med, _ in pairs)


def test_continuity_order_invariant_and_skips(caplog):
    frames = make_sequence(dolly_scene(size=32, n_frames=2))
    boxes = [b for f in frames for b in f.boxes]
    a, _ = continuity_pairs(_gt, frames, boxes)
    b, _ = continuity_pairs(_gt, frames, boxes[::-1])
    assert a == b
    empty = BBox(0, "car", 100, 100, 110, 110, 1.5)
    _, skipped = continuity_pairs(_gt, frames, boxes + [empty])
    assert skipped == 1 and "skipped 1" in caplog.text
    with pytest.raises(ValueError):
        continuity_pairs(_gt, frames, [BBox(9, "car", 0, 0, 1, 1, 1.5)])


def test_csv_round_trip(tmp_path):
    frames = make_sequence(forward_scene(size=32))
    rows = sequence_consistency(_gt, frames, window=1)
    write_sequence_csv(rows, tmp_path / "s.csv")
    with open(tmp_path / "s.csv") as f:
        back = list(csv.DictReader(f))
    assert [(int(r["frame"]), int(r["neighbor"]), float(r["incons_gt"])) for r in back] == \
        [(r.frame, r.neighbor, r.incons_gt) for r in rows]
    groups, _ = continuity_pairs(_gt, frames)
    write_continuity_csv(groups, tmp_path / "c.csv")
    with open(tmp_path / "c.csv") as f:
        back = list(csv.DictReader(f))
    assert [(r["class"], float(r["median_depth"]), float(r["object_height"])) for r in back] == \
        [(c, m, h) for c, ps in groups.items() for m, h in ps]
