import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bevdistill.decoder import COS, SIN, box_to_anchor
from bevdistill.geometry import Pose
from bevdistill.metrics import EvalConfig, evaluate
from bevdistill.scene import Frame, GtBox, generate_scene
from bevdistill.tracker import (
    FrameDetections,
    InstanceMemory,
    TrackOutput,
    TrackRecord,
    gt_tracks,
    propagate,
    propagate_anchors,
    read_tracks,
    track_with_stub,
    update_ids,
    write_tracks,
)


def memory_with(anchors, pose=None, ts=0.0, ids=None):
    anchors = np.atleast_2d(np.asarray(anchors, dtype=np.float64))
    n = len(anchors)
    feats = np.random.default_rng(0).normal(size=(n, 4))
    return InstanceMemory(anchors, feats, np.arange(n) if ids is None else np.asarray(ids), np.ones(n), pose or Pose.identity(), ts, n)


def test_velocity_step_with_stationary_ego():
    a = box_to_anchor([3.0, 1.0, 0.5], (1, 2, 1), 0.3, (1.0, 0.0, 0.0))
    out, feats, ids = propagate(memory_with(a), Pose.identity(), 0.5)
    np.testing.assert_allclose(out[0, :3], [3.5, 1.0, 0.5], atol=1e-15)
    np.testing.assert_array_equal(out[0, 3:], a[3:])


def test_ego_advance_moves_static_object_back():
    a = box_to_anchor([10.0, 2.0, 0.5], (1, 2, 1), 0.3)
    mem = memory_with(a)
    new = Pose.from_yaw(0.0, (2.0, 0.0, 0.0))
    out, _, _ = propagate(mem, new, 0.5)
    np.testing.assert_allclose(out[0, :3], [8.0, 2.0, 0.5], atol=1e-12)
    assert np.max(np.abs(new.apply(out[0, :3]) - mem.ego_pose.apply(a[:3]))) < 1e-9


def test_identity_motion_leaves_query_unchanged():
    a = box_to_anchor([4.0, -2.0, 0.5], (1, 2, 1), -1.1)
    mem = memory_with(a)
    out, feats, ids = propagate(mem, Pose.identity(), 0.5)
    assert out.tobytes() == mem.anchors.tobytes()
    assert feats.tobytes() == mem.features.tobytes() and feats is not mem.features
    np.testing.assert_array_equal(ids, mem.ids)


def test_nonpositive_dt_rejected():
    with pytest.raises(ValueError):
        propagate(memory_with(np.zeros(11)), Pose.identity(), 0.0)
    with pytest.raises(ValueError):
        propagate_anchors(np.zeros((1, 11)), Pose.identity(), -1.0)


@given(st.floats(-np.pi, np.pi), st.floats(-np.pi, np.pi), st.floats(-20, 20), st.floats(-20, 20))
def test_propagation_preserves_global_state(yaw_ego, yaw_box, tx, ty):
    prev = Pose.from_yaw(0.2, (1.0, -3.0, 0.0))
    new = Pose.from_yaw(yaw_ego, (tx, ty, 0.0))
    a = box_to_anchor([5.0, 1.0, 0.7], (1, 2, 1), yaw_box, (0.0, 0.0, 0.0))
    out, _, _ = propagate(memory_with(a, prev), new, 0.5)
    assert np.max(np.abs(new.apply(out[0, :3]) - prev.apply(a[:3]))) < 1e-9
    g_prev = np.arctan2(a[SIN], a[COS]) + prev.yaw
    g_new = np.arctan2(out[0, SIN], out[0, COS]) + new.yaw
    assert abs(np.angle(np.exp(1j * (g_prev - g_new)))) < 1e-9


def test_constant_velocity_objects_propagate_exactly():
    s = generate_scene(7, n_frames=6, n_objects=3)
    cv = [t.track_id for t in s.tracks if t.motion == "cv"]
    assert cv
    for f0, f1 in zip(s.frames[:-1], s.frames[1:]):
        for tid in cv:
            b0, b1 = f0.box(tid), f1.box(tid)
            a = box_to_anchor(b0.center, b0.size, b0.yaw, b0.velocity)
            out, _, _ = propagate(memory_with(a, f0.ego_pose, f0.timestamp), f1.ego_pose, f1.timestamp - f0.timestamp)
            assert np.max(np.abs(out[0, :3] - b1.center)) < 1e-9
            np.testing.assert_allclose(out[0, 8:], b1.velocity, atol=1e-9)


def test_augmentation_conjugation_keeps_motion_rigid():
    a_mat = Pose.from_yaw(0.4).rotation * 1.05
    prev, new = Pose.from_yaw(0.1, (0, 0, 0)), Pose.from_yaw(0.15, (2.0, 0.1, 0))
    anchor = box_to_anchor([6.0, 1.0, 0.5], (1, 2, 1), 0.0)
    plain, _, _ = propagate(memory_with(anchor, prev), new, 0.5)
    aug_anchor = anchor.copy()
    aug_anchor[:3] = a_mat @ anchor[:3]
    aug, _, _ = propagate(memory_with(aug_anchor, prev), new, 0.5, ego_transform=a_mat)
    np.testing.assert_allclose(aug[0, :3], a_mat @ plain[0, :3], atol=1e-9)


# --- IDs ---------------------------------------------------------------------------


def scripted_run(confidences, n_temporal=4):
    """One object followed by a single query; ``confidences`` is its score per frame."""
    memory = InstanceMemory.empty(4)
    emitted = []
    for k, c in enumerate(confidences):
        if len(memory):
            anchors, feats, ids = propagate(memory, Pose.identity(), 0.5)
        else:
            anchors, feats, ids = np.zeros((1, 11)), np.zeros((1, 4)), np.array([-1])
        det = FrameDetections(anchors, feats, np.array([c]), np.array([0]), ids)
        recs, memory = update_ids(det, memory, k, Pose.identity(), 0.5 * k, tau=0.4, n_temporal=n_temporal)
        emitted.append([r.track_id for r in recs])
        assert len(memory) <= n_temporal
    return emitted


def test_persistent_id_over_five_frames():
    assert scripted_run([0.9] * 5) == [[0]] * 5


def test_low_confidence_gap_keeps_id():
    assert scripted_run([0.9, 0.9, 0.2, 0.9, 0.9]) == [[0], [0], [], [0], [0]]


def test_fresh_ids_increase_by_confidence():
    det = FrameDetections(np.zeros((4, 11)), np.zeros((4, 2)), np.array([0.5, 0.95, 0.1, 0.95]), np.zeros(4, np.int64), np.full(4, -1))
    recs, mem = update_ids(det, InstanceMemory.empty(2, next_id=7), 0, Pose.identity(), 0.0, n_temporal=3)
    assert [(r.track_id, r.score) for r in recs] == [(7, 0.95), (8, 0.95), (9, 0.5)]
    assert mem.next_id == 10 and len(mem) == 3
    assert sorted(mem.ids.tolist()) == [7, 8, 9]


def test_memory_expiry_is_permanent():
    det = FrameDetections(np.zeros((3, 11)), np.zeros((3, 2)), np.array([0.9, 0.3, 0.2]), np.zeros(3, np.int64), np.array([-1, 4, 5]))
    _, mem = update_ids(det, InstanceMemory.empty(2, next_id=6), 0, Pose.identity(), 0.0, n_temporal=2)
    assert sorted(mem.ids.tolist()) == [4, 6]


def crossing_frames(n=12, dt=0.5):
    """Two cars whose paths cross at (10, 0) 1.5 s apart while the ego drives forward."""
    frames = []
    for k in range(n):
        t = k * dt
        ego = Pose.from_yaw(0.02 * t, (3.0 * t, 0.0, 0.0))
        pa = np.array([10.0, -8.0 + 4.0 * t, 0.8])
        pb = np.array([10.0 + 4.0 * (t - 3.5), 0.0, 0.8])
        boxes = []
        for tid, pos, vel, yaw in ((0, pa, (0, 4.0, 0), np.pi / 2), (1, pb, (4.0, 0, 0), 0.0)):
            inv = ego.inverse()
            boxes.append(GtBox(inv.apply(pos), (1.9, 4.5, 1.6), yaw - ego.yaw, inv.rotate(np.array(vel, float)), 0, tid, k))
        frames.append(Frame(k, t, ego, [], np.zeros((0, 3)), np.zeros(0, np.int64), boxes))
    return frames


def test_crossing_objects_keep_ids_with_noisy_stub():
    frames = crossing_frames()
    glob = [[f.ego_pose.apply(b.center) for b in f.gt_boxes] for f in frames]
    gaps = [np.linalg.norm(a[:2] - b[:2]) for a, b in glob]
    assert min(gaps) > 2.5  # they pass the crossing point at different times
    for seed in range(5):
        tracks = track_with_stub(frames, sigma=0.2, seed=seed)
        per_gt = {}
        for f in frames:
            for r in tracks.frames[f.index]:
                gt = min(f.gt_boxes, key=lambda b: np.linalg.norm(b.center - r.center))
                per_gt.setdefault(gt.track_id, set()).add(r.track_id)
        assert all(len(v) == 1 for v in per_gt.values())
        assert evaluate(tracks, frames).tracking.ids == 0


def test_stub_on_generated_scene_has_no_switches():
    s = generate_scene(1, n_frames=8, n_objects=3)
    rep = evaluate(track_with_stub(s.frames, 0.2, seed=3), s.frames, EvalConfig())
    assert rep.tracking.ids == 0 and rep.tracking.amota > 0.99


def test_ids_unique_per_frame():
    out = TrackOutput()
    with pytest.raises(ValueError):
        out.add(0, [TrackRecord(0, 1, 0, 0.9, np.zeros(11)), TrackRecord(0, 1, 0, 0.8, np.zeros(11))])
    with pytest.raises(ValueError):
        out.add(0, [TrackRecord(0, -1, 0, 0.9, np.zeros(11))])


def test_track_file_round_trip(tmp_path):
    s = generate_scene(2, n_frames=3, n_objects=2)
    tracks = gt_tracks(s.frames)
    tracks.frames[5] = []
    write_tracks(tmp_path / "t.txt", tracks)
    back = read_tracks(tmp_path / "t.txt")
    assert sorted(back.frames) == sorted(tracks.frames)
    for a, b in zip(tracks.records(), back.records()):
        assert (a.frame, a.track_id, a.class_id, a.score) == (b.frame, b.track_id, b.class_id, b.score)
        assert a.anchor.tobytes() == b.anchor.tobytes()
    (tmp_path / "bad.txt").write_text("0 1 2\n")
    with pytest.raises(ValueError):
        read_tracks(tmp_path / "bad.txt")
