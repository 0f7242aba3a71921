"""Query-propagation tracking: temporal instance memory and persistent IDs.

After each frame the most confident final queries are kept (anchors,
features, IDs). Before the next frame they are moved forward by their own
velocity estimate and re-expressed in the new ego frame; the decoder then
treats them as extra queries. A propagated query that is confident again keeps
its ID, a confident query born this frame gets the next fresh ID.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .decoder import ANCHOR_DIM, COS, SIN, VX, VZ, DecodeResult, anchor_to_box, box_to_anchor
from .geometry import Pose
from .numerics import _stable_sigmoid


@dataclass
class InstanceMemory:
    anchors: np.ndarray  # P × 11 in the ego frame of ``ego_pose``
    features: np.ndarray  # P × C
    ids: np.ndarray  # P, -1 for queries that never produced a confident output
    confidence: np.ndarray  # P
    ego_pose: Pose  # global-from-ego of the frame the memory was written in
    timestamp: float
    next_id: int = 0

    def __len__(self) -> int:
        return len(self.anchors)

    @classmethod
    def empty(cls, channels: int, ego_pose: Pose | None = None, timestamp: float = 0.0, next_id: int = 0) -> "InstanceMemory":
        return cls(
            np.zeros((0, ANCHOR_DIM)),
            np.zeros((0, channels)),
            np.zeros(0, dtype=np.int64),
            np.zeros(0),
            ego_pose or Pose.identity(),
            timestamp,
            next_id,
        )


@dataclass
class FrameDetections:
    """Final-layer queries of one frame in plain arrays."""

    anchors: np.ndarray  # Q × 11
    features: np.ndarray  # Q × C
    confidence: np.ndarray  # Q
    class_id: np.ndarray  # Q
    query_ids: np.ndarray  # Q, internal id for propagated queries, -1 for new ones

    @classmethod
    def from_decode(cls, result: DecodeResult) -> "FrameDetections":
        probs = _stable_sigmoid(result.final.cls_logits.data)
        return cls(
            result.final.anchors.data.copy(),
            result.features.data.copy(),
            probs.max(axis=1),
            probs.argmax(axis=1).astype(np.int64),
            result.query_ids.copy(),
        )


@dataclass
class TrackRecord:
    frame: int
    track_id: int
    class_id: int
    score: float
    anchor: np.ndarray  # 11

    def to_line(self) -> str:
        vals = " ".join(repr(float(x)) for x in self.anchor)
        return f"{self.frame} {self.track_id} {self.class_id} {float(self.score)!r} {vals}"

    @classmethod
    def from_line(cls, line: str) -> "TrackRecord":
        parts = line.split()
        if len(parts) != 4 + ANCHOR_DIM:
            raise ValueError(f"track record needs {4 + ANCHOR_DIM} fields, got {len(parts)}")
        return cls(int(parts[0]), int(parts[1]), int(parts[2]), float(parts[3]), np.array([float(x) for x in parts[4:]]))

    @property
    def center(self) -> np.ndarray:
        return self.anchor[:3]


@dataclass
class TrackOutput:
    frames: dict[int, list[TrackRecord]] = field(default_factory=dict)

    def add(self, frame: int, records: list[TrackRecord]) -> None:
        ids = [r.track_id for r in records]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate track id in frame {frame}")
        if any(i < 0 for i in ids):
            raise ValueError("track ids must be non-negative")
        self.frames[frame] = records

    def records(self) -> Iterable[TrackRecord]:
        for k in sorted(self.frames):
            yield from self.frames[k]


def write_tracks(path: str | Path, tracks: TrackOutput) -> None:
    lines = ["# frame track_id class score x y z log_w log_h log_l sin_yaw cos_yaw vx vy vz"]
    frames = sorted(tracks.frames)
    lines.append("# frames " + " ".join(str(f) for f in frames))
    lines += [r.to_line() for r in tracks.records()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_tracks(path: str | Path) -> TrackOutput:
    out = TrackOutput()
    for line in Path(path).read_text().splitlines():
        if line.startswith("# frames"):
            for f in line.split()[2:]:
                out.frames.setdefault(int(f), [])
            continue
        if not line.strip() or line.startswith("#"):
            continue
        r = TrackRecord.from_line(line)
        out.frames.setdefault(r.frame, []).append(r)
    return out


# ---------------------------------------------------------------------------
# propagation


def ego_motion(prev_pose: Pose, new_pose: Pose, ego_transform: np.ndarray | None = None) -> Pose:
    """Pose mapping previous-ego coordinates into the current ego frame.

    ``ego_transform`` is the BEV augmentation applied to both frames; conjugating
    by a rotation/scale/flip keeps the motion rigid.
    """
    t = new_pose.inverse().compose(prev_pose)
    if ego_transform is None:
        return t
    a = np.asarray(ego_transform, dtype=np.float64)
    ainv = np.linalg.inv(a)
    return Pose(a @ t.rotation @ ainv, a @ t.translation)


def propagate_anchors(anchors: np.ndarray, motion: Pose, dt: float) -> np.ndarray:
    """Advance anchors by ``v·dt`` in the old frame, then map them through ``motion``."""
    if not dt > 0:
        raise ValueError(f"propagation needs dt > 0, got {dt}")
    a = np.array(anchors, dtype=np.float64, copy=True).reshape(-1, ANCHOR_DIM)
    centers = a[:, :3] + a[:, VX : VZ + 1] * dt
    a[:, :3] = motion.apply(centers)
    a[:, VX : VZ + 1] = motion.rotate(a[:, VX : VZ + 1])
    r = motion.rotation
    # yaw vector (cos, sin) lives in the ground plane
    c, s = a[:, COS].copy(), a[:, SIN].copy()
    a[:, COS] = r[0, 0] * c + r[0, 1] * s
    a[:, SIN] = r[1, 0] * c + r[1, 1] * s
    return a


def propagate(memory: InstanceMemory, new_pose: Pose, dt: float, ego_transform: np.ndarray | None = None):
    """(anchors, features, ids) of the memory carried into the new ego frame.

    Features are copied unchanged; the decoder re-encodes the propagated
    anchors with its current anchor encoder.
    """
    if not dt > 0:
        raise ValueError(f"propagation needs dt > 0, got {dt}")
    anchors = propagate_anchors(memory.anchors, ego_motion(memory.ego_pose, new_pose, ego_transform), dt)
    return anchors, memory.features.copy(), memory.ids.copy()


# ---------------------------------------------------------------------------
# ID management


def update_ids(
    det: FrameDetections,
    memory: InstanceMemory,
    frame: int,
    ego_pose: Pose,
    timestamp: float,
    tau: float = 0.4,
    n_temporal: int = 16,
) -> tuple[list[TrackRecord], InstanceMemory]:
    """Emit confident detections with persistent IDs and build the next memory.

    Confident propagated queries keep their ID; confident new queries get fresh
    IDs in order of decreasing confidence (ties by query index). The next
    memory holds the ``n_temporal`` most confident queries, confident or not;
    queries that miss the cut are dropped for good.
    """
    q = len(det.confidence)
    ids = np.array(det.query_ids, dtype=np.int64, copy=True)
    next_id = memory.next_id
    order = np.lexsort((np.arange(q), -det.confidence))
    records = []
    for i in order:
        if det.confidence[i] < tau:
            continue
        if ids[i] < 0:
            ids[i] = next_id
            next_id += 1
        records.append(TrackRecord(frame, int(ids[i]), int(det.class_id[i]), float(det.confidence[i]), det.anchors[i].copy()))
    keep = np.sort(order[: min(n_temporal, q)])
    new_memory = InstanceMemory(
        det.anchors[keep].copy(),
        det.features[keep].copy(),
        ids[keep],
        det.confidence[keep].copy(),
        ego_pose,
        timestamp,
        next_id,
    )
    return records, new_memory


# ---------------------------------------------------------------------------
# GT-plus-noise detection stub


class StubDetector:
    """Stands in for the decoder: GT boxes plus Gaussian centre noise.

    Propagated queries claim the nearest unclaimed GT (global greedy on
    distance, within ``gate`` metres) and keep their identity; unclaimed GTs
    appear as new queries. Every detection has confidence 1; unmatched
    propagated queries are reported with confidence 0.
    """

    def __init__(self, sigma: float = 0.2, seed: int = 0, gate: float = 2.0, channels: int = 4):
        self.sigma = sigma
        self.gate = gate
        self.channels = channels
        self.rng = np.random.default_rng(seed)

    def detect(self, boxes, propagated: tuple[np.ndarray, np.ndarray, np.ndarray] | None) -> FrameDetections:
        gts = [box_to_anchor(b.center, b.size, b.yaw, b.velocity) for b in boxes]
        gt_cls = [b.class_id for b in boxes]
        noisy = []
        for a in gts:
            a = a.copy()
            a[:2] += self.rng.normal(scale=self.sigma, size=2)
            noisy.append(a)
        pa, pf, pids = propagated if propagated is not None else (np.zeros((0, ANCHOR_DIM)), np.zeros((0, self.channels)), np.zeros(0, np.int64))
        claimed: dict[int, int] = {}
        if len(pa) and gts:
            d = np.linalg.norm(pa[:, None, :2] - np.array(noisy)[None, :, :2], axis=2)
            pairs = sorted((d[i, j], i, j) for i in range(len(pa)) for j in range(len(gts)) if d[i, j] <= self.gate)
            used_p, used_g = set(), set()
            for _, i, j in pairs:
                if i in used_p or j in used_g:
                    continue
                used_p.add(i)
                used_g.add(j)
                claimed[i] = j
        anchors, feats, conf, cls, qids = [], [], [], [], []
        for i in range(len(pa)):
            if i in claimed:
                j = claimed[i]
                anchors.append(noisy[j])
                conf.append(1.0)
                cls.append(gt_cls[j])
            else:
                anchors.append(pa[i])
                conf.append(0.0)
                cls.append(0)
            feats.append(pf[i])
            qids.append(pids[i])
        for j in range(len(gts)):
            if j in claimed.values():
                continue
            anchors.append(noisy[j])
            feats.append(np.zeros(self.channels))
            conf.append(1.0)
            cls.append(gt_cls[j])
            qids.append(-1)
        if not anchors:
            return FrameDetections(np.zeros((0, ANCHOR_DIM)), np.zeros((0, self.channels)), np.zeros(0), np.zeros(0, np.int64), np.zeros(0, np.int64))
        return FrameDetections(np.array(anchors), np.array(feats), np.array(conf), np.array(cls, dtype=np.int64), np.array(qids, dtype=np.int64))


def track_with_stub(frames: Sequence, sigma: float = 0.2, seed: int = 0, tau: float = 0.4, n_temporal: int = 16) -> TrackOutput:
    """Run propagation + ID management over ``frames`` with the stub detector."""
    stub = StubDetector(sigma, seed)
    out = TrackOutput()
    memory = None
    for f in frames:
        prop = None
        if memory is not None and len(memory):
            prop = propagate(memory, f.ego_pose, f.timestamp - memory.timestamp)
        det = stub.detect(f.gt_boxes, prop)
        base = memory if memory is not None else InstanceMemory.empty(stub.channels)
        records, memory = update_ids(det, base, f.index, f.ego_pose, f.timestamp, tau, n_temporal)
        out.add(f.index, records)
    return out


def gt_tracks(frames: Sequence) -> TrackOutput:
    """Ground truth as a perfect tracker output (score 1, track id = GT id)."""
    out = TrackOutput()
    for f in frames:
        out.add(
            f.index,
            [TrackRecord(f.index, b.track_id, b.class_id, 1.0, box_to_anchor(b.center, b.size, b.yaw, b.velocity)) for b in f.gt_boxes],
        )
    return out


def record_box(r: TrackRecord):
    return anchor_to_box(r.anchor)
