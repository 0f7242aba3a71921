"""Detection and tracking metrics with centre-distance matching.

Detection follows the usual driving-benchmark recipe: per class and distance
threshold, predictions in descending score order greedily claim the nearest
unclaimed GT on the ground plane; AP is the area under the interpolated
precision/recall curve above the recall and precision floors. True-positive
errors (translation, scale, orientation, velocity) are taken at the 2 m
threshold and the composite score is ``(5·mAP + Σ (1 - min(1, err))) / 9``.
Attribute error is not computed (no attributes in the synthetic data).

Tracking accumulates MOT events per frame (continuity-preserving matching,
then Hungarian on centre distance) at score thresholds chosen to hit a grid
of recall values, and averages MOTAR and MOTP over that grid.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .decoder import anchor_to_box
from .geometry import wrap_angle
from .losses import hungarian
from .scene import CLASS_NAMES
from .tracker import TrackOutput, TrackRecord


@dataclass
class EvalConfig:
    dist_thresholds: tuple[float, ...] = (0.5, 1.0, 2.0, 4.0)
    tp_threshold: float = 2.0
    track_threshold: float = 2.0
    n_recall_points: int = 40
    min_recall: float = 0.1
    min_precision: float = 0.1
    n_interp: int = 101
    class_names: tuple[str, ...] = CLASS_NAMES

    def __post_init__(self):
        th = list(self.dist_thresholds)
        if any(t <= 0 for t in th) or th != sorted(th):
            raise ValueError("distance thresholds must be positive and ascending")


@dataclass
class Box:
    """Flat box used by the evaluator (ego frame of its frame)."""

    frame: int
    center: np.ndarray
    size: np.ndarray  # w, l, h
    yaw: float
    velocity: np.ndarray
    class_id: int
    track_id: int = -1
    score: float = 1.0

    @classmethod
    def from_record(cls, r: TrackRecord) -> "Box":
        c, s, y, v = anchor_to_box(r.anchor)
        return cls(r.frame, c, s, y, v, r.class_id, r.track_id, r.score)

    @classmethod
    def from_gt(cls, b) -> "Box":
        return cls(b.frame, np.asarray(b.center), np.asarray(b.size), float(b.yaw), np.asarray(b.velocity), b.class_id, b.track_id, 1.0)


def gt_boxes_of(frames) -> list[Box]:
    return [Box.from_gt(b) for f in frames for b in f.gt_boxes]


def pred_boxes_of(tracks: TrackOutput) -> list[Box]:
    return [Box.from_record(r) for r in tracks.records()]


# ---------------------------------------------------------------------------
# detection


def center_distance(a: Box, b: Box) -> float:
    return float(np.hypot(a.center[0] - b.center[0], a.center[1] - b.center[1]))


def scale_iou(a: Box, b: Box) -> float:
    """IoU of the two boxes after aligning centres and headings."""
    inter = np.prod(np.minimum(a.size, b.size))
    return float(inter / (np.prod(a.size) + np.prod(b.size) - inter))


def score_order(preds: Sequence[Box]) -> np.ndarray:
    """Descending score, ties broken by ascending input index."""
    scores = np.array([p.score for p in preds])
    return np.lexsort((np.arange(len(preds)), -scores)) if len(preds) else np.zeros(0, np.int64)


@dataclass
class FrameMatch:
    pred_to_gt: dict[int, int]  # prediction index -> gt index
    distances: dict[int, float]


def match_frame(preds: Sequence[Box], gts: Sequence[Box], threshold: float) -> FrameMatch:
    """Greedy score-ordered matching within one frame and class (strictly closer than ``threshold``)."""
    taken = np.zeros(len(gts), dtype=bool)
    out: dict[int, int] = {}
    dist: dict[int, float] = {}
    for i in score_order(preds):
        best, best_d = -1, np.inf
        for j, g in enumerate(gts):
            if taken[j]:
                continue
            d = center_distance(preds[i], g)
            if d < best_d:
                best, best_d = j, d
        if best >= 0 and best_d < threshold:
            taken[best] = True
            out[int(i)] = best
            dist[int(i)] = best_d
    return FrameMatch(out, dist)


@dataclass
class ClassCurve:
    recall: np.ndarray
    precision: np.ndarray
    confidence: np.ndarray
    errors: dict[str, np.ndarray]  # interpolated cumulative-mean TP errors


TP_METRICS = ("trans_err", "scale_err", "orient_err", "vel_err")


def accumulate(preds: Sequence[Box], gts: Sequence[Box], threshold: float, cfg: EvalConfig) -> ClassCurve | None:
    """Precision/recall curve of one class at one threshold (``None`` without GT)."""
    npos = len(gts)
    if npos == 0:
        return None
    n = cfg.n_interp
    rec_interp = np.linspace(0, 1, n)
    if not preds:
        return ClassCurve(rec_interp, np.zeros(n), np.zeros(n), {k: np.ones(n) for k in TP_METRICS})
    order = score_order(preds)
    gts_by_frame: dict[int, list[int]] = {}
    for j, g in enumerate(gts):
        gts_by_frame.setdefault(g.frame, []).append(j)
    taken = np.zeros(npos, dtype=bool)
    tp, fp, conf = [], [], []
    errs: dict[str, list[float]] = {k: [] for k in TP_METRICS}
    match_conf = []
    for i in order:
        p = preds[i]
        best, best_d = -1, np.inf
        for j in gts_by_frame.get(p.frame, []):
            if taken[j]:
                continue
            d = center_distance(p, gts[j])
            if d < best_d:
                best, best_d = j, d
        if best >= 0 and best_d < threshold:
            taken[best] = True
            tp.append(1)
            fp.append(0)
            g = gts[best]
            errs["trans_err"].append(best_d)
            errs["scale_err"].append(1.0 - scale_iou(p, g))
            errs["orient_err"].append(abs(float(wrap_angle(p.yaw - g.yaw))))
            errs["vel_err"].append(float(np.hypot(*(p.velocity[:2] - g.velocity[:2]))))
            match_conf.append(p.score)
        else:
            tp.append(0)
            fp.append(1)
        conf.append(p.score)
    tp_c = np.cumsum(tp).astype(np.float64)
    fp_c = np.cumsum(fp).astype(np.float64)
    conf = np.array(conf)
    prec = tp_c / (tp_c + fp_c)
    rec = tp_c / npos
    precision = np.interp(rec_interp, rec, prec, right=0)
    confidence = np.interp(rec_interp, rec, conf, right=0)
    errors = {}
    if match_conf:
        mc = np.array(match_conf)
        for k in TP_METRICS:
            cm = np.cumsum(errs[k]) / np.arange(1, len(errs[k]) + 1)
            errors[k] = np.interp(confidence[::-1], mc[::-1], cm[::-1])[::-1]
    else:
        errors = {k: np.ones(n) for k in TP_METRICS}
    return ClassCurve(rec_interp, precision, confidence, errors)


def average_precision(curve: ClassCurve, cfg: EvalConfig) -> float:
    first = int(round(100 * cfg.min_recall)) + 1
    prec = curve.precision[first:] - cfg.min_precision
    prec[prec < 0] = 0
    return float(np.clip(np.mean(prec) / (1.0 - cfg.min_precision), 0.0, 1.0))


def tp_error(curve: ClassCurve, key: str, cfg: EvalConfig) -> float:
    first = int(round(100 * cfg.min_recall)) + 1
    nz = np.flatnonzero(curve.confidence)
    if len(nz) == 0:
        return 1.0
    last = int(nz[-1])
    if last < first:
        return 1.0
    return float(np.mean(curve.errors[key][first : last + 1]))


@dataclass
class DetectionReport:
    mAP: float
    composite: float
    tp_errors: dict[str, float]
    per_class_ap: dict[str, dict[float, float]]
    per_class_tp: dict[str, dict[str, float]]
    evaluated_classes: list[str]


def detection_metrics(preds: Sequence[Box], gts: Sequence[Box], cfg: EvalConfig | None = None) -> DetectionReport:
    """mAP over classes with GT, TP errors at the TP threshold, composite score."""
    cfg = cfg or EvalConfig()
    classes = sorted({g.class_id for g in gts})
    per_ap: dict[str, dict[float, float]] = {}
    per_tp: dict[str, dict[str, float]] = {}
    for c in classes:
        name = cfg.class_names[c]
        pc = [p for p in preds if p.class_id == c]
        gc = [g for g in gts if g.class_id == c]
        per_ap[name] = {th: average_precision(accumulate(pc, gc, th, cfg), cfg) for th in cfg.dist_thresholds}
        curve = accumulate(pc, gc, cfg.tp_threshold, cfg)
        per_tp[name] = {k: tp_error(curve, k, cfg) for k in TP_METRICS}
    if not classes:
        nan = float("nan")
        return DetectionReport(nan, nan, {k: nan for k in TP_METRICS}, {}, {}, [])
    m_ap = float(np.mean([v for d in per_ap.values() for v in d.values()]))
    tp = {k: float(np.mean([per_tp[n][k] for n in per_tp])) for k in TP_METRICS}
    composite = (5 * m_ap + sum(1 - min(1.0, tp[k]) for k in TP_METRICS)) / (5 + len(TP_METRICS))
    return DetectionReport(m_ap, composite, tp, per_ap, per_tp, [cfg.class_names[c] for c in classes])


# ---------------------------------------------------------------------------
# tracking


@dataclass
class MotCounts:
    n_gt: int = 0
    matches: int = 0  # correspondences that kept their hypothesis
    switches: int = 0
    misses: int = 0
    false_positives: int = 0
    distance_sum: float = 0.0
    tp_scores: list[float] = field(default_factory=list)

    @property
    def tp(self) -> int:
        return self.matches + self.switches

    @property
    def recall(self) -> float:
        return self.tp / self.n_gt if self.n_gt else float("nan")

    @property
    def mota(self) -> float:
        return 1.0 - (self.misses + self.false_positives + self.switches) / self.n_gt if self.n_gt else float("nan")

    @property
    def motar(self) -> float:
        if self.tp == 0:
            return 0.0
        return max(0.0, 1.0 - (self.switches + self.false_positives) / self.tp)

    @property
    def motp(self) -> float:
        return self.distance_sum / self.tp if self.tp else float("nan")


def mot_accumulate(
    preds_by_frame: dict[int, list[Box]],
    gts_by_frame: dict[int, list[Box]],
    frames: Sequence[int],
    threshold: float,
    min_score: float | None = None,
) -> MotCounts:
    """MOT event counts over a sequence for one class.

    Per frame: a GT matched last time keeps its hypothesis if that hypothesis is
    present and within ``threshold``; the rest are matched by Hungarian
    assignment on centre distance (pairs at or beyond ``threshold`` are not
    allowed). A correspondence whose hypothesis differs from the GT's last
    matched hypothesis is an identity switch.
    """
    counts = MotCounts()
    last: dict[int, int] = {}  # gt id -> hypothesis id of the last correspondence
    prev: dict[int, int] = {}  # gt id -> hypothesis id matched in the previous frame
    for f in frames:
        gts = gts_by_frame.get(f, [])
        preds = [p for p in preds_by_frame.get(f, []) if min_score is None or p.score >= min_score]
        counts.n_gt += len(gts)
        d = np.array([[center_distance(p, g) for p in preds] for g in gts]).reshape(len(gts), len(preds))
        ok = d < threshold
        pairs: dict[int, int] = {}
        hyp_index = {p.track_id: k for k, p in enumerate(preds)}
        used_p: set[int] = set()
        for gi, g in enumerate(gts):
            h = prev.get(g.track_id)
            if h is not None and h in hyp_index:
                k = hyp_index[h]
                if ok[gi, k] and k not in used_p:
                    pairs[gi] = k
                    used_p.add(k)
        free_g = [gi for gi in range(len(gts)) if gi not in pairs]
        free_p = [k for k in range(len(preds)) if k not in used_p]
        if free_g and free_p:
            sub = d[np.ix_(free_g, free_p)]
            big = 1e6
            cost = np.where(sub < threshold, sub, big)
            r, c = hungarian(cost)
            for a, b in zip(r, c):
                if cost[a, b] < big:
                    pairs[free_g[a]] = free_p[b]
        new_prev: dict[int, int] = {}
        for gi, g in enumerate(gts):
            if gi not in pairs:
                counts.misses += 1
                continue
            p = preds[pairs[gi]]
            if g.track_id in last and last[g.track_id] != p.track_id:
                counts.switches += 1
            else:
                counts.matches += 1
            last[g.track_id] = p.track_id
            new_prev[g.track_id] = p.track_id
            counts.distance_sum += float(d[gi, pairs[gi]])
            counts.tp_scores.append(p.score)
        counts.false_positives += len(preds) - len(pairs)
        prev = new_prev
    return counts


@dataclass
class TrackingReport:
    amota: float
    amotp: float
    ids: int
    recall: float
    mota: float
    motp: float
    per_class: dict[str, dict[str, float]]
    evaluated_classes: list[str]
    undefined: bool = False


def recall_thresholds(counts_all: MotCounts, cfg: EvalConfig) -> tuple[np.ndarray, np.ndarray]:
    """Score thresholds hitting each recall point (NaN where the recall is unreachable)."""
    rec_interp = np.linspace(cfg.min_recall, 1, cfg.n_recall_points).round(12)
    if not counts_all.tp_scores or counts_all.n_gt == 0:
        return np.full(cfg.n_recall_points, np.nan), rec_interp
    scores = np.sort(np.array(counts_all.tp_scores))[::-1]
    rec = np.arange(1, len(scores) + 1) / counts_all.n_gt
    th = np.interp(rec_interp, rec, scores, right=0)
    th[rec_interp > rec.max() + 1e-12] = np.nan
    return th, rec_interp


def tracking_metrics_class(preds: Sequence[Box], gts: Sequence[Box], frames: Sequence[int], cfg: EvalConfig) -> dict[str, float]:
    pbf: dict[int, list[Box]] = {}
    gbf: dict[int, list[Box]] = {}
    for p in preds:
        pbf.setdefault(p.frame, []).append(p)
    for g in gts:
        gbf.setdefault(g.frame, []).append(g)
    all_counts = mot_accumulate(pbf, gbf, frames, cfg.track_threshold)
    thresholds, _ = recall_thresholds(all_counts, cfg)
    motars, motps = [], []
    best = None
    for th in thresholds:
        if np.isnan(th):
            motars.append(0.0)
            motps.append(cfg.track_threshold)
            continue
        c = mot_accumulate(pbf, gbf, frames, cfg.track_threshold, th)
        motars.append(c.motar)
        motps.append(c.motp if c.tp else cfg.track_threshold)
        if best is None or c.mota > best.mota:
            best = c
    if best is None:
        best = all_counts
    return {
        "amota": float(np.mean(motars)),
        "amotp": float(np.mean(motps)),
        "ids": int(best.switches),
        "recall": float(best.recall),
        "mota": float(best.mota),
        "motp": float(best.motp) if best.tp else float(cfg.track_threshold),
        "fp": int(best.false_positives),
        "fn": int(best.misses),
        "tp": int(best.tp),
        "n_gt": int(best.n_gt),
    }


def tracking_metrics(preds: Sequence[Box], gts: Sequence[Box], frames: Sequence[int], cfg: EvalConfig | None = None) -> TrackingReport:
    """AMOTA/AMOTP over recall points, plus IDS/Recall/MOTA/MOTP at the best-MOTA threshold.

    Averages over the classes that have GT; empty GT is reported as undefined.
    """
    cfg = cfg or EvalConfig()
    classes = sorted({g.class_id for g in gts})
    per = {}
    for c in classes:
        per[cfg.class_names[c]] = tracking_metrics_class([p for p in preds if p.class_id == c], [g for g in gts if g.class_id == c], frames, cfg)
    if not per:
        nan = float("nan")
        return TrackingReport(nan, nan, 0, nan, nan, nan, {}, [], undefined=True)

    def avg(k):
        return float(np.mean([v[k] for v in per.values()]))

    return TrackingReport(
        avg("amota"), avg("amotp"), int(sum(v["ids"] for v in per.values())), avg("recall"), avg("mota"), avg("motp"), per, list(per)
    )


# ---------------------------------------------------------------------------
# report


@dataclass
class EvalReport:
    detection: DetectionReport
    tracking: TrackingReport

    def summary(self) -> dict[str, float]:
        d, t = self.detection, self.tracking
        return {
            "mAP": d.mAP,
            "composite": d.composite,
            "mATE": d.tp_errors["trans_err"],
            "mASE": d.tp_errors["scale_err"],
            "mAOE": d.tp_errors["orient_err"],
            "mAVE": d.tp_errors["vel_err"],
            "AMOTA": t.amota,
            "AMOTP": t.amotp,
            "IDS": t.ids,
            "Recall": t.recall,
            "MOTA": t.mota,
            "MOTP": t.motp,
        }

    def to_text(self) -> str:
        lines = ["# evaluation report"]
        for k, v in self.summary().items():
            lines.append(f"{k:10s} {v}")
        lines.append(f"{'mAAE':10s} N/A")
        if self.tracking.undefined:
            lines.append("tracking   undefined (no ground truth)")
        for name in self.detection.evaluated_classes:
            ap = self.detection.per_class_ap[name]
            aps = " ".join(f"AP@{th:g}={v:.4f}" for th, v in ap.items())
            tp = " ".join(f"{k}={v:.4f}" for k, v in self.detection.per_class_tp[name].items())
            lines.append(f"class {name}: {aps} {tp}")
        for name, m in self.tracking.per_class.items():
            lines.append(f"track {name}: " + " ".join(f"{k}={v}" for k, v in m.items()))
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["scope", "metric", "value"])
        for k, v in self.summary().items():
            w.writerow(["all", k, repr(float(v))])
        for name in self.detection.evaluated_classes:
            for th, v in self.detection.per_class_ap[name].items():
                w.writerow([name, f"AP@{th:g}", repr(float(v))])
            for k, v in self.detection.per_class_tp[name].items():
                w.writerow([name, k, repr(float(v))])
        for name, m in self.tracking.per_class.items():
            for k, v in m.items():
                w.writerow([name, k, repr(float(v))])
        return buf.getvalue()


def evaluate(tracks: TrackOutput, frames, cfg: EvalConfig | None = None) -> EvalReport:
    """Full report for tracker output against the GT of ``frames``."""
    cfg = cfg or EvalConfig()
    preds = pred_boxes_of(tracks)
    gts = gt_boxes_of(frames)
    frame_ids = [f.index for f in frames]
    return EvalReport(detection_metrics(preds, gts, cfg), tracking_metrics(preds, gts, frame_ids, cfg))
