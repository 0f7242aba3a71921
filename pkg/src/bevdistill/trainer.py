"""Model assembly, sequential training loop, BEV augmentation, checkpoints and inference."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .container import read_array, read_manifest, verify_files, write_array_set, write_manifest
from .decoder import Decoder, DecoderConfig, DecodeResult, PVInput, box_to_anchor
from .featprov import SCALES, BackboneStub, FeatureProvider, ProceduralFeatureProvider
from .geometry import BevGridSpec, CameraModel, rot_z, wrap_angle
from .lifting import BevNet, BevNetOutput, LiftConfig
from .losses import (
    DepthTarget,
    DetLossConfig,
    LossWeights,
    depth_loss,
    depth_targets,
    det_loss,
    distill_loss,
    total_loss,
)
from .numerics import Tensor
from .params import ParamStore
from .pseudolabel import PseudoLabelGrid
from .scene import Frame, GtBox, Obstacle, Scene
from .tracker import FrameDetections, InstanceMemory, TrackOutput, propagate, update_ids

log = logging.getLogger(__name__)

CHECKPOINT_KIND = "bevdistill-checkpoint"
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# model


@dataclass
class ModelConfig:
    seed: int = 0
    lift: LiftConfig = field(default_factory=LiftConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    grid: BevGridSpec = field(default_factory=BevGridSpec)

    def to_dict(self) -> dict:
        lift = asdict(self.lift)
        lift.pop("depth_refine", None)
        return {"seed": self.seed, "lift": lift, "decoder": asdict(self.decoder), "grid": asdict(self.grid)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        lift = dict(d["lift"])
        lift["depth_range"] = tuple(lift["depth_range"])
        lift["scales"] = tuple(lift["scales"])
        dec = dict(d["decoder"])
        dec["anchor_size"] = tuple(dec["anchor_size"])
        g = d["grid"]
        return cls(d["seed"], LiftConfig(**lift), DecoderConfig(**dec), BevGridSpec(tuple(g["x_range"]), tuple(g["y_range"]), g["resolution"]))


class Model:
    """BEV network + sparse decoder sharing one parameter store."""

    def __init__(self, cfg: ModelConfig | None = None):
        self.cfg = cfg or ModelConfig()
        self.params = ParamStore(self.cfg.seed)
        self.bevnet = BevNet(self.params, self.cfg.lift, self.cfg.grid)
        self.decoder = Decoder(self.params, self.cfg.decoder, self.cfg.grid, self.cfg.lift.scales)

    @property
    def use_bev(self) -> bool:
        return self.cfg.decoder.use_bev

    def forward(
        self,
        cameras: Sequence[CameraModel],
        image_features: Sequence[dict[float, np.ndarray]],
        propagated=None,
    ) -> tuple[BevNetOutput, DecodeResult]:
        net = self.bevnet(cameras, image_features, with_bev=self.use_bev)
        pv = PVInput(list(cameras), net.pv) if self.cfg.decoder.use_pv else None
        result = self.decoder.decode_frame(net.bev if self.use_bev else None, pv, propagated)
        return net, result


# ---------------------------------------------------------------------------
# BEV augmentation


@dataclass
class AugmentParams:
    rotation: float = 0.0  # radians about z
    scale: float = 1.0
    flip_y: bool = False

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("augmentation scale must be positive")

    def matrix(self) -> np.ndarray:
        f = np.diag([1.0, -1.0, 1.0]) if self.flip_y else np.eye(3)
        return self.scale * rot_z(self.rotation) @ f

    @classmethod
    def sample(cls, rng: np.random.Generator, max_rotation: float = np.pi / 8, scale_range=(0.95, 1.05), flip_prob: float = 0.5):
        return cls(float(rng.uniform(-max_rotation, max_rotation)), float(rng.uniform(*scale_range)), bool(rng.random() < flip_prob))


def augment_bev(frame: Frame, params: AugmentParams) -> Frame:
    """Apply the ego-frame map ``A = s·R(θ)·flip`` to boxes, LiDAR, obstacles and cameras.

    Camera images do not change: each camera gets ``A`` as its ego transform,
    so projecting an augmented point through an augmented camera gives the
    pixel of the original point through the original camera. The ego pose is
    kept; propagation accounts for ``A`` separately.
    """
    a = params.matrix()
    sgn = -1.0 if params.flip_y else 1.0

    def yaw_map(yaw: float) -> float:
        return float(wrap_angle(sgn * yaw + params.rotation))

    boxes = [
        GtBox(
            a @ b.center,
            tuple(np.asarray(b.size) * params.scale),
            yaw_map(b.yaw),
            a @ np.asarray(b.velocity),
            b.class_id,
            b.track_id,
            b.frame,
        )
        for b in frame.gt_boxes
    ]
    obstacles = [Obstacle(a @ o.center, tuple(np.asarray(o.size) * params.scale), yaw_map(o.yaw)) for o in frame.obstacles]
    return Frame(
        frame.index,
        frame.timestamp,
        frame.ego_pose,
        [c.with_ego_transform(a) for c in frame.cameras],
        frame.lidar_points @ a.T,
        frame.lidar_tags,
        boxes,
        obstacles,
    )


def resample_pseudo(label: PseudoLabelGrid, grid: BevGridSpec, a: np.ndarray) -> PseudoLabelGrid:
    """Nearest-cell resampling of a pseudo-label grid into the augmented ego frame."""
    centers = grid.cell_centers().reshape(-1, 2)
    pts = np.concatenate([centers, np.zeros((len(centers), 1))], axis=1)
    src = np.linalg.solve(a, pts.T).T
    idx = grid.cell_index(src[:, :2])
    res, c = grid.resolution, label.grid.shape[-1]
    flat_mask = label.valid_mask.reshape(-1)
    flat = label.grid.reshape(-1, c)
    ok = idx >= 0
    ok[ok] = flat_mask[idx[ok]]
    out = np.zeros((len(idx), c))
    out[ok] = flat[idx[ok]]
    return PseudoLabelGrid(out.reshape(res, res, c), ok.reshape(res, res))


# ---------------------------------------------------------------------------
# training samples


@dataclass
class FrameSample:
    frame: Frame
    image_features: list[dict[float, np.ndarray]]
    gt_anchors: np.ndarray
    gt_classes: np.ndarray
    depth: list[DepthTarget]
    pseudo: PseudoLabelGrid | None
    ego_transform: np.ndarray | None = None


def gt_arrays(frame: Frame) -> tuple[np.ndarray, np.ndarray]:
    anchors = np.array([box_to_anchor(b.center, b.size, b.yaw, b.velocity) for b in frame.gt_boxes]).reshape(-1, 11)
    classes = np.array([b.class_id for b in frame.gt_boxes], dtype=np.int64)
    return anchors, classes


def image_features(frame: Frame, backbone: FeatureProvider, scales=SCALES) -> list[dict[float, np.ndarray]]:
    return [{s: backbone.compute_features(frame, i, s).grid for s in scales} for i in range(len(frame.cameras))]


def make_sample(
    frame: Frame,
    backbone: FeatureProvider,
    model_cfg: ModelConfig,
    pseudo: PseudoLabelGrid | None = None,
    augment: AugmentParams | None = None,
    features: list[dict[float, np.ndarray]] | None = None,
) -> FrameSample:
    feats = features if features is not None else image_features(frame, backbone, model_cfg.lift.scales)
    a = None
    if augment is not None:
        a = augment.matrix()
        frame = augment_bev(frame, augment)
        if pseudo is not None:
            pseudo = resample_pseudo(pseudo, model_cfg.grid, a)
    bins = BevNet.bins_for(model_cfg.lift)
    s = model_cfg.lift.lift_scale
    depth = [depth_targets(frame.lidar_points, cam.scaled(s), bins) for cam in frame.cameras]
    anchors, classes = gt_arrays(frame)
    return FrameSample(frame, feats, anchors, classes, depth, pseudo, a)


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class TrainConfig:
    steps: int = 1000
    lr: float = 2e-4
    warmup: int = 500
    cosine: bool = True
    clip: float = 5.0
    optimizer: str = "sgd"  # "sgd" (momentum) or "adam"
    momentum: float = 0.9
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    det: DetLossConfig = field(default_factory=DetLossConfig)
    augment: bool = False
    log_every: int = 50

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("learning rate must be >= 0")
        if not self.clip > 0:
            raise ValueError("clip norm must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer}")

    @classmethod
    def overfit(cls, **kw) -> "TrainConfig":
        """Single-frame overfitting: adaptive steps with a short warmup."""
        base = dict(steps=1000, lr=3e-3, warmup=50, optimizer="adam")
        base.update(kw)
        return cls(**base)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``cfg.lr`` then (optionally) cosine decay to 0 at ``cfg.steps``."""
    if cfg.warmup > 0 and step < cfg.warmup:
        return cfg.lr * (step + 1) / cfg.warmup
    if not cfg.cosine:
        return cfg.lr
    span = max(cfg.steps - cfg.warmup, 1)
    prog = min(max(step - cfg.warmup, 0) / span, 1.0)
    return cfg.lr * 0.5 * (1 + math.cos(math.pi * prog))


def clip_gradients(grads: list[np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place to global norm ``<= max_norm``; returns the norm before clipping."""
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if norm > max_norm:
        s = max_norm / norm
        for g in grads:
            g *= s
    return norm


class Optimizer:
    def __init__(self, params: ParamStore, cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.t = 0
        self.state: dict[str, list[np.ndarray]] = {}

    def step(self, lr: float) -> float:
        """Clip and apply the gradients currently stored on the parameters; returns the raw grad norm."""
        names = list(self.params)
        grads = [self.params[n].grad if self.params[n].grad is not None else np.zeros(self.params[n].shape) for n in names]
        grads = [np.array(g, dtype=np.float64, copy=True) for g in grads]
        norm = clip_gradients(grads, self.cfg.clip)
        if not math.isfinite(norm):
            raise TrainingDiverged(f"non-finite gradient norm at update {self.t}")
        self.t += 1
        for n, g in zip(names, grads):
            p = self.params[n]
            if self.cfg.optimizer == "sgd":
                buf = self.state.setdefault(n, [np.zeros_like(g)])
                buf[0] = self.cfg.momentum * buf[0] + g
                upd = buf[0]
            else:
                b1, b2 = self.cfg.betas
                st = self.state.setdefault(n, [np.zeros_like(g), np.zeros_like(g)])
                st[0] = b1 * st[0] + (1 - b1) * g
                st[1] = b2 * st[1] + (1 - b2) * g * g
                mhat = st[0] / (1 - b1**self.t)
                vhat = st[1] / (1 - b2**self.t)
                upd = mhat / (np.sqrt(vhat) + self.cfg.adam_eps)
            if self.cfg.weight_decay:
                upd = upd + self.cfg.weight_decay * p.data
            if lr != 0:
                p.data = p.data - lr * upd
        return norm


# ---------------------------------------------------------------------------
# one step


@dataclass
class StepResult:
    loss: Tensor
    parts: dict[str, float]
    result: DecodeResult


def compute_loss(model: Model, sample: FrameSample, cfg: TrainConfig, propagated=None) -> StepResult:
    net, result = model.forward(sample.frame.cameras, sample.image_features, propagated)
    det, det_parts = det_loss(result.layers, sample.gt_anchors, sample.gt_classes, cfg.det)
    dist = dep = None
    parts = dict(det_parts)
    if model.use_bev:
        if sample.pseudo is not None and cfg.weights.distill > 0:
            dist, dp = distill_loss(net.distill_pred, sample.pseudo.grid, sample.pseudo.valid_mask)
            parts.update(dp)
        if cfg.weights.depth > 0:
            dep, dp = depth_loss(net.depth_probs, net.aux_depth, sample.depth)
            parts.update(dp)
    loss, tparts = total_loss(cfg.weights, det, dist, dep)
    parts.update(tparts)
    return StepResult(loss, parts, result)


def next_memory(result: DecodeResult, memory: InstanceMemory | None, frame: Frame, n_temporal: int, tau: float = 0.4) -> InstanceMemory:
    det = FrameDetections.from_decode(result)
    base = memory if memory is not None else InstanceMemory.empty(det.features.shape[1])
    _, mem = update_ids(det, base, frame.index, frame.ego_pose, frame.timestamp, tau, n_temporal)
    return mem


def propagated_for(memory: InstanceMemory | None, frame: Frame, ego_transform: np.ndarray | None):
    if memory is None or len(memory) == 0:
        return None
    return propagate(memory, frame.ego_pose, frame.timestamp - memory.timestamp, ego_transform)


@dataclass
class TrainResult:
    history: list[dict[str, float]]
    steps: int


def train(model: Model, sequences: Sequence[Sequence[FrameSample]], cfg: TrainConfig, augment_fn=None) -> TrainResult:
    """Sequential training: one frame per step, temporal memory carried within a sequence.

    Sequences are visited round-robin; memory is reset at the first frame of
    each pass through a sequence. ``augment_fn(sequence_index, pass_index)``
    may return replacement samples for a pass (per-sequence augmentation).
    """
    if not sequences or not all(len(s) for s in sequences):
        raise ValueError("need at least one non-empty sequence")
    opt = Optimizer(model.params, cfg)
    history = []
    step = 0
    n_pass = 0
    n_temporal = model.cfg.decoder.n_temporal
    while step < cfg.steps:
        for si, seq in enumerate(sequences):
            if step >= cfg.steps:
                break
            if augment_fn is not None:
                seq = augment_fn(si, n_pass)
            memory = None
            for sample in seq:
                if step >= cfg.steps:
                    break
                prop = propagated_for(memory, sample.frame, sample.ego_transform)
                model.params.zero_grad()
                try:
                    out = compute_loss(model, sample, cfg, prop)
                except FloatingPointError as exc:
                    raise TrainingDiverged(f"step {step}: {exc}") from exc
                if not np.isfinite(out.loss.item()):
                    raise TrainingDiverged(f"non-finite loss at step {step}: {out.parts}")
                out.loss.backward()
                lr = lr_at(step, cfg)
                norm = opt.step(lr)
                parts = dict(out.parts, step=step, lr=lr, grad_norm=norm, sequence=si, frame=sample.frame.index)
                history.append(parts)
                if cfg.log_every and step % cfg.log_every == 0:
                    log.info("step %d loss %.5f det %.4f distill %.4f depth %.4f", step, parts["total"], parts["det"], parts["distill"], parts["depth"])
                memory = next_memory(out.result, memory, sample.frame, n_temporal)
                step += 1
        n_pass += 1
    model.params.zero_grad()
    return TrainResult(history, step)


# ---------------------------------------------------------------------------
# inference


def infer_sequence(
    model: Model,
    scene: Scene,
    backbone: FeatureProvider,
    tau: float = 0.4,
) -> TrackOutput:
    """Decode every frame in order with query propagation; returns confident tracks."""
    out = TrackOutput()
    memory = None
    next_id = 0
    for f in scene.frames:
        feats = image_features(f, backbone, model.cfg.lift.scales)
        prop = propagated_for(memory, f, None)
        _, result = model.forward(f.cameras, feats, prop)
        det = FrameDetections.from_decode(result)
        base = memory if memory is not None else InstanceMemory.empty(det.features.shape[1], next_id=next_id)
        records, memory = update_ids(det, base, f.index, f.ego_pose, f.timestamp, tau, model.cfg.decoder.n_temporal)
        out.add(f.index, records)
    return out


def default_backbone(seed: int, channels: int = 16) -> BackboneStub:
    return BackboneStub(ProceduralFeatureProvider(seed, channels), seed=seed, channels=channels)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | Path, model: Model, extra: dict | None = None) -> Path:
    root = Path(path)
    arrays = {f"params/{name}.bin": (t.data, "f8") for name, t in model.params.items()}
    checksums = write_array_set(root, arrays)
    write_manifest(
        root / "checkpoint.json",
        {
            "kind": CHECKPOINT_KIND,
            "version": CHECKPOINT_VERSION,
            "model": model.cfg.to_dict(),
            "params": list(model.params),
            "files": checksums,
            "extra": extra or {},
        },
    )
    return root


def load_checkpoint(path: str | Path) -> tuple[Model, dict]:
    root = Path(path)
    manifest = read_manifest(root / "checkpoint.json", CHECKPOINT_KIND, CHECKPOINT_VERSION)
    verify_files(root, manifest["files"])
    model = Model(ModelConfig.from_dict(manifest["model"]))
    state = {name: read_array(root / f"params/{name}.bin") for name in manifest["params"]}
    model.params.load_state_dict(state)
    return model, manifest.get("extra", {})


def with_flags(cfg: ModelConfig, use_bev: bool = True, use_pv: bool = True) -> ModelConfig:
    return replace(cfg, decoder=replace(cfg.decoder, use_bev=use_bev, use_pv=use_pv))
