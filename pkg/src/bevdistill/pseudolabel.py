"""Offline BEV pseudo-labels from painted, accumulated LiDAR clouds.

Pipeline per sequence:

1. paint every LiDAR point with the mean foundation feature over the cameras
   that see it (depth test against the analytic scene, 10 cm tolerance);
2. split each frame into static points (outside every inflated GT box, moved
   to the global frame) and per-track points (moved into box coordinates);
3. for a reference frame, put the static map back into its ego frame and each
   object cloud at that frame's box pose, keep a height slab, and average
   features per BEV cell. Cells that receive no point are invalid.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels
from .container import read_array, read_manifest, verify_files, write_array_set, write_manifest
from .featprov import FeatureMap, FeatureProvider
from .geometry import BevGridSpec, box_pose, points_in_box, project_points, to_box_frame
from .numerics import bilinear_sample
from .scene import STATIC, Frame, Scene, raycast

PSEUDO_KIND = "bevdistill-pseudolabels"
PSEUDO_VERSION = 1


@dataclass
class FeaturePointCloud:
    positions: np.ndarray  # N × 3
    features: np.ndarray  # N × C
    frame_index: np.ndarray  # N
    track_ids: np.ndarray  # N, STATIC for static points
    coords: str = "ego"  # "ego", "global" or "object"

    def __len__(self) -> int:
        return len(self.positions)

    def subset(self, mask: np.ndarray) -> "FeaturePointCloud":
        return FeaturePointCloud(self.positions[mask], self.features[mask], self.frame_index[mask], self.track_ids[mask], self.coords)

    @classmethod
    def empty(cls, channels: int, coords: str = "ego") -> "FeaturePointCloud":
        return cls(np.zeros((0, 3)), np.zeros((0, channels)), np.zeros(0, np.int64), np.zeros(0, np.int64), coords)

    @classmethod
    def concat(cls, clouds: Sequence["FeaturePointCloud"], coords: str, channels: int) -> "FeaturePointCloud":
        if not clouds:
            return cls.empty(channels, coords)
        return cls(
            np.concatenate([c.positions for c in clouds]),
            np.concatenate([c.features for c in clouds]),
            np.concatenate([c.frame_index for c in clouds]),
            np.concatenate([c.track_ids for c in clouds]),
            coords,
        )


@dataclass
class PseudoLabelGrid:
    grid: np.ndarray  # res × res × C, zero outside the mask
    valid_mask: np.ndarray  # res × res bool

    @property
    def coverage(self) -> int:
        return int(self.valid_mask.sum())


@dataclass
class PseudoLabelConfig:
    accumulate: bool = True
    dynamic: bool = True
    causal: bool = False
    renormalize: bool = True
    box_inflation: float = 0.1
    z_range: tuple[float, float] = (-1.0, 3.0)
    visibility_tolerance: float = 0.1
    paint_scale: float = 0.25
    extra: dict = field(default_factory=dict)


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=1, keepdims=True)
    return np.divide(x, n, out=np.zeros_like(x), where=n > 0)


def visible_in_camera(points: np.ndarray, frame: Frame, cam_index: int, tolerance: float = 0.1):
    """(uv, visible) for the full-resolution camera; visibility = in view and unoccluded."""
    cam = frame.cameras[cam_index]
    uv, depth, ok = project_points(points, cam)
    visible = np.zeros(len(points), dtype=bool)
    if ok.any():
        hit, _, _, _ = raycast(frame, cam, uv[ok])
        visible[ok] = depth[ok] - hit <= tolerance
    return uv, visible


def paint_points(
    points: np.ndarray,
    frame: Frame,
    feature_maps: Sequence[FeatureMap],
    track_ids: np.ndarray | None = None,
    tolerance: float = 0.1,
    renormalize: bool = True,
) -> FeaturePointCloud:
    """Mean bilinear feature over every camera that sees each point; unseen points are dropped.

    Samples are taken at the point's projection in feature-map coordinates,
    clamped to the map so image-border points stay usable.
    """
    if not feature_maps:
        raise ValueError("paint_points needs at least one camera feature map")
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if track_ids is None:
        track_ids = np.full(len(points), STATIC, dtype=np.int64)
    c = feature_maps[0].channels
    sums = np.zeros((len(points), c))
    counts = np.zeros(len(points), dtype=np.int64)
    for fm in feature_maps:
        uv, visible = visible_in_camera(points, frame, fm.camera, tolerance)
        if not visible.any():
            continue
        hs, ws = fm.grid.shape[:2]
        fuv = (uv[visible] + 0.5) * fm.scale - 0.5
        fuv[:, 0] = np.clip(fuv[:, 0], 0, ws - 1)
        fuv[:, 1] = np.clip(fuv[:, 1], 0, hs - 1)
        sampled, _ = bilinear_sample(fm.grid, fuv)
        sums[visible] += sampled.data
        counts[visible] += 1
    keep = counts > 0
    feats = sums[keep] / counts[keep, None]
    if renormalize:
        feats = _normalize_rows(feats)
    n = int(keep.sum())
    return FeaturePointCloud(points[keep], feats, np.full(n, frame.index, dtype=np.int64), np.asarray(track_ids)[keep], "ego")


def _inside_any_box(points: np.ndarray, frame: Frame, inflate: float) -> np.ndarray:
    inside = np.zeros(len(points), dtype=bool)
    for b in frame.gt_boxes:
        inside |= points_in_box(points, b.center, b.size, b.yaw, inflate)
    return inside


def accumulate_static(clouds: Sequence[FeaturePointCloud], frames: Sequence[Frame], inflate: float = 0.1) -> FeaturePointCloud:
    """Points outside every inflated GT box of their own frame, moved to the global frame."""
    if not frames:
        raise ValueError("need at least one frame")
    channels = clouds[0].features.shape[1] if clouds else 0
    out = []
    for cloud, frame in zip(clouds, frames):
        keep = ~_inside_any_box(cloud.positions, frame, inflate)
        part = cloud.subset(keep)
        part.positions = frame.ego_pose.apply(part.positions)
        part.coords = "global"
        out.append(part)
    return FeaturePointCloud.concat(out, "global", channels)


def accumulate_object(
    clouds: Sequence[FeaturePointCloud], frames: Sequence[Frame], track_id: int, inflate: float = 0.1
) -> FeaturePointCloud:
    """Points inside the track's (inflated) box in each frame, in box coordinates."""
    channels = clouds[0].features.shape[1] if clouds else 0
    out = []
    seen = False
    for cloud, frame in zip(clouds, frames):
        box = frame.box(track_id)
        if box is None:
            continue
        seen = True
        inside = points_in_box(cloud.positions, box.center, box.size, box.yaw, inflate)
        part = cloud.subset(inside)
        part.positions = to_box_frame(part.positions, box.center, box.yaw)
        part.coords = "object"
        out.append(part)
    if not seen:
        raise KeyError(f"unknown track_id {track_id}")
    return FeaturePointCloud.concat(out, "object", channels)


def rasterize_bev(
    static: FeaturePointCloud,
    objects: dict[int, FeaturePointCloud],
    reference: Frame,
    grid: BevGridSpec,
    z_range: tuple[float, float] = (-1.0, 3.0),
    renormalize: bool = True,
) -> PseudoLabelGrid:
    """Average point features per BEV cell within a height slab.

    Static points come in global coordinates, object clouds in box coordinates
    and are placed at the reference frame's box of the same track (tracks absent
    from the reference frame are skipped).
    """
    if grid.n_cells <= 0:
        raise ValueError("empty grid")
    channels = static.features.shape[1]
    pos = [reference.ego_pose.inverse().apply(static.positions)]
    feats = [static.features]
    for tid in sorted(objects):
        box = reference.box(tid)
        cloud = objects[tid]
        if box is None or len(cloud) == 0:
            continue
        pos.append(box_pose(box.center, box.yaw).apply(cloud.positions))
        feats.append(cloud.features)
    p = np.concatenate(pos) if pos else np.zeros((0, 3))
    f = np.concatenate(feats) if feats else np.zeros((0, channels))
    idx = grid.cell_index(p[:, :2]) if len(p) else np.zeros(0, np.int64)
    slab = (p[:, 2] >= z_range[0]) & (p[:, 2] <= z_range[1])
    idx = np.where(slab, idx, -1)
    sums = kernels.scatter_add_rows(idx, np.ascontiguousarray(f), grid.n_cells)
    counts = kernels.bincount_rows(idx, grid.n_cells)
    valid = counts > 0
    mean = np.zeros_like(sums)
    mean[valid] = sums[valid] / counts[valid, None]
    if renormalize:
        mean = _normalize_rows(mean)
    res = grid.resolution
    return PseudoLabelGrid(mean.reshape(res, res, channels), valid.reshape(res, res))


# ---------------------------------------------------------------------------
# whole-sequence driver


def paint_scene(scene: Scene, provider: FeatureProvider, cfg: PseudoLabelConfig | None = None) -> list[FeaturePointCloud]:
    cfg = cfg or PseudoLabelConfig()
    clouds = []
    for f in scene.frames:
        maps = [provider.compute_features(f, i, cfg.paint_scale) for i in range(len(f.cameras))]
        clouds.append(paint_points(f.lidar_points, f, maps, f.lidar_tags, cfg.visibility_tolerance, cfg.renormalize))
    return clouds


def build_pseudo_labels(
    scene: Scene,
    provider: FeatureProvider,
    cfg: PseudoLabelConfig | None = None,
    clouds: list[FeaturePointCloud] | None = None,
) -> list[PseudoLabelGrid]:
    """One pseudo-label grid per frame of the sequence."""
    cfg = cfg or PseudoLabelConfig()
    if clouds is None:
        clouds = paint_scene(scene, provider, cfg)
    out = []
    for t, ref in enumerate(scene.frames):
        if not cfg.accumulate:
            used = [t]
        elif cfg.causal:
            used = list(range(t + 1))
        else:
            used = list(range(len(scene.frames)))
        frames = [scene.frames[k] for k in used]
        cl = [clouds[k] for k in used]
        static = accumulate_static(cl, frames, cfg.box_inflation)
        objects = {}
        if cfg.dynamic:
            for b in ref.gt_boxes:
                objects[b.track_id] = accumulate_object(cl, frames, b.track_id, cfg.box_inflation) if any(
                    fr.box(b.track_id) is not None for fr in frames
                ) else FeaturePointCloud.empty(static.features.shape[1], "object")
        out.append(rasterize_bev(static, objects, ref, scene.grid, cfg.z_range, cfg.renormalize))
    return out


def write_pseudo_labels(scene_dir: str | Path, labels: list[PseudoLabelGrid], cfg: PseudoLabelConfig) -> Path:
    root = Path(scene_dir) / "pseudolabels"
    arrays = {}
    for k, lab in enumerate(labels):
        arrays[f"{k}.bin"] = (lab.grid, "f4")
        arrays[f"{k}.mask.bin"] = (lab.valid_mask.astype(np.float64), "f4")
    checksums = write_array_set(root, arrays)
    write_manifest(
        root / "pseudolabels.json",
        {
            "kind": PSEUDO_KIND,
            "version": PSEUDO_VERSION,
            "n_frames": len(labels),
            "coverage": [lab.coverage for lab in labels],
            "config": {
                "accumulate": cfg.accumulate,
                "dynamic": cfg.dynamic,
                "causal": cfg.causal,
                "renormalize": cfg.renormalize,
                "box_inflation": cfg.box_inflation,
                "z_range": list(cfg.z_range),
                "paint_scale": cfg.paint_scale,
            },
            "files": checksums,
        },
    )
    return root


def read_pseudo_labels(scene_dir: str | Path) -> list[PseudoLabelGrid]:
    root = Path(scene_dir) / "pseudolabels"
    manifest = read_manifest(root / "pseudolabels.json", PSEUDO_KIND, PSEUDO_VERSION)
    verify_files(root, manifest["files"])
    out = []
    for k in range(manifest["n_frames"]):
        grid = read_array(root / f"{k}.bin").astype(np.float64)
        mask = read_array(root / f"{k}.mask.bin") > 0.5
        out.append(PseudoLabelGrid(grid, mask))
    return out
