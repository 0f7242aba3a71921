"""Synthetic multi-camera driving sequences and their on-disk format.

A scene is an ego vehicle driving a smooth path among static obstacles and a
few moving objects, observed by a ring of pinhole cameras and a LiDAR. The
geometry is analytic (ground plane plus oriented boxes), so depth renders,
visibility and point/box containment can all be evaluated exactly.

Frames store everything in their own ego frame; ``ego_pose`` maps ego points
to the global frame.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .container import (
    read_array,
    read_manifest,
    verify_files,
    write_array_set,
    write_manifest,
)
from .geometry import (
    BevGridSpec,
    CameraModel,
    Pose,
    camera_rays,
    points_in_box,
    project_points,
    ray_box_depth,
    rot_z,
    wrap_angle,
)

log = logging.getLogger(__name__)

SCENE_KIND = "bevdistill-scene"
SCENE_VERSION = 1

CLASS_NAMES = ("car", "pedestrian", "cyclist")
CLASS_SIZES = {0: (1.9, 4.5, 1.6), 1: (0.7, 0.7, 1.8), 2: (0.8, 1.8, 1.5)}
_CLASS_SPEED = {0: (1.0, 8.0), 1: (0.3, 1.5), 2: (1.0, 5.0)}
_CLASS_WEIGHTS = (0.5, 0.25, 0.25)

STATIC = -1
# surface tags seen by rays (object classes use their class id)
TAG_GROUND = 3
TAG_OBSTACLE = 4
TAG_SKY = 5
N_SURFACE_TAGS = 6

CAMERA_HEIGHT = 1.6
LIDAR_HEIGHT = 1.8


@dataclass
class GtBox:
    center: np.ndarray
    size: tuple[float, float, float]
    yaw: float
    velocity: np.ndarray
    class_id: int
    track_id: int
    frame: int

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.velocity = np.asarray(self.velocity, dtype=np.float64).reshape(3)
        self.size = tuple(float(s) for s in self.size)
        if min(self.size) <= 0:
            raise ValueError("box sizes must be positive")
        self.yaw = wrap_angle(self.yaw)

    def as_row(self) -> np.ndarray:
        return np.array(
            [self.frame, self.track_id, self.class_id, *self.center, *self.size, self.yaw, *self.velocity],
            dtype=np.float64,
        )

    @classmethod
    def from_row(cls, row) -> "GtBox":
        row = np.asarray(row, dtype=np.float64)
        return cls(row[3:6], row[6:9], float(row[9]), row[10:13], int(row[2]), int(row[1]), int(row[0]))


@dataclass
class Obstacle:
    center: np.ndarray
    size: tuple[float, float, float]
    yaw: float

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.size = tuple(float(s) for s in self.size)


@dataclass
class Frame:
    index: int
    timestamp: float
    ego_pose: Pose
    cameras: list[CameraModel]
    lidar_points: np.ndarray
    lidar_tags: np.ndarray
    gt_boxes: list[GtBox]
    obstacles: list[Obstacle] = field(default_factory=list)

    def box(self, track_id: int) -> GtBox | None:
        for b in self.gt_boxes:
            if b.track_id == track_id:
                return b
        return None


@dataclass
class TrackInfo:
    track_id: int
    class_id: int
    motion: str  # "cv" or "turn"
    speed: float
    yaw_rate: float


@dataclass
class SceneConfig:
    seed: int = 0
    n_frames: int = 6
    n_objects: int = 3
    n_cameras: int = 6
    image_width: int = 176
    image_height: int = 64
    dt: float = 0.5
    n_lidar: int = 2000
    feature_channels: int = 16
    grid: BevGridSpec = field(default_factory=BevGridSpec)

    def validate(self) -> None:
        if self.n_cameras < 1:
            raise ValueError("n_cameras must be >= 1")
        if self.n_frames < 1:
            raise ValueError("n_frames must be >= 1")
        if self.n_objects < 0:
            raise ValueError("n_objects must be >= 0")
        if self.dt <= 0:
            raise ValueError("dt must be positive")


@dataclass
class Scene:
    config: SceneConfig
    frames: list[Frame]
    obstacles: list[Obstacle]  # global frame
    tracks: list[TrackInfo]

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def grid(self) -> BevGridSpec:
        return self.config.grid

    def track(self, track_id: int) -> TrackInfo:
        for t in self.tracks:
            if t.track_id == track_id:
                return t
        raise KeyError(track_id)


# ---------------------------------------------------------------------------
# rig


def make_rig(n_cameras: int, width: int = 176, height: int = 64, hfov_deg: float = 70.0) -> list[CameraModel]:
    """Horizontal ring of cameras, 60° apart (tighter when more than six)."""
    spacing = min(np.pi / 3, 2 * np.pi / n_cameras)
    fx = (width / 2) / np.tan(np.deg2rad(hfov_deg) / 2)
    cams = []
    for i in range(n_cameras):
        yaw = i * spacing
        c, s = np.cos(yaw), np.sin(yaw)
        # columns: camera x (right), y (down), z (forward) in ego coordinates
        ego_from_cam = np.array([[s, 0.0, c], [-c, 0.0, s], [0.0, -1.0, 0.0]])
        position = np.array([0.8 * c, 0.8 * s, CAMERA_HEIGHT])
        ext = Pose(ego_from_cam, position).inverse()
        cams.append(CameraModel(fx, fx, (width - 1) / 2, (height - 1) / 2, ext, width, height))
    return cams


def camera_yaw(cam: CameraModel) -> float:
    """Heading of the optical axis in the ego frame."""
    axis = cam.extrinsics.inverse().rotation[:, 2]
    return float(np.arctan2(axis[1], axis[0]))


# ---------------------------------------------------------------------------
# trajectories


def _ego_state(t: float, speed: float, yaw_rate: float) -> tuple[np.ndarray, float]:
    if abs(yaw_rate) < 1e-12:
        return np.array([speed * t, 0.0, 0.0]), 0.0
    yaw = yaw_rate * t
    r = speed / yaw_rate
    return np.array([r * np.sin(yaw), r * (1 - np.cos(yaw)), 0.0]), yaw


def _object_state(info: TrackInfo, p0: np.ndarray, yaw0: float, t: float) -> tuple[np.ndarray, float, np.ndarray]:
    """Global centre, heading and velocity at time ``t``."""
    v, w = info.speed, info.yaw_rate
    if info.motion == "cv" or abs(w) < 1e-12:
        d = np.array([np.cos(yaw0), np.sin(yaw0), 0.0])
        return p0 + v * t * d, yaw0, v * d
    yaw = yaw0 + w * t
    r = v / w
    pos = p0 + np.array([r * (np.sin(yaw) - np.sin(yaw0)), -r * (np.cos(yaw) - np.cos(yaw0)), 0.0])
    return pos, yaw, v * np.array([np.cos(yaw), np.sin(yaw), 0.0])


def _sample_box_surface(rng: np.random.Generator, center, size, yaw, n: int, inset: float = 0.005) -> np.ndarray:
    """Uniform samples on the five upper/side faces, pulled ``inset`` inside the box."""
    if n <= 0:
        return np.zeros((0, 3))
    w, l, h = size
    hx, hy, hz = l / 2 - inset, w / 2 - inset, h / 2 - inset
    faces = np.array([w * h, w * h, l * h, l * h, l * w])
    which = rng.choice(5, size=n, p=faces / faces.sum())
    a = rng.uniform(-1, 1, size=n)
    b = rng.uniform(-1, 1, size=n)
    local = np.empty((n, 3))
    for k, (axis, sign) in enumerate([(0, 1), (0, -1), (1, 1), (1, -1), (2, 1)]):
        m = which == k
        half = np.array([hx, hy, hz])
        other = [i for i in range(3) if i != axis]
        local[m, axis] = sign * half[axis]
        local[m, other[0]] = a[m] * half[other[0]]
        local[m, other[1]] = b[m] * half[other[1]]
    return local @ rot_z(yaw).T + np.asarray(center)


def _box_area(size) -> float:
    w, l, h = size
    return 2 * w * h + 2 * l * h + l * w


def generate_scene(
    seed: int = 0,
    n_frames: int = 6,
    n_objects: int = 3,
    n_cameras: int = 6,
    config: SceneConfig | None = None,
) -> Scene:
    """Deterministic synthetic sequence for ``(seed, params)``."""
    if config is None:
        config = SceneConfig(seed=seed, n_frames=n_frames, n_objects=n_objects, n_cameras=n_cameras)
    config.validate()
    rng = np.random.default_rng(config.seed)
    cams = make_rig(config.n_cameras, config.image_width, config.image_height)
    times = np.arange(config.n_frames) * config.dt

    ego_speed = rng.uniform(2.0, 6.0)
    ego_yaw_rate = rng.uniform(-0.1, 0.1)
    ego_states = [_ego_state(t, ego_speed, ego_yaw_rate) for t in times]
    ego_poses = [Pose.from_yaw(yaw, pos) for pos, yaw in ego_states]
    ego_path = np.array([p for p, _ in ego_states])

    # moving objects, rejection-sampled so they stay apart and start in view
    tracks: list[TrackInfo] = []
    inits: list[tuple[np.ndarray, float]] = []
    trajectories: list[np.ndarray] = []
    cam_yaws = [camera_yaw(c) for c in cams]
    attempts = 0
    while len(tracks) < config.n_objects:
        attempts += 1
        if attempts > 5000:
            raise RuntimeError("could not place objects; reduce n_objects")
        cls = int(rng.choice(3, p=_CLASS_WEIGHTS))
        size = CLASS_SIZES[cls]
        cam_yaw = cam_yaws[int(rng.integers(len(cams)))]
        az = cam_yaw + rng.uniform(-0.45, 0.45)
        rng_m = rng.uniform(7.0, 18.0)
        p0_ego = np.array([rng_m * np.cos(az), rng_m * np.sin(az), size[2] / 2])
        p0 = ego_poses[0].apply(p0_ego)
        yaw0 = rng.uniform(-np.pi, np.pi)
        speed = rng.uniform(*_CLASS_SPEED[cls])
        turning = rng.uniform() < 0.4
        info = TrackInfo(len(tracks), cls, "turn" if turning else "cv", speed, rng.uniform(-0.3, 0.3) if turning else 0.0)
        traj = np.array([_object_state(info, p0, yaw0, t)[0] for t in times])
        radius = np.hypot(size[0], size[1]) / 2
        if np.min(np.linalg.norm(traj[:, :2] - ego_path[:, :2], axis=1)) < radius + 3.0:
            continue
        if any(
            np.min(np.linalg.norm(traj[:, :2] - other[:, :2], axis=1)) < radius + 3.5 for other in trajectories
        ):
            continue
        seen = any(project_points(p0_ego[None], c)[2][0] for c in cams)
        if not seen:
            continue
        tracks.append(info)
        inits.append((p0, yaw0))
        trajectories.append(traj)

    # static obstacles, kept off the ego path and object trajectories
    obstacles: list[Obstacle] = []
    n_obst = int(rng.integers(4, 7))
    attempts = 0
    while len(obstacles) < n_obst and attempts < 5000:
        attempts += 1
        kind = rng.integers(3)
        size = [(0.4, 0.4, 3.0), (0.5, 4.0, 2.5), (2.0, 2.0, 2.0)][kind]
        az = rng.uniform(-np.pi, np.pi)
        r = rng.uniform(10.0, 26.0)
        c = ego_poses[0].apply(np.array([r * np.cos(az), r * np.sin(az), size[2] / 2]))
        radius = np.hypot(size[0], size[1]) / 2
        if np.min(np.linalg.norm(ego_path[:, :2] - c[:2], axis=1)) < radius + 4.0:
            continue
        if any(np.min(np.linalg.norm(tr[:, :2] - c[:2], axis=1)) < radius + 4.0 for tr in trajectories):
            continue
        if any(np.linalg.norm(o.center[:2] - c[:2]) < radius + 3.0 for o in obstacles):
            continue
        obstacles.append(Obstacle(c, size, rng.uniform(-np.pi, np.pi)))

    frames = []
    for k, t in enumerate(times):
        pose = ego_poses[k]
        inv = pose.inverse()
        boxes = []
        for info, (p0, yaw0) in zip(tracks, inits):
            pos, yaw, vel = _object_state(info, p0, yaw0, t)
            boxes.append(
                GtBox(inv.apply(pos), CLASS_SIZES[info.class_id], yaw - pose.yaw, inv.rotate(vel), info.class_id, info.track_id, k)
            )
        obst_ego = [Obstacle(inv.apply(o.center), o.size, wrap_angle(o.yaw - pose.yaw)) for o in obstacles]
        pts, tags = _sample_lidar(rng, boxes, obst_ego, config.n_lidar)
        frames.append(Frame(k, float(t), pose, list(cams), pts, tags, boxes, obst_ego))
    return Scene(config, frames, obstacles, tracks)


def _sample_lidar(rng, boxes: list[GtBox], obstacles: list[Obstacle], n_total: int):
    n_obj = int(0.2 * n_total) if boxes else 0
    n_obs = int(0.25 * n_total) if obstacles else 0
    n_ground = n_total - n_obj - n_obs
    r = rng.uniform(2.0, 30.0, size=n_ground)
    th = rng.uniform(-np.pi, np.pi, size=n_ground)
    ground = np.stack([r * np.cos(th), r * np.sin(th), np.zeros(n_ground)], axis=1)
    covered = np.zeros(n_ground, dtype=bool)
    for b in boxes:
        covered |= points_in_box(ground, b.center, b.size, b.yaw, inflate=0.1)
    for o in obstacles:
        covered |= points_in_box(ground, o.center, o.size, o.yaw, inflate=0.1)
    parts = [ground[~covered]]
    tags = [np.full((~covered).sum(), STATIC)]
    if obstacles:
        areas = np.array([_box_area(o.size) for o in obstacles])
        counts = rng.multinomial(n_obs, areas / areas.sum())
        for o, n in zip(obstacles, counts):
            parts.append(_sample_box_surface(rng, o.center, o.size, o.yaw, n))
            tags.append(np.full(n, STATIC))
    if boxes:
        areas = np.array([_box_area(b.size) for b in boxes])
        counts = rng.multinomial(n_obj, areas / areas.sum())
        for b, n in zip(boxes, counts):
            parts.append(_sample_box_surface(rng, b.center, b.size, b.yaw, n))
            tags.append(np.full(n, b.track_id))
    pts = np.concatenate(parts).astype(np.float32).astype(np.float64)
    return pts, np.concatenate(tags).astype(np.int64)


# ---------------------------------------------------------------------------
# ray casting against the analytic scene


def raycast(frame: Frame, cam: CameraModel, uv: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """First surface hit along the pixel rays ``uv`` (N×2).

    Returns ``(depth, surface_tag, box_index, hit_points)``: depth is the camera z
    of the hit (``inf`` for sky), ``box_index`` indexes ``frame.gt_boxes`` for
    object hits and is ``-1`` otherwise, hit points are in the ego frame.
    """
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    origin, dirs = camera_rays(uv, cam)
    n = len(uv)
    depth = np.full(n, np.inf)
    tag = np.full(n, TAG_SKY, dtype=np.int64)
    box_idx = np.full(n, -1, dtype=np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        tg = np.where(dirs[:, 2] < 0, -origin[2] / dirs[:, 2], np.inf)
    hit = tg < depth
    depth = np.where(hit, tg, depth)
    tag = np.where(hit, TAG_GROUND, tag)
    for o in frame.obstacles:
        t = ray_box_depth(origin, dirs, o.center, o.size, o.yaw)
        hit = t < depth
        depth = np.where(hit, t, depth)
        tag = np.where(hit, TAG_OBSTACLE, tag)
        box_idx = np.where(hit, -1, box_idx)
    for i, b in enumerate(frame.gt_boxes):
        t = ray_box_depth(origin, dirs, b.center, b.size, b.yaw)
        hit = t < depth
        depth = np.where(hit, t, depth)
        tag = np.where(hit, b.class_id, tag)
        box_idx = np.where(hit, i, box_idx)
    finite = np.isfinite(depth)
    pts = np.where(finite[:, None], origin + dirs * np.where(finite, depth, 0.0)[:, None], np.nan)
    return depth, tag, box_idx, pts


def render_depth(frame: Frame, cam_index: int, scale: float = 1.0) -> np.ndarray:
    """Depth image at the pixel centres of an image/feature map at ``scale``."""
    cam = frame.cameras[cam_index].scaled(scale) if scale != 1.0 else frame.cameras[cam_index]
    vv, uu = np.meshgrid(np.arange(cam.height), np.arange(cam.width), indexing="ij")
    uv = np.stack([uu.ravel(), vv.ravel()], axis=1).astype(np.float64)
    depth, _, _, _ = raycast(frame, cam, uv)
    return depth.reshape(cam.height, cam.width)


# ---------------------------------------------------------------------------
# dataset I/O


def _pose_to_list(p: Pose) -> list:
    return p.as_matrix().tolist()


def _camera_to_dict(c: CameraModel) -> dict:
    return {
        "fx": c.fx,
        "fy": c.fy,
        "cx": c.cx,
        "cy": c.cy,
        "width": c.width,
        "height": c.height,
        "camera_from_ego": _pose_to_list(c.extrinsics),
    }


def _camera_from_dict(d: dict) -> CameraModel:
    return CameraModel(d["fx"], d["fy"], d["cx"], d["cy"], Pose.from_matrix(np.array(d["camera_from_ego"])), d["width"], d["height"])


def write_dataset(scene: Scene, path: str | Path, render: bool = True) -> Path:
    """Write ``scene.json`` plus binary arrays (see module docs of :mod:`container`)."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    arrays: dict[str, tuple[np.ndarray, str]] = {}
    for f in scene.frames:
        lid = np.concatenate([f.lidar_points, f.lidar_tags[:, None].astype(np.float64)], axis=1)
        arrays[f"frames/{f.index}/lidar.bin"] = (lid, "f4")
        if render:
            for i in range(len(f.cameras)):
                d = render_depth(f, i)
                arrays[f"frames/{f.index}/cam{i}.bin"] = (np.where(np.isfinite(d), d, 0.0), "f4")
    rows = [b.as_row() for f in scene.frames for b in f.gt_boxes]
    arrays["gt.bin"] = (np.array(rows) if rows else np.zeros((1, 13)) * np.nan, "f8")
    checksums = write_array_set(root, arrays)
    cfg = asdict(scene.config)
    cfg["grid"] = asdict(scene.config.grid)
    manifest = {
        "kind": SCENE_KIND,
        "version": SCENE_VERSION,
        "config": cfg,
        "n_gt_rows": len(rows),
        "cameras": [_camera_to_dict(c) for c in scene.frames[0].cameras],
        "frames": [{"index": f.index, "timestamp": f.timestamp, "ego_pose": _pose_to_list(f.ego_pose)} for f in scene.frames],
        "obstacles": [{"center": o.center.tolist(), "size": list(o.size), "yaw": o.yaw} for o in scene.obstacles],
        "tracks": [asdict(t) for t in scene.tracks],
        "files": checksums,
        "rendered": render,
    }
    write_manifest(root / "scene.json", manifest)
    return root


def read_dataset(path: str | Path) -> Scene:
    root = Path(path)
    manifest = read_manifest(root / "scene.json", SCENE_KIND, SCENE_VERSION)
    verify_files(root, manifest["files"])
    cfg = dict(manifest["config"])
    grid = cfg.pop("grid")
    config = SceneConfig(**cfg, grid=BevGridSpec(tuple(grid["x_range"]), tuple(grid["y_range"]), grid["resolution"]))
    cams = [_camera_from_dict(d) for d in manifest["cameras"]]
    obstacles = [Obstacle(o["center"], o["size"], o["yaw"]) for o in manifest["obstacles"]]
    tracks = [TrackInfo(**t) for t in manifest["tracks"]]
    gt = read_array(root / "gt.bin", manifest["files"]["gt.bin"])
    n_rows = manifest["n_gt_rows"]
    gt = gt[:n_rows]
    frames = []
    for fd in manifest["frames"]:
        k = fd["index"]
        rel = f"frames/{k}/lidar.bin"
        lid = read_array(root / rel, manifest["files"][rel]).astype(np.float64)
        pose = Pose.from_matrix(np.array(fd["ego_pose"]))
        inv = pose.inverse()
        boxes = [GtBox.from_row(r) for r in gt if int(r[0]) == k]
        obst_ego = [Obstacle(inv.apply(o.center), o.size, wrap_angle(o.yaw - pose.yaw)) for o in obstacles]
        frames.append(Frame(k, fd["timestamp"], pose, list(cams), lid[:, :3].copy(), lid[:, 3].astype(np.int64), boxes, obst_ego))
    return Scene(config, frames, obstacles, tracks)


def boxes_global(scene: Scene, track_id: int) -> list[tuple[int, np.ndarray, float]]:
    """(frame, global centre, global yaw) for every frame the track appears in."""
    out = []
    for f in scene.frames:
        b = f.box(track_id)
        if b is not None:
            out.append((f.index, f.ego_pose.apply(b.center), wrap_angle(b.yaw + f.ego_pose.yaw)))
    return out
