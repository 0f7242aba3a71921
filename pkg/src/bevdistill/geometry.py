"""Rigid poses, pinhole cameras, BEV grids and oriented boxes.

Conventions used throughout the package:

* ego frame: x forward, y left, z up (metres);
* camera frame: x right, y down, z along the optical axis;
* pixel centres sit on integer coordinates, so an image of width ``W`` spans
  ``u`` in ``[0, W-1]`` for sampling purposes;
* boxes carry ``size = (w, l, h)`` with ``l`` along the heading (box x axis),
  ``w`` along box y and ``h`` along z.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

EPS_DEPTH = 1e-6
_ORTHO_TOL = 1e-9


def rot_z(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    w = np.mod(np.asarray(a, dtype=np.float64) + np.pi, 2 * np.pi) - np.pi
    w = np.where(w == -np.pi, np.pi, w)
    return float(w) if np.ndim(w) == 0 else w


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform ``x -> R x + t`` (maps child-frame points into the parent frame)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if np.max(np.abs(r.T @ r - np.eye(3))) > _ORTHO_TOL or abs(np.linalg.det(r) - 1.0) > _ORTHO_TOL:
            raise ValueError("rotation must be orthonormal with det +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_yaw(cls, yaw: float, translation=(0.0, 0.0, 0.0)) -> "Pose":
        return cls(rot_z(yaw), np.asarray(translation, dtype=np.float64))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @property
    def yaw(self) -> float:
        return float(np.arctan2(self.rotation[1, 0], self.rotation[0, 0]))

    def apply(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def rotate(self, vectors: np.ndarray) -> np.ndarray:
        return np.asarray(vectors, dtype=np.float64) @ self.rotation.T

    def compose(self, other: "Pose") -> "Pose":
        """``self ∘ other``: apply ``other`` first."""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def allclose(self, other: "Pose", atol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, atol=atol, rtol=0)
            and np.allclose(self.translation, other.translation, atol=atol, rtol=0)
        )


def compose(a: Pose, b: Pose) -> Pose:
    return a.compose(b)


def invert(a: Pose) -> Pose:
    return a.inverse()


@dataclass(frozen=True, eq=False)
class CameraModel:
    """Pinhole camera.

    ``extrinsics`` maps ego points into the camera frame. ``ego_transform`` is an
    optional linear map applied to the ego frame by BEV augmentation (rotation,
    scale, flip): an augmented ego point ``p'`` corresponds to ``A^-1 p'`` in the
    frame the extrinsics were calibrated in.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    extrinsics: Pose
    width: int
    height: int
    ego_transform: np.ndarray | None = field(default=None)

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        if self.ego_transform is not None:
            a = np.asarray(self.ego_transform, dtype=np.float64).reshape(3, 3)
            object.__setattr__(self, "ego_transform", a)

    @property
    def intrinsic_matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def ego_to_camera(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        if self.ego_transform is not None:
            p = np.linalg.solve(self.ego_transform, p.reshape(-1, 3).T).T.reshape(p.shape)
        return self.extrinsics.apply(p)

    def camera_to_ego(self, points: np.ndarray) -> np.ndarray:
        p = self.extrinsics.inverse().apply(points)
        if self.ego_transform is not None:
            p = p @ self.ego_transform.T
        return p

    def center_in_ego(self) -> np.ndarray:
        return self.camera_to_ego(np.zeros(3))

    def camera_ego_linear(self) -> tuple[np.ndarray, np.ndarray]:
        """(M, t) with camera = M @ ego + t; the autodiff path projects with these."""
        m = self.extrinsics.rotation
        if self.ego_transform is not None:
            m = m @ np.linalg.inv(self.ego_transform)
        return m, self.extrinsics.translation

    def with_ego_transform(self, a: np.ndarray) -> "CameraModel":
        """Camera for an ego frame that was mapped by the linear transform ``a``."""
        total = a if self.ego_transform is None else a @ self.ego_transform
        return CameraModel(self.fx, self.fy, self.cx, self.cy, self.extrinsics, self.width, self.height, total)

    def scaled(self, scale: float) -> "CameraModel":
        """Intrinsics for a feature map at ``scale`` of the image (pixel centres preserved)."""
        w = int(np.ceil(self.width * scale))
        h = int(np.ceil(self.height * scale))
        return CameraModel(
            self.fx * scale,
            self.fy * scale,
            (self.cx + 0.5) * scale - 0.5,
            (self.cy + 0.5) * scale - 0.5,
            self.extrinsics,
            w,
            h,
            self.ego_transform,
        )


def project_points(points: np.ndarray, cam: CameraModel) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised projection: returns ``(uv N×2, depth N, in_view N)``."""
    pc = cam.ego_to_camera(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    depth = pc[:, 2]
    front = depth > EPS_DEPTH
    safe = np.where(front, depth, 1.0)
    u = cam.fx * pc[:, 0] / safe + cam.cx
    v = cam.fy * pc[:, 1] / safe + cam.cy
    in_view = front & (u >= 0) & (u <= cam.width - 1) & (v >= 0) & (v <= cam.height - 1)
    return np.stack([u, v], axis=1), depth, in_view


def project(p, cam: CameraModel) -> tuple[float, float, float] | None:
    """Project one ego point; ``None`` means out of view."""
    uv, depth, ok = project_points(np.asarray(p, dtype=np.float64).reshape(1, 3), cam)
    if not ok[0]:
        return None
    return float(uv[0, 0]), float(uv[0, 1]), float(depth[0])


def unproject_points(uv: np.ndarray, depth: np.ndarray, cam: CameraModel) -> np.ndarray:
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    d = np.asarray(depth, dtype=np.float64).reshape(-1)
    if np.any(d <= 0):
        raise ValueError("unproject needs positive depth")
    pc = np.stack([(uv[:, 0] - cam.cx) / cam.fx * d, (uv[:, 1] - cam.cy) / cam.fy * d, d], axis=1)
    return cam.camera_to_ego(pc)


def unproject(u: float, v: float, depth: float, cam: CameraModel) -> np.ndarray:
    return unproject_points(np.array([[u, v]]), np.array([depth]), cam)[0]


def camera_rays(uv: np.ndarray, cam: CameraModel) -> tuple[np.ndarray, np.ndarray]:
    """Ego-frame origin and directions scaled so that the ray parameter equals camera depth."""
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    pc = np.stack([(uv[:, 0] - cam.cx) / cam.fx, (uv[:, 1] - cam.cy) / cam.fy, np.ones(len(uv))], axis=1)
    origin = cam.center_in_ego()
    return origin, cam.camera_to_ego(pc) - origin


@dataclass(frozen=True)
class BevGridSpec:
    """Square-cell BEV grid; rows index x, columns index y."""

    x_range: tuple[float, float] = (-24.0, 24.0)
    y_range: tuple[float, float] = (-24.0, 24.0)
    resolution: int = 32

    def __post_init__(self):
        if self.resolution < 2:
            raise ValueError("resolution must be >= 2")
        if not (self.x_range[1] > self.x_range[0] and self.y_range[1] > self.y_range[0]):
            raise ValueError("empty grid extent")

    @property
    def cell_size(self) -> tuple[float, float]:
        return (
            (self.x_range[1] - self.x_range[0]) / self.resolution,
            (self.y_range[1] - self.y_range[0]) / self.resolution,
        )

    @property
    def n_cells(self) -> int:
        return self.resolution * self.resolution

    def cell_index(self, xy: np.ndarray) -> np.ndarray:
        """Flat ``row * res + col`` index per point, ``-1`` outside the grid."""
        xy = np.asarray(xy, dtype=np.float64)
        xy = xy.reshape(-1, xy.shape[-1])
        csx, csy = self.cell_size
        ix = np.floor((xy[:, 0] - self.x_range[0]) / csx)
        iy = np.floor((xy[:, 1] - self.y_range[0]) / csy)
        ok = (ix >= 0) & (ix < self.resolution) & (iy >= 0) & (iy < self.resolution)
        flat = np.where(ok, ix * self.resolution + iy, -1)
        return flat.astype(np.int64)

    def continuous_coords(self, xy: np.ndarray) -> np.ndarray:
        """(u, v) = (column, row) sampling coordinates with cell centres on integers."""
        xy = np.asarray(xy, dtype=np.float64)
        csx, csy = self.cell_size
        u = (xy[..., 1] - self.y_range[0]) / csy - 0.5
        v = (xy[..., 0] - self.x_range[0]) / csx - 0.5
        return np.stack([u, v], axis=-1)

    def cell_centers(self) -> np.ndarray:
        """``res×res×2`` array of (x, y) cell centres."""
        csx, csy = self.cell_size
        xs = self.x_range[0] + (np.arange(self.resolution) + 0.5) * csx
        ys = self.y_range[0] + (np.arange(self.resolution) + 0.5) * csy
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        return np.stack([gx, gy], axis=-1)


# ---------------------------------------------------------------------------
# oriented boxes


def box_pose(center, yaw: float) -> Pose:
    """Pose mapping box-frame points into the frame the box is expressed in."""
    return Pose.from_yaw(yaw, center)


def box_face_centers(center, size, yaw: float) -> np.ndarray:
    """Centre followed by the six face centres, ``7×3``."""
    w, l, h = size
    local = np.array(
        [
            [0, 0, 0],
            [l / 2, 0, 0],
            [-l / 2, 0, 0],
            [0, w / 2, 0],
            [0, -w / 2, 0],
            [0, 0, h / 2],
            [0, 0, -h / 2],
        ],
        dtype=np.float64,
    )
    return box_pose(center, yaw).apply(local)


def box_corners(center, size, yaw: float) -> np.ndarray:
    w, l, h = size
    sx = np.array([1, 1, 1, 1, -1, -1, -1, -1]) * l / 2
    sy = np.array([1, 1, -1, -1, 1, 1, -1, -1]) * w / 2
    sz = np.array([1, -1, 1, -1, 1, -1, 1, -1]) * h / 2
    return box_pose(center, yaw).apply(np.stack([sx, sy, sz], axis=1))


def to_box_frame(points: np.ndarray, center, yaw: float) -> np.ndarray:
    return box_pose(center, yaw).inverse().apply(points)


def points_in_box(points: np.ndarray, center, size, yaw: float, inflate: float = 0.0) -> np.ndarray:
    local = to_box_frame(np.asarray(points, dtype=np.float64).reshape(-1, 3), center, yaw)
    w, l, h = size
    half = np.array([l / 2, w / 2, h / 2]) + inflate
    return np.all(np.abs(local) <= half, axis=1)


def ray_box_depth(origin: np.ndarray, dirs: np.ndarray, center, size, yaw: float) -> np.ndarray:
    """Entry parameter of rays ``origin + t·dir`` into a box (slab test), ``inf`` on a miss."""
    inv = box_pose(center, yaw).inverse()
    o = inv.apply(origin)
    d = inv.rotate(dirs)
    w, l, h = size
    half = np.array([l / 2, w / 2, h / 2])
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - o) / d
        t2 = (half - o) / d
    tmin = np.where(d == 0, np.where(np.abs(o) <= half, -np.inf, np.inf), np.minimum(t1, t2))
    tmax = np.where(d == 0, np.where(np.abs(o) <= half, np.inf, -np.inf), np.maximum(t1, t2))
    t_enter = tmin.max(axis=1)
    t_exit = tmax.min(axis=1)
    hit = (t_enter <= t_exit) & (t_exit > 0)
    t = np.where(t_enter > 0, t_enter, 0.0)
    return np.where(hit, t, np.inf)
