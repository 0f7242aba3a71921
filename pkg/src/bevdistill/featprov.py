"""Per-pixel foundation-style features for camera images.

:class:`ProceduralFeatureProvider` stands in for a frozen ViT ensemble. A pixel's
feature is built from the surface its ray hits:

    f = normalize(0.9 * e_tag + 0.4 * s(p) + noise)

``e_tag`` is an orthonormal embedding of the surface tag (object class, ground,
obstacle, sky), ``s(p)`` a unit-norm random-Fourier field of the hit point
(global coordinates for static surfaces, box coordinates for objects, so an
object's features travel with it) and ``noise`` a small deterministic jitter.
Tag and field live in orthogonal subspaces, which bounds the cosine between
different tags by 0.4²/(0.9² + 0.4²) ≈ 0.165.

:class:`FileFeatureProvider` reads externally computed maps from disk instead.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np

from .container import read_array, write_array
from .geometry import camera_rays, to_box_frame
from .scene import N_SURFACE_TAGS, TAG_SKY, Frame, raycast

SCALES = (1 / 4, 1 / 8, 1 / 16, 1 / 32)


def scale_tag(scale: float) -> str:
    return f"s{int(round(1 / scale))}"


@dataclass
class FeatureMap:
    camera: int
    scale: float
    grid: np.ndarray  # Hs × Ws × C

    @property
    def channels(self) -> int:
        return self.grid.shape[-1]


class FeatureProvider(Protocol):
    channels: int

    def compute_features(self, frame: Frame, cam_index: int, scale: float) -> FeatureMap: ...


def _lattice_uv(h: int, w: int) -> np.ndarray:
    vv, uu = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return np.stack([uu.ravel(), vv.ravel()], axis=1).astype(np.float64)


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


class ProceduralFeatureProvider:
    def __init__(
        self,
        seed: int = 0,
        channels: int = 16,
        noise: float = 0.01,
        static_wavelength: float = 8.0,
        object_wavelength: float = 2.0,
    ):
        if channels < N_SURFACE_TAGS + 2:
            raise ValueError(f"need at least {N_SURFACE_TAGS + 2} channels")
        self.seed = int(seed)
        self.channels = channels
        self.noise = noise
        rng = np.random.default_rng([self.seed, 0xFEA7])
        q, _ = np.linalg.qr(rng.normal(size=(channels, channels)))
        self._tag_basis = q[:, :N_SURFACE_TAGS].T  # tags × C
        self._field_basis = q[:, N_SURFACE_TAGS:].T  # (C - tags) × C
        k = channels - N_SURFACE_TAGS
        self._freq_static = rng.normal(size=(k, 3)) * (2 * np.pi / static_wavelength)
        self._freq_object = rng.normal(size=(k, 3)) * (2 * np.pi / object_wavelength)
        self._phase = rng.uniform(0, 2 * np.pi, size=k)

    def _field(self, coords: np.ndarray, freq: np.ndarray) -> np.ndarray:
        return _unit(np.sin(coords @ freq.T + self._phase))

    def clean_features(self, tags: np.ndarray, coords: np.ndarray, is_object: np.ndarray) -> np.ndarray:
        """Noise-free features for surface ``tags`` at field coordinates ``coords``."""
        field_static = self._field(coords, self._freq_static)
        field_object = self._field(coords, self._freq_object)
        fld = np.where(is_object[:, None], field_object, field_static)
        f = 0.9 * self._tag_basis[tags] + 0.4 * fld @ self._field_basis
        return _unit(f)

    def _noise(self, frame_index: int, cam_index: int, scale: float, n: int) -> np.ndarray:
        key = zlib.crc32(f"{frame_index}/{cam_index}/{scale_tag(scale)}".encode())
        rng = np.random.default_rng([self.seed, 0x5EED, key])
        return rng.normal(scale=self.noise, size=(n, self.channels))

    def features_for_rays(self, frame: Frame, cam, uv: np.ndarray) -> np.ndarray:
        depth, tag, box_idx, pts = raycast(frame, cam, uv)
        coords = np.zeros((len(uv), 3))
        is_obj = box_idx >= 0
        static = ~is_obj & (tag != TAG_SKY)
        if static.any():
            coords[static] = frame.ego_pose.apply(pts[static])
        for i, b in enumerate(frame.gt_boxes):
            m = box_idx == i
            if m.any():
                coords[m] = to_box_frame(pts[m], b.center, b.yaw)
        sky = tag == TAG_SKY
        if sky.any():
            _, dirs = camera_rays(uv[sky], cam)
            coords[sky] = 50.0 * _unit(frame.ego_pose.rotate(dirs))
        return self.clean_features(tag, coords, is_obj)

    def compute_features(self, frame: Frame, cam_index: int, scale: float) -> FeatureMap:
        cam = frame.cameras[cam_index].scaled(scale)
        uv = _lattice_uv(cam.height, cam.width)
        f = self.features_for_rays(frame, cam, uv)
        f = _unit(f + self._noise(frame.index, cam_index, scale, len(uv)))
        return FeatureMap(cam_index, scale, f.reshape(cam.height, cam.width, self.channels))


class BackboneStub:
    """Procedural "image backbone": a fixed random mix of foundation features plus noise.

    The network never sees the foundation features directly; it sees this
    noisier, rotated version, so distillation has something to add.
    """

    def __init__(self, provider: FeatureProvider, seed: int = 0, channels: int = 16, noise: float = 0.05):
        self.provider = provider
        self.channels = channels
        self.noise = noise
        self.seed = int(seed)
        rng = np.random.default_rng([self.seed, 0xBAC4])
        self._mix = rng.normal(size=(provider.channels, channels)) / np.sqrt(provider.channels)

    def compute_features(self, frame: Frame, cam_index: int, scale: float) -> FeatureMap:
        base = self.provider.compute_features(frame, cam_index, scale).grid
        key = zlib.crc32(f"bb/{frame.index}/{cam_index}/{scale_tag(scale)}".encode())
        rng = np.random.default_rng([self.seed, key])
        out = base @ self._mix + rng.normal(scale=self.noise, size=base.shape[:-1] + (self.channels,))
        return FeatureMap(cam_index, scale, out)


class FileFeatureProvider:
    """Reads ``features/<frame>/cam<i>_<scale>.bin`` maps written by :func:`write_feature_files`."""

    def __init__(self, root: str | Path, channels: int):
        self.root = Path(root)
        self.channels = channels

    def path(self, frame_index: int, cam_index: int, scale: float) -> Path:
        return self.root / "features" / str(frame_index) / f"cam{cam_index}_{scale_tag(scale)}.bin"

    def compute_features(self, frame: Frame, cam_index: int, scale: float) -> FeatureMap:
        grid = read_array(self.path(frame.index, cam_index, scale)).astype(np.float64)
        if grid.shape[-1] != self.channels:
            raise ValueError(f"feature file has {grid.shape[-1]} channels, expected {self.channels}")
        return FeatureMap(cam_index, scale, grid)


def write_feature_files(root: str | Path, frames, provider: FeatureProvider, scales=SCALES) -> None:
    target = FileFeatureProvider(root, provider.channels)
    for f in frames:
        for i in range(len(f.cameras)):
            for s in scales:
                write_array(target.path(f.index, i, s), provider.compute_features(f, i, s).grid, "f4")
