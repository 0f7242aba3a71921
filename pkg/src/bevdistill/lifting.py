"""Camera-to-BEV network: depth distribution, outer-product lifting, BEV pooling and encoder.

Per camera, image features at the lifting scale are projected to ``C``
channels (``F_PV``), a per-pixel perceptron predicts a softmax over ``D``
uniform depth bins, and the frustum tensor is the outer product of the two.
Every frustum sample has a fixed ego position (the unprojected bin centre);
samples are summed into the BEV cell that contains them. A two-block residual
3×3 convolution stack encodes the pooled grid, and a linear head maps it to the
pseudo-label channel count for distillation.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .featprov import SCALES, FeatureMap
from .geometry import BevGridSpec, CameraModel, unproject_points
from .numerics import Tensor
from .params import ParamStore


@dataclass
class LiftConfig:
    channels: int = 32
    image_channels: int = 16
    depth_bins: int = 32
    depth_range: tuple[float, float] = (1.0, 60.0)
    lift_scale: float = 1 / 8
    scales: tuple[float, ...] = SCALES
    depth_hidden: int = 32
    n_res_blocks: int = 2
    distill_channels: int = 16
    # Optional refinement of the depth distribution (a CRF would go here); identity by default.
    depth_refine: Callable[[Tensor], Tensor] | None = field(default=None, repr=False)

    def validate(self) -> None:
        if self.depth_bins < 2:
            raise ValueError("need at least 2 depth bins")
        if not 0 < self.depth_range[0] < self.depth_range[1]:
            raise ValueError("depth range must be positive and increasing")
        if self.lift_scale not in self.scales:
            raise ValueError("lifting scale must be one of the PV scales")


@dataclass
class DepthBins:
    near: float
    far: float
    n: int

    @property
    def edges(self) -> np.ndarray:
        return np.linspace(self.near, self.far, self.n + 1)

    @property
    def centers(self) -> np.ndarray:
        e = self.edges
        return 0.5 * (e[:-1] + e[1:])

    @property
    def width(self) -> float:
        return (self.far - self.near) / self.n

    def index(self, depth: np.ndarray) -> np.ndarray:
        """Bin index per depth, ``-1`` outside ``[near, far)``."""
        d = np.asarray(depth, dtype=np.float64)
        k = np.floor((d - self.near) / self.width)
        ok = (k >= 0) & (k < self.n)
        return np.where(ok, k, -1).astype(np.int64)


@dataclass
class FrustumFeatures:
    values: Tensor  # D × H × W × C
    positions: np.ndarray  # D × H × W × 3, ego frame


def pixel_lattice(h: int, w: int) -> np.ndarray:
    """``(H·W)×2`` pixel centres (u, v), row-major."""
    vv, uu = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return np.stack([uu.ravel(), vv.ravel()], axis=1).astype(np.float64)


def frustum_positions(cam: CameraModel, bins: DepthBins) -> np.ndarray:
    """Ego position of every (d, v, u) sample of a feature-resolution camera."""
    uv = pixel_lattice(cam.height, cam.width)
    d = bins.centers
    pts = unproject_points(np.tile(uv, (len(d), 1)), np.repeat(d, len(uv)), cam)
    return pts.reshape(len(d), cam.height, cam.width, 3)


def lift(pv: Tensor, depth: Tensor) -> Tensor:
    """Outer product ``out[d, v, u, c] = depth[v, u, d] * pv[v, u, c]``.

    ``pv`` is ``H×W×C`` and ``depth`` is ``H×W×D``.
    """
    pv, depth = nx.as_tensor(pv), nx.as_tensor(depth)
    if pv.ndim != 3 or depth.ndim != 3 or pv.shape[:2] != depth.shape[:2]:
        raise ValueError(f"lift shape mismatch: features {pv.shape}, depth {depth.shape}")
    h, w, c = pv.shape
    d = depth.shape[2]
    prod = nx.reshape(depth, (h, w, d, 1)) * nx.reshape(pv, (h, w, 1, c))
    return nx.transpose(prod, (2, 0, 1, 3))


def bev_pool(frustums: Sequence[FrustumFeatures], grid: BevGridSpec) -> Tensor:
    """Sum every frustum sample into the BEV cell holding its (x, y); out-of-grid samples drop.

    Accumulation runs camera by camera in (d, v, u) order.
    """
    if not frustums:
        raise ValueError("bev_pool needs at least one frustum")
    c = frustums[0].values.shape[-1]
    vals = nx.concat([nx.reshape(f.values, (-1, c)) for f in frustums], axis=0)
    idx = np.concatenate([grid.cell_index(f.positions.reshape(-1, 3)[:, :2]) for f in frustums])
    pooled = nx.scatter_sum(vals, idx, grid.n_cells)
    return nx.reshape(pooled, (grid.resolution, grid.resolution, c))


def lift_pool(pv: Tensor, depth: Tensor, positions: np.ndarray, grid: BevGridSpec) -> Tensor:
    """``bev_pool([lift(pv, depth)])`` without materialising the frustum.

    Pooling is linear in each pixel's feature, so the pooled grid equals
    ``S @ F_PV`` where ``S[cell, pixel]`` sums that pixel's depth probabilities
    over the bins landing in ``cell``. ``S`` is built by a scalar scatter.
    Returns ``res²×C``. Summation order differs from :func:`bev_pool`, so the
    two agree to round-off rather than bitwise.
    """
    h, w, c = pv.shape
    d = depth.shape[-1]
    n_pix = h * w
    cells = grid.cell_index(positions.reshape(-1, 3)[:, :2]).reshape(d, n_pix).T  # pixel-major
    pix = np.broadcast_to(np.arange(n_pix)[:, None], (n_pix, d))
    flat = np.where(cells >= 0, cells * n_pix + pix, -1).reshape(-1)
    s = nx.scatter_sum(nx.reshape(depth, (n_pix * d, 1)), flat, grid.n_cells * n_pix)
    return nx.matmul(nx.reshape(s, (grid.n_cells, n_pix)), nx.reshape(pv, (n_pix, c)))


def conv_neighbor_index(res: int) -> np.ndarray:
    """``res²×9`` flat indices of each cell's 3×3 neighbourhood; ``res²`` marks zero padding."""
    r, c = np.meshgrid(np.arange(res), np.arange(res), indexing="ij")
    out = []
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            rr, cc = r + dr, c + dc
            ok = (rr >= 0) & (rr < res) & (cc >= 0) & (cc < res)
            out.append(np.where(ok, rr * res + cc, res * res).ravel())
    return np.stack(out, axis=1).astype(np.int64)


def conv3x3(x: Tensor, weight: Tensor, bias: Tensor | None, neighbors: np.ndarray) -> Tensor:
    """Same-padded 3×3 convolution of an ``R×R×C`` grid; ``weight`` is ``9C×C_out``."""
    res, _, c = x.shape
    flat = nx.reshape(x, (res * res, c))
    padded = nx.concat([flat, Tensor(np.zeros((1, c)))], axis=0)
    cols = nx.reshape(nx.take_rows(padded, neighbors.reshape(-1)), (res * res, 9 * c))
    y = nx.linear(cols, weight, bias)
    return nx.reshape(y, (res, res, weight.shape[1]))


class BevEncoder:
    """Residual blocks ``x + conv(relu(conv(x)))``; zero conv weights give the identity."""

    def __init__(self, params: ParamStore, channels: int, n_blocks: int = 2, prefix: str = "bev_enc"):
        self.params = params
        self.channels = channels
        self.names = []
        for b in range(n_blocks):
            names = tuple(f"{prefix}.{b}.{k}" for k in ("w1", "b1", "w2", "b2"))
            params.glorot(names[0], 9 * channels, channels, gain=0.5)
            params.zeros(names[1], (channels,))
            params.glorot(names[2], 9 * channels, channels, gain=0.5)
            params.zeros(names[3], (channels,))
            self.names.append(names)
        self._neighbors: dict[int, np.ndarray] = {}

    def neighbors(self, res: int) -> np.ndarray:
        if res not in self._neighbors:
            self._neighbors[res] = conv_neighbor_index(res)
        return self._neighbors[res]

    def __call__(self, x: Tensor) -> Tensor:
        nb = self.neighbors(x.shape[0])
        p = self.params
        for w1, b1, w2, b2 in self.names:
            h = nx.relu(conv3x3(x, p[w1], p[b1], nb))
            x = x + conv3x3(h, p[w2], p[b2], nb)
        return x


@dataclass
class BevNetOutput:
    pv: list[dict[float, Tensor]]  # per camera: scale -> Hs × Ws × C
    depth_logits: list[Tensor]  # per camera: H·W × D at the lifting scale
    depth_probs: list[Tensor]
    aux_depth: list[Tensor]  # per camera: H·W scalar depth (m)
    frustum_positions: list[np.ndarray]  # per camera: D × H × W × 3
    bev_pooled: Tensor | None
    bev: Tensor | None
    distill_pred: Tensor | None


class BevNet:
    """Image features -> F_PV at every scale, depth, lifted and encoded BEV grid.

    Lifting and pooling run fused (:func:`lift_pool`); the explicit
    :func:`lift` + :func:`bev_pool` route is the reference it is tested against.
    """

    def __init__(self, params: ParamStore, cfg: LiftConfig | None = None, grid: BevGridSpec | None = None):
        self.cfg = cfg or LiftConfig()
        self.cfg.validate()
        self.grid = grid or BevGridSpec()
        self.params = params
        self.bins = self.bins_for(self.cfg)
        c, ci, hd = self.cfg.channels, self.cfg.image_channels, self.cfg.depth_hidden
        for s in self.cfg.scales:
            params.glorot(f"pv_proj.{self._tag(s)}.w", ci, c)
            params.zeros(f"pv_proj.{self._tag(s)}.b", (c,))
        params.glorot("depth.w1", c + 2, hd)
        params.zeros("depth.b1", (hd,))
        params.glorot("depth.w2", hd, self.cfg.depth_bins)
        params.zeros("depth.b2", (self.cfg.depth_bins,))
        params.normal("depth_aux.w", (c, 1), 0.01)
        params.add("depth_aux.b", np.full((1,), 0.5 * sum(self.cfg.depth_range)))
        self.encoder = BevEncoder(params, c, self.cfg.n_res_blocks)
        params.glorot("distill_head.w", c, self.cfg.distill_channels)
        params.zeros("distill_head.b", (self.cfg.distill_channels,))

    @staticmethod
    def bins_for(cfg: LiftConfig) -> DepthBins:
        return DepthBins(cfg.depth_range[0], cfg.depth_range[1], cfg.depth_bins)

    @staticmethod
    def _tag(scale: float) -> str:
        return f"s{int(round(1 / scale))}"

    def project_pv(self, fmap: FeatureMap | np.ndarray, scale: float) -> Tensor:
        grid = fmap.grid if isinstance(fmap, FeatureMap) else fmap
        t = self._tag(scale)
        return nx.linear(Tensor(grid), self.params[f"pv_proj.{t}.w"], self.params[f"pv_proj.{t}.b"])

    def depth_head(self, pv: Tensor) -> tuple[Tensor, Tensor]:
        """(logits, probabilities), each ``H·W×D``, from ``[F_PV, normalized pixel coords]``."""
        h, w, c = pv.shape
        uv = pixel_lattice(h, w)
        uvn = np.stack([uv[:, 0] / max(w - 1, 1), uv[:, 1] / max(h - 1, 1)], axis=1) * 2.0 - 1.0
        x = nx.concat([nx.reshape(pv, (h * w, c)), Tensor(uvn)], axis=1)
        p = self.params
        hid = nx.relu(nx.linear(x, p["depth.w1"], p["depth.b1"]))
        logits = nx.linear(hid, p["depth.w2"], p["depth.b2"])
        probs = nx.softmax(logits, axis=1)
        if self.cfg.depth_refine is not None:
            probs = self.cfg.depth_refine(probs)
        return logits, probs

    def aux_depth(self, pv: Tensor) -> Tensor:
        h, w, c = pv.shape
        return nx.reshape(nx.linear(nx.reshape(pv, (h * w, c)), self.params["depth_aux.w"], self.params["depth_aux.b"]), (h * w,))

    def __call__(
        self,
        cameras: Sequence[CameraModel],
        image_features: Sequence[dict[float, np.ndarray]],
        with_bev: bool = True,
    ) -> BevNetOutput:
        """``image_features[cam][scale]`` is an ``Hs×Ws×C_img`` array."""
        pv_all, logits_all, probs_all, aux_all, positions = [], [], [], [], []
        pooled = None
        s = self.cfg.lift_scale
        for cam, feats in zip(cameras, image_features):
            pv = {sc: self.project_pv(feats[sc], sc) for sc in self.cfg.scales}
            pv_all.append(pv)
            if not with_bev:
                continue
            f = pv[s]
            logits, probs = self.depth_head(f)
            h, w, _ = f.shape
            logits_all.append(logits)
            probs_all.append(probs)
            aux_all.append(self.aux_depth(f))
            pos = frustum_positions(cam.scaled(s), self.bins)
            positions.append(pos)
            part = lift_pool(f, nx.reshape(probs, (h, w, self.cfg.depth_bins)), pos, self.grid)
            pooled = part if pooled is None else pooled + part
        if not with_bev:
            return BevNetOutput(pv_all, [], [], [], [], None, None, None)
        res = self.grid.resolution
        pooled = nx.reshape(pooled, (res, res, self.cfg.channels))
        bev = self.encoder(pooled)
        flat = nx.reshape(bev, (res * res, self.cfg.channels))
        pred = nx.linear(flat, self.params["distill_head.w"], self.params["distill_head.b"])
        pred = nx.reshape(pred, (res, res, self.cfg.distill_channels))
        return BevNetOutput(pv_all, logits_all, probs_all, aux_all, positions, pooled, bev, pred)
