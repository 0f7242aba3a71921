"""Sparse query decoder: anchors, keypoints, BEV and PV deformable aggregation, refinement.

A query is an 11-D anchor

    (x, y, z, ln w, ln h, ln l, sin yaw, cos yaw, vx, vy, vz)

plus a ``C``-dim instance feature. Each block updates the feature residually
(attention, BEV aggregation, PV aggregation, FFN) and then refines the anchor
by an additive residual. Every residual branch ends in an output projection;
zeroing those projections makes a block the identity on features and anchors.
Branches read a layer-normalised copy of the feature (pre-norm), which keeps
the residual stream bounded when features are carried from frame to frame.

The first block has no temporal input. After it, the most confident current
queries are combined with the queries propagated from the previous frame, and
the remaining blocks cross-attend to the propagated queries.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from . import numerics as nx
from .geometry import BevGridSpec, CameraModel
from .numerics import Tensor, _make, as_tensor
from .params import ParamStore

ANCHOR_DIM = 11
X, Y, Z, LOG_W, LOG_H, LOG_L, SIN, COS, VX, VY, VZ = range(ANCHOR_DIM)

# Unit face-centre offsets in the box frame (x along the length, y along the width).
FIXED_KEYPOINTS = np.array(
    [
        [0.0, 0.0, 0.0],
        [0.5, 0.0, 0.0],
        [-0.5, 0.0, 0.0],
        [0.0, 0.5, 0.0],
        [0.0, -0.5, 0.0],
        [0.0, 0.0, 0.5],
        [0.0, 0.0, -0.5],
    ]
)

# Keypoints closer than this to a camera centre (along its axis) are not sampled in that view.
PV_NEAR = 0.1

# Fixed per-field scaling of the anchor before the anchor encoder.
ANCHOR_INPUT_SCALE = np.array([1 / 24, 1 / 24, 1 / 2, 1, 1, 1, 1, 1, 1 / 5, 1 / 5, 1 / 5])


@dataclass
class DecoderConfig:
    n_queries: int = 24
    n_temporal: int = 16
    channels: int = 32
    n_temporal_layers: int = 5
    n_learned_keypoints: int = 6
    n_classes: int = 3
    n_cameras: int = 6
    ffn_hidden: int = 64
    head_hidden: int = 32
    use_bev: bool = True
    use_pv: bool = True
    anchor_grid_extent: float = 20.0
    anchor_z: float = 0.8
    anchor_size: tuple[float, float, float] = (1.2, 1.6, 2.0)  # (w, h, l)
    class_prior: float = 0.01

    @property
    def n_layers(self) -> int:
        return 1 + self.n_temporal_layers

    @property
    def n_keypoints(self) -> int:
        return len(FIXED_KEYPOINTS) + self.n_learned_keypoints

    def validate(self) -> None:
        if self.n_temporal > self.n_queries:
            raise ValueError("n_temporal must not exceed n_queries")
        if self.n_layers < 1 or self.n_queries < 1:
            raise ValueError("need at least one layer and one query")
        if not (self.use_bev or self.use_pv):
            raise ValueError("at least one of BEV and PV aggregation must be enabled")


def box_to_anchor(center, size, yaw: float, velocity=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Box with ``size = (w, l, h)`` to the 11-D anchor vector."""
    w, l, h = size
    return np.array(
        [center[0], center[1], center[2], np.log(w), np.log(h), np.log(l), np.sin(yaw), np.cos(yaw), *velocity],
        dtype=np.float64,
    )


def anchor_to_box(a: np.ndarray) -> tuple[np.ndarray, np.ndarray, float, np.ndarray]:
    """(center, size (w, l, h), yaw, velocity) from an anchor."""
    a = np.asarray(a, dtype=np.float64)
    size = np.exp([a[LOG_W], a[LOG_L], a[LOG_H]])
    return a[:3].copy(), size, float(np.arctan2(a[SIN], a[COS])), a[VX : VZ + 1].copy()


def initial_anchors(cfg: DecoderConfig) -> np.ndarray:
    """Deterministic near-square grid of anchors over the BEV range."""
    m = cfg.n_queries
    rows = int(np.floor(np.sqrt(m)))
    while m % rows:
        rows -= 1
    cols = m // rows
    e = cfg.anchor_grid_extent
    xs = np.linspace(-e, e, rows + 2)[1:-1]
    ys = np.linspace(-e, e, cols + 2)[1:-1]
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    w, h, l = cfg.anchor_size
    out = np.zeros((m, ANCHOR_DIM))
    out[:, X] = gx.ravel()
    out[:, Y] = gy.ravel()
    out[:, Z] = cfg.anchor_z
    out[:, LOG_W : LOG_L + 1] = np.log([w, h, l])
    out[:, COS] = 1.0
    return out


# ---------------------------------------------------------------------------
# differentiable pieces


def renormalize_yaw(a: Tensor, tol: float = 1e-12) -> Tensor:
    """Project (sin, cos) back to the unit circle for rows that left it by more than ``tol``.

    Rows already on the circle pass through bit-for-bit, so an anchor that
    receives a zero residual is an exact fixed point of refinement. The
    gradient is that of ``x / |x|`` on every row, including the pass-through
    ones, so it matches the smooth map the forward pass agrees with.
    """
    a = as_tensor(a)
    yaw = a.data[:, SIN : COS + 1]
    norm = np.sqrt(np.sum(yaw * yaw, axis=1))
    fix = np.abs(norm - 1.0) > tol
    out = a.data.copy()
    unit = yaw / norm[:, None]
    out[fix, SIN : COS + 1] = unit[fix]

    def backward(g):
        g = g.copy()
        gy = g[:, SIN : COS + 1]
        g[:, SIN : COS + 1] = (gy - unit * np.sum(unit * gy, axis=1, keepdims=True)) / norm[:, None]
        return (g,)

    return _make(out, (a,), backward)


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Single-head scaled dot-product attention, ``softmax(q k^T / sqrt(C)) v``."""
    scale = 1.0 / np.sqrt(q.shape[-1])
    w = nx.softmax(nx.matmul(q, nx.transpose(k)) * scale, axis=-1)
    return nx.matmul(w, v)


def _rotate_offsets(anchors: Tensor, offsets: Tensor) -> Tensor:
    """Box-frame ``M×K×3`` offsets to ego points ``center + R(yaw) offset``."""
    m, k, _ = offsets.shape
    s = nx.reshape(anchors[:, SIN], (m, 1))
    c = nx.reshape(anchors[:, COS], (m, 1))
    ox, oy, oz = offsets[:, :, 0], offsets[:, :, 1], offsets[:, :, 2]
    x = nx.reshape(anchors[:, X], (m, 1)) + c * ox - s * oy
    y = nx.reshape(anchors[:, Y], (m, 1)) + s * ox + c * oy
    z = nx.reshape(anchors[:, Z], (m, 1)) + oz
    return nx.stack([x, y, z], axis=2)


def box_extent(anchors: Tensor) -> Tensor:
    """``M×3`` box extents along the box x, y, z axes: (l, w, h)."""
    dims = nx.exp(anchors[:, LOG_W : LOG_L + 1])  # w, h, l
    return nx.stack([dims[:, 2], dims[:, 0], dims[:, 1]], axis=1)


def project_sample(points: Tensor, views: list[tuple[CameraModel, Tensor]]) -> tuple[Tensor, np.ndarray]:
    """Project ``N×3`` ego points into each view and bilinearly sample its feature map.

    ``views`` pairs a camera (intrinsics at the map's resolution) with an
    ``Hs×Ws×C`` map. Returns ``N×V×C`` samples (zero where not visible) and the
    ``N×V`` visibility mask. One fused op: the backward pass chains the bilinear
    derivative through the pinhole Jacobian to the points, and scatters into the
    maps.
    """
    points = as_tensor(points)
    p = points.data
    n = len(p)
    c = views[0][1].shape[-1]
    out = np.zeros((n, len(views), c))
    mask = np.zeros((n, len(views)), dtype=bool)
    saved = []
    for vi, (cam, fmap) in enumerate(views):
        rot, trans = cam.camera_ego_linear()
        pc = p @ rot.T + trans
        z = pc[:, 2]
        front = z > PV_NEAR
        zs = np.where(front, z, 1.0)
        u = cam.fx * pc[:, 0] / zs + cam.cx
        v = cam.fy * pc[:, 1] / zs + cam.cy
        hs, ws = fmap.shape[:2]
        ok = front & (u >= 0) & (u <= ws - 1) & (v >= 0) & (v <= hs - 1)
        mask[:, vi] = ok
        rows = np.flatnonzero(ok)
        if len(rows) == 0:
            saved.append(None)
            continue
        uo, vo = u[rows], v[rows]
        x0, x1, fx = nx._bilinear_setup(ws, uo)
        y0, y1, fy = nx._bilinear_setup(hs, vo)
        flat = fmap.data.reshape(hs * ws, c)
        idx = (y0 * ws + x0, y0 * ws + x1, y1 * ws + x0, y1 * ws + x1)
        f00, f01, f10, f11 = (flat[i] for i in idx)
        wts = ((1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy)
        out[rows, vi] = wts[0][:, None] * f00 + wts[1][:, None] * f01 + wts[2][:, None] * f10 + wts[3][:, None] * f11
        saved.append((rows, idx, wts, (f00, f01, f10, f11), fx, fy, pc[rows], rot, cam.fx, cam.fy, hs, ws))
    maps = tuple(fm for _, fm in views)

    def backward(g):
        gp = np.zeros_like(p)
        gmaps = []
        for vi, (cam, fmap) in enumerate(views):
            sv = saved[vi]
            hs, ws = fmap.shape[:2]
            if sv is None:
                gmaps.append(np.zeros(fmap.shape))
                continue
            rows, idx, wts, fs, fx, fy, pc, rot, fxc, fyc, _, _ = sv
            gv = g[rows, vi]
            if fmap.requires_grad:
                vals = np.concatenate([w[:, None] * gv for w in wts])
                gm = kernels.scatter_add_rows(np.concatenate(idx), np.ascontiguousarray(vals), hs * ws)
                gmaps.append(gm.reshape(fmap.shape))
            else:
                gmaps.append(None)
            if points.requires_grad:
                f00, f01, f10, f11 = fs
                du = ((1 - fy)[:, None] * (f01 - f00) + fy[:, None] * (f11 - f10)) if ws > 1 else 0.0 * f00
                dv = ((1 - fx)[:, None] * (f10 - f00) + fx[:, None] * (f11 - f01)) if hs > 1 else 0.0 * f00
                gu = np.sum(gv * du, axis=1)
                gvv = np.sum(gv * dv, axis=1)
                x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
                gpc = np.stack([gu * fxc / z, gvv * fyc / z, -(gu * fxc * x + gvv * fyc * y) / (z * z)], axis=1)
                np.add.at(gp, rows, gpc @ rot)
        return (gp, *gmaps)

    return _make(out, (points, *maps), backward), mask


@dataclass
class LayerOutput:
    anchors: Tensor  # M × 11 after refinement
    cls_logits: Tensor  # M × n_classes
    quality: Tensor  # M × 2 logits: (centerness, yawness)

    @property
    def confidence(self) -> np.ndarray:
        return nx._stable_sigmoid(self.cls_logits.data).max(axis=1)


@dataclass
class DecodeResult:
    layers: list[LayerOutput]
    features: Tensor  # final instance features
    query_ids: np.ndarray  # internal id per query, -1 for queries born this frame
    n_propagated: int
    selected: np.ndarray  # indices of current queries kept after the first block
    first_layer_confidence: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def final(self) -> LayerOutput:
        return self.layers[-1]


@dataclass
class PVInput:
    """Per-camera PV feature maps for the PV aggregation: ``maps[cam][scale]`` is ``Hs×Ws×C``."""

    cameras: list[CameraModel]
    maps: list[dict[float, Tensor]]


class Decoder:
    def __init__(self, params: ParamStore, cfg: DecoderConfig | None = None, grid: BevGridSpec | None = None, scales=(1 / 4, 1 / 8, 1 / 16, 1 / 32)):
        self.cfg = cfg or DecoderConfig()
        self.cfg.validate()
        self.grid = grid or BevGridSpec()
        self.scales = tuple(scales)
        self.params = params
        c = self.cfg.channels
        p = params
        p.add("query.anchors", initial_anchors(self.cfg))
        p.normal("query.features", (self.cfg.n_queries, c), 0.1)
        p.glorot("anchor_enc.w1", ANCHOR_DIM, c)
        p.zeros("anchor_enc.b1", (c,))
        p.glorot("anchor_enc.w2", c, c)
        p.zeros("anchor_enc.b2", (c,))
        kl = self.cfg.n_learned_keypoints
        for li in range(self.cfg.n_layers):
            pre = f"layer{li}"
            if li > 0:
                for att in ("cross", "self"):
                    for nm in ("wq", "wk", "wv"):
                        p.glorot(f"{pre}.{att}.{nm}", c, c)
                    p.glorot(f"{pre}.{att}.wo", c, c, gain=0.5)
            if kl:
                p.glorot(f"{pre}.kp.w", c, 3 * kl, gain=0.1)
                p.zeros(f"{pre}.kp.b", (3 * kl,))
            if self.cfg.use_bev:
                p.glorot(f"{pre}.bev.wa", c, self.cfg.n_keypoints, gain=0.1)
                p.zeros(f"{pre}.bev.ba", (self.cfg.n_keypoints,))
                p.glorot(f"{pre}.bev.wo", c, c, gain=0.5)
            if self.cfg.use_pv:
                n_views = self.cfg.n_keypoints * len(self.scales) * self.cfg.n_cameras
                p.glorot(f"{pre}.pv.wa", c, n_views, gain=0.1)
                p.zeros(f"{pre}.pv.ba", (n_views,))
                p.glorot(f"{pre}.pv.wo", c, c, gain=0.5)
            p.glorot(f"{pre}.ffn.w1", c, self.cfg.ffn_hidden)
            p.zeros(f"{pre}.ffn.b1", (self.cfg.ffn_hidden,))
            p.glorot(f"{pre}.ffn.w2", self.cfg.ffn_hidden, c, gain=0.5)
            p.zeros(f"{pre}.ffn.b2", (c,))
            hh = self.cfg.head_hidden
            p.glorot(f"{pre}.reg.w1", c, hh)
            p.zeros(f"{pre}.reg.b1", (hh,))
            p.glorot(f"{pre}.reg.w2", hh, ANCHOR_DIM, gain=0.1)
            p.zeros(f"{pre}.reg.b2", (ANCHOR_DIM,))
            p.glorot(f"{pre}.cls.w1", c, hh)
            p.zeros(f"{pre}.cls.b1", (hh,))
            p.glorot(f"{pre}.cls.w2", hh, self.cfg.n_classes, gain=0.1)
            prior = -np.log((1 - self.cfg.class_prior) / self.cfg.class_prior)
            p.add(f"{pre}.cls.b2", np.full((self.cfg.n_classes,), prior))
            p.glorot(f"{pre}.qual.w", c, 2, gain=0.1)
            p.zeros(f"{pre}.qual.b", (2,))

    # -- helpers ------------------------------------------------------------
    def output_projection_names(self) -> list[str]:
        """Parameters that end a residual branch (features) or produce the anchor residual."""
        names = []
        for li in range(self.cfg.n_layers):
            pre = f"layer{li}"
            for suffix in ("cross.wo", "self.wo", "bev.wo", "pv.wo", "ffn.w2", "ffn.b2", "reg.w2", "reg.b2"):
                if f"{pre}.{suffix}" in self.params:
                    names.append(f"{pre}.{suffix}")
        return names

    def zero_output_projections(self) -> None:
        for n in self.output_projection_names():
            self.params[n].data[...] = 0.0

    def encode_anchor(self, anchors: Tensor) -> Tensor:
        p = self.params
        x = as_tensor(anchors) * ANCHOR_INPUT_SCALE
        h = nx.relu(nx.linear(x, p["anchor_enc.w1"], p["anchor_enc.b1"]))
        return nx.linear(h, p["anchor_enc.w2"], p["anchor_enc.b2"])

    def keypoints(self, anchors: Tensor, features: Tensor, layer: int) -> Tensor:
        """``M×K×3`` ego keypoints: centre, six face centres, then learned points."""
        m = anchors.shape[0]
        kl = self.cfg.n_learned_keypoints
        ext = nx.reshape(box_extent(anchors), (m, 1, 3))
        fixed = Tensor(np.broadcast_to(FIXED_KEYPOINTS, (m, len(FIXED_KEYPOINTS), 3)).copy())
        parts = [fixed * ext]
        if kl:
            p = self.params
            raw = nx.linear(nx.layer_norm(features), p[f"layer{layer}.kp.w"], p[f"layer{layer}.kp.b"])
            learned = (nx.sigmoid(nx.reshape(raw, (m, kl, 3))) - 0.5) * ext
            parts.append(learned)
        offsets = nx.concat(parts, axis=1) if len(parts) > 1 else parts[0]
        return _rotate_offsets(anchors, offsets)

    # -- aggregation ----------------------------------------------------------
    def bev_weights(self, features: Tensor, layer: int) -> Tensor:
        p = self.params
        return nx.softmax(nx.linear(nx.layer_norm(features), p[f"layer{layer}.bev.wa"], p[f"layer{layer}.bev.ba"]), axis=1)

    def bev_samples(self, keypoints: Tensor, bev: Tensor) -> Tensor:
        """``M×K×C`` bilinear samples of the BEV grid; keypoints off the sampling lattice give zero."""
        m, k, _ = keypoints.shape
        g = self.grid
        csx, csy = g.cell_size
        flat = nx.reshape(keypoints, (m * k, 3))
        u = (flat[:, 1] - g.y_range[0]) * (1.0 / csy) - 0.5
        v = (flat[:, 0] - g.x_range[0]) * (1.0 / csx) - 0.5
        samples, _ = nx.bilinear_sample(bev, nx.stack([u, v], axis=1))
        return nx.reshape(samples, (m, k, bev.shape[-1]))

    def bev_deform_agg(self, features: Tensor, anchors: Tensor, bev: Tensor, layer: int, keypoints: Tensor | None = None) -> Tensor:
        if keypoints is None:
            keypoints = self.keypoints(anchors, features, layer)
        m, k, _ = keypoints.shape
        w = self.bev_weights(features, layer)
        samples = self.bev_samples(keypoints, bev)
        agg = nx.reshape(nx.matmul(nx.reshape(w, (m, 1, k)), samples), (m, bev.shape[-1]))
        return features + nx.matmul(agg, self.params[f"layer{layer}.bev.wo"])

    def pv_samples(self, keypoints: Tensor, pv: PVInput) -> tuple[Tensor, np.ndarray]:
        """``M×(K·V)×C`` samples over views ``V = cameras × scales`` and the visibility mask."""
        m, k, _ = keypoints.shape
        views = [(cam.scaled(s), maps[s]) for cam, maps in zip(pv.cameras, pv.maps) for s in self.scales]
        samples, mask = project_sample(nx.reshape(keypoints, (m * k, 3)), views)
        n_views = len(views)
        return nx.reshape(samples, (m, k * n_views, samples.shape[-1])), mask.reshape(m, k * n_views)

    def pv_samples_reference(self, keypoints: Tensor, pv: PVInput) -> tuple[Tensor, np.ndarray]:
        """Same as :meth:`pv_samples`, composed from elementary autodiff ops."""
        m, k, _ = keypoints.shape
        flat = nx.reshape(keypoints, (m * k, 3))
        samples, masks = [], []
        c = None
        for cam, maps in zip(pv.cameras, pv.maps):
            rot, trans = cam.camera_ego_linear()
            pc = nx.matmul(flat, Tensor(rot.T)) + trans
            z = pc[:, 2]
            front = z.data > PV_NEAR
            zsafe = z * front.astype(np.float64) + (~front).astype(np.float64)
            for s in self.scales:
                fmap = maps[s]
                c = fmap.shape[-1]
                sc = cam.scaled(s)
                u = pc[:, 0] / zsafe * sc.fx + sc.cx
                v = pc[:, 1] / zsafe * sc.fy + sc.cy
                hs, ws = fmap.shape[:2]
                ok = front & (u.data >= 0) & (u.data <= ws - 1) & (v.data >= 0) & (v.data <= hs - 1)
                sampled, valid = nx.bilinear_sample(fmap, nx.stack([u, v], axis=1))
                ok = ok & valid
                samples.append(sampled * ok[:, None].astype(np.float64))
                masks.append(ok)
        n_views = len(samples)
        stacked = nx.stack(samples, axis=1)  # (M·K) × V × C
        mask = np.stack(masks, axis=1).reshape(m, k * n_views)
        return nx.reshape(stacked, (m, k * n_views, c)), mask

    def pv_logits(self, features: Tensor, layer: int, n_views: int) -> Tensor:
        p = self.params
        logits = nx.linear(nx.layer_norm(features), p[f"layer{layer}.pv.wa"], p[f"layer{layer}.pv.ba"])
        if n_views * self.cfg.n_keypoints != logits.shape[1]:
            raise ValueError(f"PV input has {n_views} views per keypoint, decoder was built for {logits.shape[1] // self.cfg.n_keypoints}")
        return logits

    def pv_deform_agg(self, features: Tensor, anchors: Tensor, pv: PVInput, layer: int, keypoints: Tensor | None = None) -> Tensor:
        if keypoints is None:
            keypoints = self.keypoints(anchors, features, layer)
        m = keypoints.shape[0]
        samples, mask = self.pv_samples(keypoints, pv)
        n_views = mask.shape[1] // self.cfg.n_keypoints
        w = nx.softmax(self.pv_logits(features, layer, n_views), axis=1, mask=mask)
        agg = nx.reshape(nx.matmul(nx.reshape(w, (m, 1, mask.shape[1])), samples), (m, samples.shape[-1]))
        return features + nx.matmul(agg, self.params[f"layer{layer}.pv.wo"])

    # -- block pieces -----------------------------------------------------------
    def self_attention(self, features: Tensor, embed: Tensor, layer: int) -> Tensor:
        p = self.params
        pre = f"layer{layer}.self"
        f = nx.layer_norm(features)
        x = f + embed
        out = attention(nx.matmul(x, p[f"{pre}.wq"]), nx.matmul(x, p[f"{pre}.wk"]), nx.matmul(f, p[f"{pre}.wv"]))
        return features + nx.matmul(out, p[f"{pre}.wo"])

    def cross_attention(self, features: Tensor, embed: Tensor, mem_features: Tensor, mem_embed: Tensor, layer: int) -> Tensor:
        p = self.params
        pre = f"layer{layer}.cross"
        mem = nx.layer_norm(mem_features)
        q = nx.matmul(nx.layer_norm(features) + embed, p[f"{pre}.wq"])
        k = nx.matmul(mem + mem_embed, p[f"{pre}.wk"])
        v = nx.matmul(mem, p[f"{pre}.wv"])
        return features + nx.matmul(attention(q, k, v), p[f"{pre}.wo"])

    def ffn(self, features: Tensor, layer: int) -> Tensor:
        p = self.params
        pre = f"layer{layer}.ffn"
        h = nx.relu(nx.linear(nx.layer_norm(features), p[f"{pre}.w1"], p[f"{pre}.b1"]))
        return features + nx.linear(h, p[f"{pre}.w2"], p[f"{pre}.b2"])

    def refine(self, anchors: Tensor, features: Tensor, embed: Tensor, layer: int) -> LayerOutput:
        p = self.params
        pre = f"layer{layer}"
        x = nx.layer_norm(features) + embed
        delta = nx.linear(nx.relu(nx.linear(x, p[f"{pre}.reg.w1"], p[f"{pre}.reg.b1"])), p[f"{pre}.reg.w2"], p[f"{pre}.reg.b2"])
        new = renormalize_yaw(anchors + delta)
        cls = nx.linear(nx.relu(nx.linear(x, p[f"{pre}.cls.w1"], p[f"{pre}.cls.b1"])), p[f"{pre}.cls.w2"], p[f"{pre}.cls.b2"])
        qual = nx.linear(x, p[f"{pre}.qual.w"], p[f"{pre}.qual.b"])
        return LayerOutput(new, cls, qual)

    def block(
        self,
        layer: int,
        anchors: Tensor,
        features: Tensor,
        bev: Tensor | None,
        pv: PVInput | None,
        memory: tuple[Tensor, Tensor] | None = None,
    ) -> tuple[Tensor, LayerOutput]:
        """One decoder block; returns the updated features and the refined layer output."""
        embed = self.encode_anchor(anchors)
        if layer > 0:
            if memory is not None:
                mem_a, mem_f = memory
                features = self.cross_attention(features, embed, mem_f, self.encode_anchor(mem_a), layer)
            features = self.self_attention(features, embed, layer)
        kp = self.keypoints(anchors, features, layer)
        if self.cfg.use_bev and bev is not None:
            features = self.bev_deform_agg(features, anchors, bev, layer, kp)
        if self.cfg.use_pv and pv is not None:
            features = self.pv_deform_agg(features, anchors, pv, layer, kp)
        features = self.ffn(features, layer)
        return features, self.refine(anchors, features, embed, layer)

    def decode_frame(
        self,
        bev: Tensor | None,
        pv: PVInput | None,
        propagated: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None,
        queries: tuple[Tensor, Tensor] | None = None,
    ) -> DecodeResult:
        """Run all blocks for one frame.

        ``propagated`` is ``(anchors P×11, features P×C, ids P)`` from the
        previous frame, or ``None`` for a cold start. ``queries`` overrides the
        learned initial queries (used by tests).
        """
        if queries is None:
            anchors, features = self.params["query.anchors"], self.params["query.features"]
        else:
            anchors, features = queries
        features, out0 = self.block(0, anchors, features, bev, pv)
        layers = [out0]
        anchors = out0.anchors
        m = anchors.shape[0]
        conf0 = out0.confidence
        memory = None
        n_prop = 0
        ids = np.full(m, -1, dtype=np.int64)
        selected = np.arange(m)
        if propagated is not None and len(propagated[0]) > 0:
            pa, pf, pids = propagated
            n_prop = len(pa)
            keep = m - n_prop
            if keep < 0:
                raise ValueError("more propagated queries than decoder queries")
            order = np.argsort(-conf0, kind="stable")[:keep]
            selected = np.sort(order)
            mem_a, mem_f = Tensor(pa), Tensor(pf)
            anchors = nx.concat([nx.take_rows(anchors, selected), mem_a], axis=0) if keep else mem_a
            features = nx.concat([nx.take_rows(features, selected), mem_f], axis=0) if keep else mem_f
            ids = np.concatenate([np.full(keep, -1, dtype=np.int64), np.asarray(pids, dtype=np.int64)])
            memory = (mem_a, mem_f)
        for li in range(1, self.cfg.n_layers):
            features, out = self.block(li, anchors, features, bev, pv, memory)
            layers.append(out)
            anchors = out.anchors
        return DecodeResult(layers, features, ids, n_prop, selected, conf0)
