"""Static top-down images: PCA-coloured BEV grids (PPM) and track plots (SVG).

Image orientation matches the driver's view from above: forward (+x) points
up and left (+y) points left.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .decoder import anchor_to_box
from .geometry import box_corners
from .tracker import TrackOutput


def pca_rgb(grid: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Project ``H×W×C`` features onto their top three principal axes, scaled to 0..255.

    Each axis is signed so that its largest-magnitude loading is positive,
    which makes the colouring a pure function of the input. Cells outside
    ``mask`` are black.
    """
    g = np.asarray(grid, dtype=np.float64)
    h, w, c = g.shape
    if mask is None:
        mask = np.ones((h, w), dtype=bool)
    flat = g.reshape(-1, c)
    m = np.asarray(mask, dtype=bool).reshape(-1)
    rgb = np.zeros((h * w, 3))
    if m.any():
        x = flat[m]
        mu = x.mean(axis=0)
        cov = (x - mu).T @ (x - mu) / max(len(x), 1)
        vals, vecs = np.linalg.eigh(cov)
        vecs = vecs[:, ::-1][:, : min(3, c)]
        pick = np.argmax(np.abs(vecs), axis=0)
        vecs = vecs * np.where(vecs[pick, np.arange(vecs.shape[1])] < 0, -1.0, 1.0)
        proj = (x - mu) @ vecs
        lo, hi = proj.min(axis=0), proj.max(axis=0)
        span = np.where(hi - lo > 1e-12, hi - lo, 1.0)
        rgb[m, : proj.shape[1]] = (proj - lo) / span
    img = np.rint(rgb * 255).astype(np.uint8).reshape(h, w, 3)
    return top_down(img)


def top_down(img: np.ndarray) -> np.ndarray:
    """Grid layout (row = x, column = y) to image layout (up = +x, left = +y)."""
    return img[::-1, ::-1]


def ppm_bytes(img: np.ndarray, upscale: int = 8) -> bytes:
    img = np.repeat(np.repeat(np.asarray(img, dtype=np.uint8), upscale, axis=0), upscale, axis=1)
    h, w, _ = img.shape
    return f"P6\n{w} {h}\n255\n".encode() + img.tobytes()


def write_ppm(path: str | Path, img: np.ndarray, upscale: int = 8) -> None:
    Path(path).write_bytes(ppm_bytes(img, upscale))


def _color(track_id: int) -> str:
    # golden-ratio hue walk, deterministic per id
    hue = (track_id * 0.618033988749895) % 1.0
    r, g, b = (np.clip(np.abs((hue * 6 + k) % 6 - 3) - 1, 0, 1) for k in (0, 4, 2))
    return "#%02x%02x%02x" % (int(r * 200 + 40), int(g * 200 + 40), int(b * 200 + 40))


def tracks_svg(tracks: TrackOutput, extent: float = 24.0, size: int = 480) -> str:
    """Box footprints of every record, coloured by track id, with centre polylines."""
    s = size / (2 * extent)

    def to_px(x, y):
        return (size / 2 - y * s, size / 2 - x * s)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
        f'<circle cx="{size / 2:.2f}" cy="{size / 2:.2f}" r="3" fill="black"/>',
    ]
    paths: dict[int, list[tuple[float, float]]] = {}
    for r in tracks.records():
        center, sz, yaw, _ = anchor_to_box(r.anchor)
        corners = box_corners(center, sz, yaw)[[1, 3, 7, 5]]  # bottom face, in order
        pts = " ".join("%.2f,%.2f" % to_px(x, y) for x, y, _ in corners)
        out.append(f'<polygon points="{pts}" fill="none" stroke="{_color(r.track_id)}" stroke-width="1"/>')
        paths.setdefault(r.track_id, []).append(to_px(center[0], center[1]))
    for tid in sorted(paths):
        if len(paths[tid]) > 1:
            pts = " ".join("%.2f,%.2f" % p for p in paths[tid])
            out.append(f'<polyline points="{pts}" fill="none" stroke="{_color(tid)}" stroke-width="2"/>')
        x, y = paths[tid][-1]
        out.append(f'<text x="{x + 3:.2f}" y="{y - 3:.2f}" font-size="10">{tid}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
