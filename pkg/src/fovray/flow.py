"""Optical flow: pyramid block matching plus an analytic reprojection oracle.

``estimate_flow`` is the training-time provider: a coarse-to-fine
pyramid (3 levels) where each level warps the previous frame by the
current flow estimate and refines per-block integer displacements by
SAD over a +-search window. Ties break toward the smaller displacement,
so textureless regions keep zero flow. ``analytic_flow`` reprojects the
renderer's depth channel through a previous camera pose and serves as
the validation oracle for the estimator.

Fields map frame i-1 onto frame i: warping the previous frame backward
by the field reconstructs the current frame.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .volume import Camera


@dataclass(frozen=True)
class FlowField:
    """Per-pixel displacement (dx, dy) in pixels, previous -> current."""

    vectors: np.ndarray  # (H, W, 2) float64

    def __post_init__(self):
        v = self.vectors
        if v.ndim != 3 or v.shape[2] != 2:
            raise ValueError(f"flow field must be (H, W, 2), got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("flow field must be finite")
        self.vectors.setflags(write=False)

    @property
    def dims(self) -> tuple[int, int]:
        return self.vectors.shape[0], self.vectors.shape[1]


def luma(img: np.ndarray) -> np.ndarray:
    """Rec.601 luma from an (H, W, C>=3) image; grayscale passes through."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    return 0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2]


def _downsample2(img: np.ndarray) -> np.ndarray:
    h, w = img.shape
    h2, w2 = h // 2 * 2, w // 2 * 2
    c = img[:h2, :w2]
    return 0.25 * (c[0::2, 0::2] + c[1::2, 0::2] + c[0::2, 1::2] + c[1::2, 1::2])


def _warp_gray(img: np.ndarray, flow: np.ndarray) -> np.ndarray:
    h, w = img.shape
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64),
                         indexing="ij")
    sx = np.clip(xs - flow[..., 0], 0.0, w - 1.0)
    sy = np.clip(ys - flow[..., 1], 0.0, h - 1.0)
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    tx = sx - x0
    ty = sy - y0
    return (img[y0, x0] * (1 - tx) * (1 - ty) + img[y0, x1] * tx * (1 - ty)
            + img[y1, x0] * (1 - tx) * ty + img[y1, x1] * tx * ty)


def _block_refine(prev: np.ndarray, cur: np.ndarray, flow: np.ndarray,
                  block: int, search: int) -> np.ndarray:
    h, w = cur.shape
    nby, nbx = max(1, h // block), max(1, w // block)
    hc, wc = nby * block, nbx * block
    warped = _warp_gray(prev, flow)
    best = np.full((nby, nbx), np.inf)
    best_d = np.zeros((nby, nbx, 2))
    offsets = [(dx, dy) for dy in range(-search, search + 1)
               for dx in range(-search, search + 1)]
    offsets.sort(key=lambda d: (d[0] * d[0] + d[1] * d[1], d[1], d[0]))
    for dx, dy in offsets:
        shifted = np.roll(warped, shift=(dy, dx), axis=(0, 1))
        # rolled-in borders are invalid; clamp them to the unshifted values
        if dy > 0:
            shifted[:dy, :] = warped[:dy, :]
        elif dy < 0:
            shifted[dy:, :] = warped[dy:, :]
        if dx > 0:
            shifted[:, :dx] = warped[:, :dx]
        elif dx < 0:
            shifted[:, dx:] = warped[:, dx:]
        sad = np.abs(cur[:hc, :wc] - shifted[:hc, :wc])
        per_block = sad.reshape(nby, block, nbx, block).sum(axis=(1, 3))
        better = per_block < best - 1e-12  # strict: earlier (smaller) offsets win ties
        best = np.where(better, per_block, best)
        best_d[better] = (dx, dy)
    delta = np.zeros((h, w, 2))
    delta[:hc, :wc] = np.repeat(np.repeat(best_d, block, axis=0), block, axis=1)[:hc, :wc]
    if hc < h:
        delta[hc:, :] = delta[hc - 1: hc, :]
    if wc < w:
        delta[:, wc:] = delta[:, wc - 1: wc]
    return flow + delta


def _upsample_flow(flow: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    h, w = shape
    sh, sw = flow.shape[0], flow.shape[1]
    ys = np.minimum((np.arange(h) * sh // h), sh - 1)
    xs = np.minimum((np.arange(w) * sw // w), sw - 1)
    return flow[np.ix_(ys, xs)] * 2.0


def estimate_flow(prev: np.ndarray, cur: np.ndarray, levels: int = 3, block: int = 8,
                  search: int = 4) -> FlowField:
    """Coarse-to-fine block matching between two frames (luma-converted)."""
    p = luma(prev)
    c = luma(cur)
    if p.shape != c.shape:
        raise ValueError(f"frame dims differ: {p.shape} vs {c.shape}")
    pyr_p, pyr_c = [p], [c]
    for _ in range(levels - 1):
        if min(pyr_p[-1].shape) < 2 * block:
            break
        pyr_p.append(_downsample2(pyr_p[-1]))
        pyr_c.append(_downsample2(pyr_c[-1]))
    flow = np.zeros(pyr_p[-1].shape + (2,))
    for lvl in range(len(pyr_p) - 1, -1, -1):
        if flow.shape[:2] != pyr_p[lvl].shape:
            flow = _upsample_flow(flow, pyr_p[lvl].shape)
        flow = _block_refine(pyr_p[lvl], pyr_c[lvl], flow, block, search)
    return FlowField(vectors=flow)


def _project(pts: np.ndarray, cam: Camera) -> tuple[np.ndarray, np.ndarray]:
    """World points -> (pixel coords (n,2), valid in-front mask)."""
    right, up, fwd = cam.basis()
    rel = pts - np.asarray(cam.position, dtype=np.float64)[None, :]
    z = rel @ fwd
    x = rel @ right
    y = rel @ up
    valid = z > 1e-9
    zs = np.where(valid, z, 1.0)
    tan_half = np.tan(np.deg2rad(cam.fov_y) * 0.5)
    aspect = cam.width / cam.height
    sx = x / (zs * tan_half * aspect)
    sy = y / (zs * tan_half)
    u = (sx + 1.0) * 0.5 * cam.width - 0.5
    v = (1.0 - sy) * 0.5 * cam.height - 0.5
    return np.stack([u, v], axis=1), valid


def analytic_flow(depth: np.ndarray, cam_prev: Camera, cam_cur: Camera) -> FlowField:
    """Reproject the current frame's depth into the previous camera.

    Pixels without depth (<= 0) get zero flow.
    """
    from .volume import generate_rays

    h, w = depth.shape
    if (cam_cur.height, cam_cur.width) != (h, w):
        raise ValueError("depth dims do not match the current camera film")
    us, vs = np.meshgrid(np.arange(w), np.arange(h))
    o, d = generate_rays(cam_cur, us.ravel(), vs.ravel())
    dep = np.asarray(depth, dtype=np.float64).ravel()
    pts = o + d * dep[:, None]
    prev_px, valid = _project(pts, cam_prev)
    cur_px = np.stack([us.ravel().astype(np.float64), vs.ravel().astype(np.float64)], axis=1)
    vec = cur_px - prev_px
    vec[~valid] = 0.0
    vec[dep <= 0.0] = 0.0
    return FlowField(vectors=vec.reshape(h, w, 2))


def flow_to_raw(field: FlowField, path: str | Path) -> None:
    Path(path).write_bytes(field.vectors.astype("<f4").tobytes())


def load_raw_flow(path: str | Path, dims: tuple[int, int]) -> FlowField:
    h, w = dims
    vec = np.frombuffer(Path(path).read_bytes(), dtype="<f4").reshape(h, w, 2)
    return FlowField(vectors=vec.astype(np.float64))


def flow_to_color(field: FlowField, max_mag: float | None = None) -> np.ndarray:
    """Color-wheel visualization: hue = direction, saturation = magnitude."""
    v = field.vectors
    mag = np.hypot(v[..., 0], v[..., 1])
    ang = np.arctan2(v[..., 1], v[..., 0])
    if max_mag is None:
        max_mag = max(float(mag.max()), 1e-9)
    s = np.clip(mag / max_mag, 0.0, 1.0)
    hue = (ang + np.pi) / (2.0 * np.pi) * 6.0
    i = np.floor(hue).astype(int) % 6
    f = hue - np.floor(hue)
    p = 1.0 - s
    q = 1.0 - s * f
    t = 1.0 - s * (1.0 - f)
    one = np.ones_like(s)
    lut = [
        (one, t, p), (q, one, p), (p, one, t),
        (p, q, one), (t, p, one), (one, p, q),
    ]
    rgb = np.zeros(v.shape[:2] + (3,))
    for k, (r, g, b) in enumerate(lut):
        sel = i == k
        rgb[sel] = np.stack([r[sel], g[sel], b[sel]], axis=-1)
    return rgb


def flow_to_png(field: FlowField, path: str | Path) -> None:
    from . import pngio

    pngio.save_rgb_png(flow_to_color(field), path)
