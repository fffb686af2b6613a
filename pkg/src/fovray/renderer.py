"""Ray-marched volume rendering: full frames and three sparse strategies.

The marcher advances a batch of rays in lockstep with vectorized
numpy ops; each lane's arithmetic depends only on its own state, so a
pixel's result is bit-identical no matter how the batch was assembled.
That property is what lets the compacted renderer (one work item per
set mask bit) reproduce the naive renderer exactly.

The naive path mirrors wide-SIMD execution: pixels are grouped into
fixed-size row-major chunks, chunks containing no set bit are skipped
outright, and chunks with any set bit march at full width with unset
lanes masked but still occupying vector slots. Its cost is therefore
nearly flat in mask density, while the compacted path's cost is
proportional to the number of set bits.

Compositing is front-to-back emission-absorption with opacity
correction 1-(1-a)^(dt/reference_step), so step-size changes do not
shift overall opacity and a homogeneous medium reproduces the
Beer-Lambert transmittance exactly. One shadow ray is cast per sample
step toward the light at ``shadow_step_factor`` times the main step.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .sample_maps import CompactIndexList, SampleMask
from .volume import Camera, Light, TransferFunction, VolumeGrid, generate_rays

WARP_CHUNK = 64  # lanes per naive-mode execution group


@dataclass(frozen=True)
class Scene:
    volume: VolumeGrid
    tf: TransferFunction
    light: Light | None = None


@dataclass(frozen=True)
class RenderSettings:
    step_size: float | None = None  # None: 0.5 * min voxel spacing
    shadow_step_factor: float = 4.0
    early_term_alpha: float = 0.99
    background: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)
    ambient: float = 0.25
    reference_step: float | None = None  # opacity calibration; None: min spacing
    shadow_min_transmittance: float = 1e-3

    def __post_init__(self):
        if self.step_size is not None and self.step_size <= 0:
            raise ValueError("step_size must be > 0")
        if self.shadow_step_factor < 1:
            raise ValueError("shadow_step_factor must be >= 1")

    def resolve(self, vol: VolumeGrid) -> tuple[float, float]:
        """Concrete (step, reference_step) for a volume."""
        base = float(min(vol.spacing))
        step = self.step_size if self.step_size is not None else 0.5 * base
        ref = self.reference_step if self.reference_step is not None else base
        return step, ref


@dataclass
class Frame:
    rgba: np.ndarray  # (H, W, 4) float32
    depth: np.ndarray | None = None  # (H, W) world distance at alpha=0.5, 0 where never
    mask_ms: float = 0.0
    render_ms: float = 0.0
    reconstruct_ms: float = 0.0
    total_ms: float = 0.0
    work_items: int = 0

    @property
    def dims(self) -> tuple[int, int]:
        return self.rgba.shape[0], self.rgba.shape[1]


@dataclass
class SparseFrame(Frame):
    mask: SampleMask | None = None


def _ray_box(origins: np.ndarray, dirs: np.ndarray, ext: np.ndarray):
    """Slab intersection with [0, ext]; returns (t_enter>=0, t_exit, hit)."""
    safe = np.where(np.abs(dirs) < 1e-30, np.where(dirs < 0, -1e-30, 1e-30), dirs)
    inv = 1.0 / safe
    ta = (0.0 - origins) * inv
    tb = (ext[None, :] - origins) * inv
    tmin = np.minimum(ta, tb).max(axis=1)
    tmax = np.maximum(ta, tb).min(axis=1)
    t0 = np.maximum(tmin, 0.0)
    hit = tmax > t0
    return t0, tmax, hit


def _sample_scene(scene: Scene, pts: np.ndarray) -> np.ndarray:
    """Trilinear density -> transfer function, vectorized; (m, 4) RGBA."""
    from .volume import sample_trilinear

    s = sample_trilinear(scene.volume, pts)
    return scene.tf.apply(s)


def shadow_transmittance(scene: Scene, pts: np.ndarray, settings: RenderSettings) -> np.ndarray:
    """Transmittance from sample point(s) toward the light, by a secondary march.

    Marches at step * shadow_step_factor, with an early exit once the
    transmittance drops below ``shadow_min_transmittance``. Returns 1.0
    everywhere when the scene has no light.
    """
    pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    m = pts.shape[0]
    if scene.light is None:
        return np.ones(m)
    step, ref = settings.resolve(scene.volume)
    step_sh = step * settings.shadow_step_factor
    light = scene.light
    if light.direction is not None:
        d = -np.asarray(light.direction, dtype=np.float64)
        d = d / np.linalg.norm(d)
        dirs = np.broadcast_to(d, pts.shape).copy()
        dist = np.full(m, np.inf)
    else:
        delta = np.asarray(light.position, dtype=np.float64)[None, :] - pts
        dist = np.linalg.norm(delta, axis=1)
        dirs = delta / np.maximum(dist[:, None], 1e-30)
    ext = scene.volume.extent
    t0, t1, hit = _ray_box(pts, dirs, ext)
    t_end = np.minimum(t1, dist)
    trans = np.ones(m)
    t = t0.copy()
    live = hit & (t_end > t0)
    while live.any():
        dt = np.where(live, np.minimum(step_sh, t_end - t), 0.0)
        mid = t + 0.5 * dt
        p = pts + dirs * mid[:, None]
        a = _sample_scene(scene, p)[:, 3]
        a_step = 1.0 - np.power(1.0 - a, dt / ref)
        trans = trans * np.where(live, 1.0 - a_step, 1.0)
        t = t + dt
        live = live & (t < t_end - 1e-12) & (trans > settings.shadow_min_transmittance)
    return trans


def _march(scene: Scene, origins: np.ndarray, dirs: np.ndarray, active: np.ndarray,
           settings: RenderSettings) -> tuple[np.ndarray, np.ndarray]:
    """Lockstep march of a ray batch; returns (rgba (n,4), depth (n,))."""
    n = origins.shape[0]
    step, ref = settings.resolve(scene.volume)
    ext = scene.volume.extent
    intensity = (np.asarray(scene.light.intensity, dtype=np.float64)
                 if scene.light is not None else np.ones(3))
    ambient = settings.ambient if scene.light is not None else 1.0

    t0, t_end, hit = _ray_box(origins, dirs, ext)
    live = active & hit
    t = np.where(live, t0, 0.0)
    rgb = np.zeros((n, 3))
    trans = np.ones(n)
    depth = np.zeros(n)
    while live.any():
        dt = np.where(live, np.minimum(step, t_end - t), 0.0)
        mid = t + 0.5 * dt
        p = origins + dirs * mid[:, None]
        rgba_tf = _sample_scene(scene, p)
        a_step = np.where(live, 1.0 - np.power(1.0 - rgba_tf[:, 3], dt / ref), 0.0)

        shade = np.ones(n)
        if scene.light is not None:
            sel = live & (a_step > 0.0)
            if sel.any():
                t_sh = shadow_transmittance(scene, p[sel], settings)
                shade_sel = ambient + (1.0 - ambient) * t_sh
                shade = np.ones(n)
                shade[sel] = shade_sel
        contribution = trans * a_step
        rgb += contribution[:, None] * (rgba_tf[:, :3] * (shade[:, None] * intensity[None, :]))
        trans = trans * (1.0 - a_step)
        alpha_acc = 1.0 - trans
        depth = np.where(live & (depth == 0.0) & (alpha_acc >= 0.5), mid, depth)
        t = t + dt
        live = live & (t < t_end - 1e-12) & (alpha_acc < settings.early_term_alpha)

    bg = np.asarray(settings.background, dtype=np.float64)
    out = np.empty((n, 4))
    out[:, :3] = rgb + (trans * bg[3])[:, None] * bg[None, :3]
    out[:, 3] = (1.0 - trans) + trans * bg[3]
    out[~active] = 0.0
    depth[~active] = 0.0
    return out, depth


def render_pixel(scene: Scene, ray, settings: RenderSettings = RenderSettings()):
    """Single-ray convenience wrapper; returns (rgba (4,), depth)."""
    o = np.asarray(ray.origin, dtype=np.float64)[None, :]
    d = np.asarray(ray.direction, dtype=np.float64)[None, :]
    rgba, depth = _march(scene, o, d, np.ones(1, dtype=bool), settings)
    return rgba[0], float(depth[0])


def _film_rays(cam: Camera) -> tuple[np.ndarray, np.ndarray]:
    us, vs = np.meshgrid(np.arange(cam.width), np.arange(cam.height))
    return generate_rays(cam, us.ravel(), vs.ravel())


def render_full(scene: Scene, cam: Camera, settings: RenderSettings = RenderSettings()) -> Frame:
    tic = time.perf_counter()
    o, d = _film_rays(cam)
    rgba, depth = _march(scene, o, d, np.ones(o.shape[0], dtype=bool), settings)
    ms = (time.perf_counter() - tic) * 1e3
    return Frame(
        rgba=rgba.reshape(cam.height, cam.width, 4).astype(np.float32),
        depth=depth.reshape(cam.height, cam.width).astype(np.float32),
        render_ms=ms,
        total_ms=ms,
        work_items=cam.width * cam.height,
    )


def render_sparse_naive(scene: Scene, cam: Camera, mask: SampleMask,
                        settings: RenderSettings = RenderSettings()) -> SparseFrame:
    """Iterate the full pixel grid in WARP_CHUNK groups, skipping unset lanes.

    Chunks without any set bit are skipped entirely; chunks with one
    march at full width, so cost tracks occupied chunks, not set bits.
    """
    if mask.dims != (cam.height, cam.width):
        raise ValueError(f"mask dims {mask.dims} != film {cam.height}x{cam.width}")
    tic = time.perf_counter()
    bits = mask.bits.ravel()
    n = bits.size
    n_chunks = (n + WARP_CHUNK - 1) // WARP_CHUNK
    padded = np.zeros(n_chunks * WARP_CHUNK, dtype=bool)
    padded[:n] = bits
    occupied = padded.reshape(n_chunks, WARP_CHUNK).any(axis=1)
    lane_sel = np.repeat(occupied, WARP_CHUNK)[:n]
    idx = np.flatnonzero(lane_sel)

    rgba_flat = np.zeros((n, 4))
    depth_flat = np.zeros(n)
    if idx.size:
        o, d = _film_rays(cam)
        rgba, depth = _march(scene, o[idx], d[idx], bits[idx], settings)
        rgba_flat[idx] = rgba
        depth_flat[idx] = depth
    ms = (time.perf_counter() - tic) * 1e3
    return SparseFrame(
        rgba=rgba_flat.reshape(cam.height, cam.width, 4).astype(np.float32),
        depth=depth_flat.reshape(cam.height, cam.width).astype(np.float32),
        render_ms=ms,
        total_ms=ms,
        work_items=int(idx.size),
        mask=mask,
    )


def render_sparse_compact(scene: Scene, cam: Camera, compact: CompactIndexList,
                          settings: RenderSettings = RenderSettings()) -> SparseFrame:
    """March exactly one work item per compacted entry and back-project."""
    if compact.dims != (cam.height, cam.width):
        raise ValueError(f"compact dims {compact.dims} != film {cam.height}x{cam.width}")
    coords = compact.coords
    if coords.size and (coords[:, 0].max() >= cam.width or coords[:, 1].max() >= cam.height):
        raise ValueError("compact indices out of film range")
    tic = time.perf_counter()
    rgba_img = np.zeros((cam.height, cam.width, 4))
    depth_img = np.zeros((cam.height, cam.width))
    if compact.count:
        o, d = generate_rays(cam, coords[:, 0], coords[:, 1])
        rgba, depth = _march(scene, o, d, np.ones(compact.count, dtype=bool), settings)
        rgba_img[coords[:, 1], coords[:, 0]] = rgba
        depth_img[coords[:, 1], coords[:, 0]] = depth
    ms = (time.perf_counter() - tic) * 1e3
    bits = np.zeros((cam.height, cam.width), dtype=bool)
    bits[coords[:, 1], coords[:, 0]] = True
    return SparseFrame(
        rgba=rgba_img.astype(np.float32),
        depth=depth_img.astype(np.float32),
        render_ms=ms,
        total_ms=ms,
        work_items=compact.count,
        mask=SampleMask(bits=bits),
    )


def render_sparse_direct(scene: Scene, cam: Camera, positions: np.ndarray,
                         settings: RenderSettings = RenderSettings()) -> SparseFrame:
    """Render stochastically drawn positions; duplicates are recomputed."""
    positions = np.asarray(positions, dtype=np.int64)
    tic = time.perf_counter()
    rgba_img = np.zeros((cam.height, cam.width, 4))
    depth_img = np.zeros((cam.height, cam.width))
    if positions.size:
        o, d = generate_rays(cam, positions[:, 0], positions[:, 1])
        rgba, depth = _march(scene, o, d, np.ones(positions.shape[0], dtype=bool), settings)
        rgba_img[positions[:, 1], positions[:, 0]] = rgba
        depth_img[positions[:, 1], positions[:, 0]] = depth
    ms = (time.perf_counter() - tic) * 1e3
    bits = np.zeros((cam.height, cam.width), dtype=bool)
    if positions.size:
        bits[positions[:, 1], positions[:, 0]] = True
    return SparseFrame(
        rgba=rgba_img.astype(np.float32),
        depth=depth_img.astype(np.float32),
        render_ms=ms,
        total_ms=ms,
        work_items=int(positions.shape[0]),
        mask=SampleMask(bits=bits),
    )


@dataclass(frozen=True)
class OrbitPathSpec:
    """Oscillating-zoom orbit around the volume center, two rotation axes."""

    n_frames: int = 64
    radius_factor: float = 2.2  # base distance in units of volume diagonal
    zoom_amplitude: float = 0.35  # fraction of base radius
    zoom_periods: float = 2.0
    yaw_turns: float = 1.0  # full revolutions over the path
    pitch_amplitude_deg: float = 25.0
    pitch_periods: float = 1.0
    speed_profile: str = "uniform"  # or "fast_slow_fast"
    seed_phase: float = 0.0

    def parameter(self, i: int) -> float:
        """Path parameter in [0,1) for frame i, shaped by the speed profile."""
        if self.n_frames <= 1:
            return 0.0
        u = i / self.n_frames
        if self.speed_profile == "fast_slow_fast":
            # high angular speed at the ends, slow in the middle
            return u + 0.22 * np.sin(2.0 * np.pi * u)
        return u


def orbit_cameras(spec: OrbitPathSpec, vol: VolumeGrid, width: int, height: int,
                  fov_y: float = 45.0) -> list[Camera]:
    center = vol.center()
    diag = float(np.linalg.norm(vol.extent))
    cams = []
    for i in range(spec.n_frames):
        s = spec.parameter(i)
        yaw = 2.0 * np.pi * (spec.yaw_turns * s + spec.seed_phase)
        pitch = np.deg2rad(spec.pitch_amplitude_deg) * np.sin(
            2.0 * np.pi * spec.pitch_periods * s)
        r = spec.radius_factor * diag * (1.0 + spec.zoom_amplitude *
                                         np.sin(2.0 * np.pi * spec.zoom_periods * s))
        pos = center + r * np.array([
            np.cos(pitch) * np.cos(yaw),
            np.sin(pitch),
            np.cos(pitch) * np.sin(yaw),
        ])
        cams.append(Camera(position=tuple(pos), look_at=tuple(center),
                           up=(0.0, 1.0, 0.0), fov_y=fov_y, width=width, height=height))
    return cams


def save_camera_path(cams: list[Camera], path: str | Path,
                     spec: OrbitPathSpec | None = None) -> None:
    doc = {
        "keyframes": [
            {"position": list(c.position), "look_at": list(c.look_at), "up": list(c.up),
             "fov_y": c.fov_y, "width": c.width, "height": c.height}
            for c in cams
        ]
    }
    if spec is not None:
        doc["generator"] = {k: getattr(spec, k) for k in spec.__dataclass_fields__}
    Path(path).write_text(json.dumps(doc, indent=1))


def load_camera_path(path: str | Path) -> list[Camera]:
    doc = json.loads(Path(path).read_text())
    return [Camera(position=tuple(k["position"]), look_at=tuple(k["look_at"]),
                   up=tuple(k["up"]), fov_y=k["fov_y"], width=k["width"], height=k["height"])
            for k in doc["keyframes"]]


def render_flythrough(scene: Scene, cams: list[Camera],
                      settings: RenderSettings = RenderSettings(), mode: str = "full",
                      noise=None, fovea=None, rng: np.random.Generator | None = None):
    """Render a camera path; returns (frames, timing rows).

    Timing rows are (frame, mask_ms, render_ms, reconstruct_ms,
    total_ms); the noise frame index advances with the path frame.
    """
    from .sample_maps import build_sample_mask, build_tau_map, c_max, compact_mask, draw_direct_samples

    if not cams:
        raise ValueError("camera path must have at least one frame")
    if mode not in ("full", "naive", "compact", "direct"):
        raise ValueError(f"unknown flythrough mode {mode!r}")
    if mode != "full" and (noise is None or fovea is None):
        raise ValueError(f"mode {mode!r} needs a noise stack and a fovea config")
    frames = []
    rows = []
    rng = rng if rng is not None else np.random.default_rng(0)
    for i, cam in enumerate(cams):
        if mode == "full":
            fr = render_full(scene, cam, settings)
        else:
            tic = time.perf_counter()
            cfg = fovea
            tau = build_tau_map(cfg, (cam.height, cam.width))
            if mode == "direct":
                count = max(1, int(round(c_max(tau) * cam.height * cam.width)))
                from .noise import tile_field

                nf = tile_field(noise, cam.height, cam.width, i)
                work = draw_direct_samples(cfg, nf, count, rng)
            else:
                mask = build_sample_mask(noise, i, tau)
                if mode == "compact":
                    work = compact_mask(mask)
            mask_ms = (time.perf_counter() - tic) * 1e3
            if mode == "naive":
                fr = render_sparse_naive(scene, cam, mask, settings)
            elif mode == "compact":
                fr = render_sparse_compact(scene, cam, work, settings)
            else:
                fr = render_sparse_direct(scene, cam, work, settings)
            fr.mask_ms = mask_ms
            fr.total_ms = fr.mask_ms + fr.render_ms
        frames.append(fr)
        rows.append((i, fr.mask_ms, fr.render_ms, fr.reconstruct_ms, fr.total_ms))
    return frames, rows


def write_timing_csv(path: str | Path, rows, config_echo: dict | None = None) -> None:
    import csv

    with open(path, "w", newline="") as f:
        if config_echo:
            f.write("# " + json.dumps(config_echo) + "\n")
        writer = csv.writer(f)
        writer.writerow(["frame", "mask_ms", "render_ms", "reconstruct_ms", "total_ms"])
        writer.writerows(rows)


def frame_to_png(frame: Frame, path: str | Path) -> None:
    from . import pngio

    pngio.save_rgba_png(frame.rgba, path)


def frame_to_raw(frame: Frame, path: str | Path) -> None:
    Path(path).write_bytes(frame.rgba.astype("<f4").tobytes())


def load_raw_frame(path: str | Path, dims: tuple[int, int]) -> np.ndarray:
    h, w = dims
    return np.frombuffer(Path(path).read_bytes(), dtype="<f4").reshape(h, w, 4).copy()
