"""Interactive render service: live foveated rendering over WebSocket.

Each session owns a render loop: the latest control state (focal point,
base density, fall-off, mode) is applied at frame boundaries, the scene
is rendered sparsely (or fully, per mode), optionally reconstructed,
and pushed as a binary frame message. Control messages are JSON:

    {"type": "control", "focus": [x, y], "p_b": 0.03,
     "sigma": 0.02, "mode": "sparse_raw"}

Frame messages are a little-endian header followed by a PNG payload:

    u32 frame_id, u16 width, u16 height, u8 mode, u8 flags,
    f32 mask_ms, render_ms, reconstruct_ms, total_ms,
    f32 focus_x, focus_y, p_b, sigma, u32 png_len, png bytes,
    [utf-8 warning text when flags bit 0 is set]

Every frame is rendered under exactly one control state, echoed in its
header. HTTP endpoints: /healthz, /scene (metadata JSON), and the
static viewer bundle at / when one is built.

The default service settings favor interactivity: a 1-voxel march step
and a fovea fraction of 0.25 of the film height.
"""
from __future__ import annotations

import asyncio
import json
import struct
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import pngio
from .autograd import no_grad
from .network import WNetParams, RecurrentState, forward_full, load_network, reset_state
from .noise import NoiseStack, default_stack
from .renderer import RenderSettings, Scene, render_full, render_sparse_compact
from .sample_maps import (
    FAST_PRESET,
    FoveaConfig,
    build_sample_mask,
    build_tau_map,
    compact_mask,
    pixel_scale_for_film,
)
from .volume import Camera

MODES = ("sparse_raw", "reconstructed", "ground_truth", "side_by_side")
_MODE_ID = {name: i for i, name in enumerate(MODES)}
HEADER_FMT = "<IHHBB8fI"
HEADER_SIZE = struct.calcsize(HEADER_FMT)
P_B_RANGE = (0.001, 1.0)
SIGMA_RANGE = (0.0, 1.0)
VIEWER_FOVEA_FRACTION = 0.25


@dataclass
class SessionState:
    """Per-connection control state; one recurrent state per session."""

    fovea: FoveaConfig
    mode: str = "sparse_raw"
    frame_idx: int = 0
    recurrent: RecurrentState | None = None
    warning: str = ""


def default_session(film: tuple[int, int]) -> SessionState:
    w, h = film
    return SessionState(fovea=FoveaConfig(
        focus=((w - 1) / 2.0, (h - 1) / 2.0),
        sigma=FAST_PRESET["sigma"],
        base_density=FAST_PRESET["base_density"],
        pixel_scale=pixel_scale_for_film((h, w), fraction=VIEWER_FOVEA_FRACTION),
    ))


def handle_control(state: SessionState, msg: dict, film: tuple[int, int],
                   has_checkpoint: bool) -> SessionState:
    """Apply one control message; clamps out-of-range values with a warning."""
    w, h = film
    warnings = []
    fovea = state.fovea
    mode = state.mode
    known = {"type", "focus", "p_b", "sigma", "mode"}
    for key in msg:
        if key not in known:
            warnings.append(f"ignored unknown field {key!r}")
    if "focus" in msg:
        fx, fy = float(msg["focus"][0]), float(msg["focus"][1])
        cx = min(max(fx, 0.0), w - 1.0)
        cy = min(max(fy, 0.0), h - 1.0)
        if (cx, cy) != (fx, fy):
            warnings.append("focus clamped to film bounds")
        fovea = replace(fovea, focus=(cx, cy))
    if "p_b" in msg:
        pb = float(msg["p_b"])
        clamped = min(max(pb, P_B_RANGE[0]), P_B_RANGE[1])
        if clamped != pb:
            warnings.append("p_b clamped")
        fovea = replace(fovea, base_density=clamped)
    if "sigma" in msg:
        sg = float(msg["sigma"])
        clamped = min(max(sg, SIGMA_RANGE[0]), SIGMA_RANGE[1])
        if clamped != sg:
            warnings.append("sigma clamped")
        fovea = replace(fovea, sigma=clamped)
    if "mode" in msg:
        m = str(msg["mode"])
        if m not in MODES:
            warnings.append(f"unknown mode {m!r}")
        elif m == "reconstructed" and not has_checkpoint:
            warnings.append("no checkpoint loaded; reconstructed mode unavailable")
        else:
            mode = m
    return replace(state, fovea=fovea, mode=mode, warning="; ".join(warnings))


class RenderService:
    """Owns the scene, noise, optional network, and the per-frame pipeline."""

    def __init__(self, scene: Scene, film: tuple[int, int] = (320, 180),
                 checkpoint: str | Path | WNetParams | None = None,
                 noise: NoiseStack | None = None,
                 settings: RenderSettings | None = None,
                 camera: Camera | None = None, max_fps: float = 30.0):
        self.scene = scene
        self.film = film
        self.noise = noise if noise is not None else default_stack(cache_dir=None)
        base = float(min(scene.volume.spacing))
        self.settings = settings if settings is not None else RenderSettings(step_size=base)
        self.max_fps = max_fps
        self.net: WNetParams | None = None
        if checkpoint is not None:
            self.net = (checkpoint if isinstance(checkpoint, WNetParams)
                        else load_network(checkpoint)[0])
        if camera is None:
            center = scene.volume.center()
            diag = float(np.linalg.norm(scene.volume.extent))
            w, h = film
            camera = Camera(position=tuple(center + diag * np.array([1.0, 0.7, 1.2])),
                            look_at=tuple(center), fov_y=40.0, width=w, height=h)
        self.camera = camera

    def scene_info(self) -> dict:
        vol = self.scene.volume
        return {
            "volume": {"dims": list(vol.dims), "spacing": list(vol.spacing),
                       "value_range": list(vol.value_range)},
            "film": list(self.film),
            "modes": [m for m in MODES
                      if m != "reconstructed" or self.net is not None],
            "ranges": {"p_b": list(P_B_RANGE), "sigma": list(SIGMA_RANGE)},
            "presets": {"fast": FAST_PRESET, "hifi": HIFI_PRESET_DICT},
            "checkpoint": self.net is not None,
        }

    def render_frame(self, state: SessionState) -> tuple[bytes, SessionState]:
        """Render one frame under the given state; returns (message, state')."""
        w, h = self.film
        t_start = time.perf_counter()
        mask_ms = render_ms = rec_ms = 0.0
        recurrent = state.recurrent

        def sparse():
            nonlocal mask_ms, render_ms
            tic = time.perf_counter()
            tau = build_tau_map(state.fovea, (h, w))
            mask = build_sample_mask(self.noise, state.frame_idx, tau)
            comp = compact_mask(mask)
            mask_ms = (time.perf_counter() - tic) * 1e3
            fr = render_sparse_compact(self.scene, self.camera, comp, self.settings)
            render_ms = fr.render_ms
            return fr, mask

        def reconstruct(fr, mask):
            nonlocal rec_ms, recurrent
            tic = time.perf_counter()
            x = np.moveaxis(fr.rgba, -1, 0)[None].astype(np.float32)
            m = mask.bits[None, None].astype(np.float32)
            x = x * m
            if self.net.config.include_mask_channel:
                x = np.concatenate([x, m], axis=1)
            if recurrent is None or recurrent.film_dims != (h, w):
                recurrent = reset_state(self.net.config, (h, w))
            with no_grad():
                o, _, recurrent = forward_full(self.net, x, recurrent)
            rec_ms = (time.perf_counter() - tic) * 1e3
            return np.clip(np.moveaxis(o.data[0], 0, -1), 0.0, 1.0)

        if state.mode == "ground_truth":
            fr = render_full(self.scene, self.camera, self.settings)
            render_ms = fr.render_ms
            rgb = fr.rgba[..., :3]
        elif state.mode == "sparse_raw":
            fr, _ = sparse()
            rgb = fr.rgba[..., :3]
        elif state.mode == "reconstructed":
            fr, mask = sparse()
            rgb = reconstruct(fr, mask)
        else:  # side_by_side: ground truth | reconstruction (or raw sparse)
            gt = render_full(self.scene, self.camera, self.settings)
            render_ms = gt.render_ms
            fr, mask = sparse()
            right = reconstruct(fr, mask) if self.net is not None else fr.rgba[..., :3]
            rgb = np.concatenate([gt.rgba[..., :3], right], axis=1)

        png = pngio.encode_rgb_png(rgb)
        total_ms = (time.perf_counter() - t_start) * 1e3
        flags = 1 if state.warning else 0
        header = struct.pack(
            HEADER_FMT, state.frame_idx, rgb.shape[1], rgb.shape[0],
            _MODE_ID[state.mode], flags, mask_ms, render_ms, rec_ms, total_ms,
            float(state.fovea.focus[0]), float(state.fovea.focus[1]),
            float(np.asarray(state.fovea.base_density)), float(state.fovea.sigma),
            len(png))
        message = header + png + state.warning.encode()
        new_state = replace(state, frame_idx=state.frame_idx + 1,
                            recurrent=recurrent, warning="")
        return message, new_state


HIFI_PRESET_DICT = {"base_density": 0.07, "sigma": 0.06}


def parse_frame_message(blob: bytes) -> dict:
    """Decode a binary frame message into its parts (server-side of tests)."""
    (frame_id, w, h, mode_id, flags, mask_ms, render_ms, rec_ms, total_ms,
     fx, fy, p_b, sigma, png_len) = struct.unpack(HEADER_FMT, blob[:HEADER_SIZE])
    png = blob[HEADER_SIZE: HEADER_SIZE + png_len]
    warning = blob[HEADER_SIZE + png_len:].decode() if flags & 1 else ""
    return {
        "frame_id": frame_id, "width": w, "height": h, "mode": MODES[mode_id],
        "timings": {"mask_ms": mask_ms, "render_ms": render_ms,
                    "reconstruct_ms": rec_ms, "total_ms": total_ms},
        "focus": (fx, fy), "p_b": p_b, "sigma": sigma,
        "png": png, "warning": warning,
    }


def create_app(scene: Scene, checkpoint=None, film: tuple[int, int] = (320, 180),
               noise: NoiseStack | None = None, settings: RenderSettings | None = None,
               max_fps: float = 30.0, frontend_dir: str | Path | None = None):
    """FastAPI app exposing /healthz, /scene, /ws, and the static viewer."""
    from fastapi import FastAPI, WebSocket, WebSocketDisconnect
    from fastapi.responses import JSONResponse

    service = RenderService(scene, film=film, checkpoint=checkpoint, noise=noise,
                            settings=settings, max_fps=max_fps)
    app = FastAPI(title="fovray viewer service")
    app.state.service = service

    @app.get("/healthz")
    async def healthz():
        return {"status": "ok"}

    @app.get("/scene")
    async def scene_info():
        return JSONResponse(service.scene_info())

    @app.websocket("/ws")
    async def ws_endpoint(ws: WebSocket):
        await ws.accept()
        state = default_session(service.film)
        queue: asyncio.Queue = asyncio.Queue()

        async def reader():
            try:
                while True:
                    text = await ws.receive_text()
                    await queue.put(text)
            except Exception:
                await queue.put(None)

        reader_task = asyncio.create_task(reader())
        loop = asyncio.get_running_loop()
        try:
            while True:
                closed = False
                while not queue.empty():
                    text = queue.get_nowait()
                    if text is None:
                        closed = True
                        break
                    try:
                        msg = json.loads(text)
                        if not isinstance(msg, dict):
                            raise ValueError("control message must be an object")
                    except ValueError as exc:
                        await ws.send_text(json.dumps(
                            {"type": "error", "detail": f"malformed control: {exc}"}))
                        continue
                    state = handle_control(state, msg, service.film,
                                           service.net is not None)
                if closed:
                    break
                tic = time.perf_counter()
                message, state = await loop.run_in_executor(
                    None, service.render_frame, state)
                await ws.send_bytes(message)
                elapsed = time.perf_counter() - tic
                budget = 1.0 / service.max_fps
                if elapsed < budget:
                    await asyncio.sleep(budget - elapsed)
        except WebSocketDisconnect:
            pass
        finally:
            reader_task.cancel()

    if frontend_dir is None:
        frontend_dir = Path(__file__).resolve().parents[2] / "frontend" / "dist"
    frontend_dir = Path(frontend_dir)
    if frontend_dir.exists():
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=str(frontend_dir), html=True), name="viewer")
    return app
