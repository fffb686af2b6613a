"""Benchmark experiments: compression sweep, throughput fly-throughs,
quality-over-time CSVs, and model-precision comparison.

Output layout mirrors the published data archive: cmax/, precision/,
quality/, throughput/. Quality files carry the _01/_03/_07/_10 suffix
encoding the base density and hold 128 rows recorded with the clips
looping; throughput files carry the _fast/_hifi/_ovr preset suffixes.
Every CSV starts with a comment line echoing the full configuration.
All timings are wall-clock milliseconds from a monotonic clock; the
sweep benches report the median of warm repeats plus mean/std columns.
"""
from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import pngio
from .autograd import no_grad, quantize_int8_affine, dequantize_int8_affine, truncate_fp16
from .metrics import build_quality_report, psnr
from .network import WNetParams, forward_full, init_network, load_network, reset_state
from .noise import NoiseStack, default_stack, gen_uniform_noise
from .renderer import (
    OrbitPathSpec,
    RenderSettings,
    Scene,
    orbit_cameras,
    render_full,
    render_sparse_compact,
    render_sparse_naive,
)
from .sample_maps import (
    FAST_PRESET,
    HIFI_PRESET,
    FoveaConfig,
    TauMap,
    build_sample_mask,
    build_tau_map,
    c_max,
    cmax_sweep_rows,
    compact_mask,
    pixel_scale_for_film,
)
from .training import EvalClip, build_eval_clip, evaluate
from .volume import Light, TransferFunction, make_procedural_volume

DATASETS = ("sphere_shells", "vortex_field", "box_lattice")
MODES = ("ovr", "fast", "hifi")
QUALITY_SUFFIX = {0.01: "01", 0.03: "03", 0.07: "07", 0.10: "10"}
QUALITY_ROWS = 128


@dataclass(frozen=True)
class ExperimentSpec:
    dataset: str = "sphere_shells"
    mode: str = "ovr"  # ovr (baseline full render) | fast | hifi
    frames: int = 16
    seed: int = 0
    width: int = 320
    height: int = 180
    out_dir: str | Path = "bench_out"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.dataset not in DATASETS:
            raise ValueError(f"dataset must be one of {DATASETS}, got {self.dataset!r}")

    def fovea(self) -> FoveaConfig | None:
        if self.mode == "ovr":
            return None
        preset = FAST_PRESET if self.mode == "fast" else HIFI_PRESET
        return FoveaConfig(
            focus=((self.width - 1) / 2.0, (self.height - 1) / 2.0),
            sigma=preset["sigma"],
            base_density=preset["base_density"],
            pixel_scale=pixel_scale_for_film((self.height, self.width)),
        )


def default_scene(dataset: str, dims: tuple[int, int, int] = (32, 32, 32)) -> Scene:
    vol = make_procedural_volume(dataset, dims)
    return Scene(volume=vol, tf=TransferFunction.default(),
                 light=Light(direction=(-1.0, -1.0, -0.5), intensity=(1.0, 1.0, 1.0)))


def _write_csv(path: Path, header: list[str], rows, config_echo: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        f.write("# " + json.dumps(config_echo) + "\n")
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)


def read_csv_rows(path: str | Path) -> list[list[str]]:
    """CSV rows with comment lines skipped (header row included)."""
    rows = []
    with open(path) as f:
        for line in f:
            if line.startswith("#"):
                continue
            rows.append(line.rstrip("\n").split(","))
    return rows


def cmd_bench_cmax(taus=(0.01, 0.03, 0.05, 0.1, 0.2, 0.5, 1.0),
                   dims: tuple[int, int] = (180, 320), repeats: int = 3,
                   dataset: str = "vortex_field", out_dir: str | Path = "bench_out",
                   volume_dims: tuple[int, int, int] = (48, 48, 48),
                   seed: int = 0) -> list[tuple]:
    """Frame time vs uniform threshold for naive and compacted renderers.

    Uses film-sized uniform rank noise so the work-item count is
    round(tau * H * W) up to rounding. Returns the CSV rows
    (tau, t_naive_ms, t_compact_ms, c_max, t_full_ms, work_items,
    mean_compact_ms, std_compact_ms).
    """
    if min(taus) <= 0 or max(taus) > 1:
        raise ValueError("taus must lie in (0, 1]")
    h, w = dims
    scene = default_scene(dataset, volume_dims)
    from .volume import Camera

    center = scene.volume.center()
    diag = float(np.linalg.norm(scene.volume.extent))
    cam = Camera(position=tuple(center + diag * np.array([1.0, 0.7, 1.2])),
                 look_at=tuple(center), fov_y=40.0, width=w, height=h)
    noise = gen_uniform_noise(h, w, 2, seed=seed)
    settings = RenderSettings()
    t_full = min(render_full(scene, cam, settings).render_ms for _ in range(repeats))
    rows = []
    for tau in taus:
        tmap = TauMap(values=np.full((h, w), float(tau)))
        mask = build_sample_mask(noise, 0, tmap)
        comp = compact_mask(mask)
        naive_ts = [render_sparse_naive(scene, cam, mask, settings).render_ms
                    for _ in range(repeats)]
        compact_ts = [render_sparse_compact(scene, cam, comp, settings).render_ms
                      for _ in range(repeats)]
        rows.append((tau, float(np.median(naive_ts)), float(np.median(compact_ts)),
                     c_max(tmap), t_full, comp.count,
                     float(np.mean(compact_ts)), float(np.std(compact_ts))))
    echo = {"taus": list(taus), "dims": list(dims), "repeats": repeats,
            "dataset": dataset, "volume_dims": list(volume_dims), "seed": seed,
            "timing": "median of warm repeats, monotonic clock, ms"}
    out = Path(out_dir) / "cmax"
    _write_csv(out / "cmax_sweep.csv",
               ["tau", "t_naive_ms", "t_compact_ms", "c_max", "t_full_ms",
                "work_items", "mean_compact_ms", "std_compact_ms"], rows, echo)
    # foveated-settings sweep: (P_b, sigma, c_max, measured_density)
    stack = default_stack(cache_dir=None if out_dir is None else Path(out_dir) / "noise_cache")
    settings_rows = cmax_sweep_rows(
        [(FAST_PRESET["base_density"], FAST_PRESET["sigma"]),
         (HIFI_PRESET["base_density"], HIFI_PRESET["sigma"]),
         (0.01, 0.02), (0.10, 0.02)], stack, dims)
    _write_csv(out / "cmax_settings.csv",
               ["p_b", "sigma", "c_max", "measured_density"], settings_rows, echo)
    return rows


def _reconstruct_frame(net: WNetParams, sparse_rgba: np.ndarray, mask_bits: np.ndarray,
                       state):
    x = np.moveaxis(sparse_rgba, -1, 0)[None].astype(np.float32)
    m = mask_bits[None, None].astype(np.float32)
    x = x * m
    if net.config.include_mask_channel:
        x = np.concatenate([x, m], axis=1)
    with no_grad():
        o, _, state = forward_full(net, x, state)
    return np.clip(np.moveaxis(o.data[0], 0, -1), 0.0, 1.0), state


def cmd_bench_throughput(spec: ExperimentSpec, checkpoint: str | Path | None = None,
                         noise: NoiseStack | None = None) -> list[tuple]:
    """Fly-through timing rows per frame; neural modes add reconstruction."""
    net = None
    if spec.mode != "ovr":
        if checkpoint is None:
            raise ValueError(f"mode {spec.mode!r} needs a trained checkpoint")
        net = checkpoint if isinstance(checkpoint, WNetParams) else load_network(checkpoint)[0]
    scene = default_scene(spec.dataset)
    cams = orbit_cameras(OrbitPathSpec(n_frames=spec.frames), scene.volume,
                         spec.width, spec.height)
    noise = noise if noise is not None else default_stack(cache_dir=None)
    settings = RenderSettings()
    fovea = spec.fovea()
    rows = []
    state = reset_state(net.config, (spec.height, spec.width)) if net is not None else None
    for i, cam in enumerate(cams):
        if spec.mode == "ovr":
            fr = render_full(scene, cam, settings)
            mask_ms, render_ms, rec_ms = 0.0, fr.render_ms, 0.0
        else:
            tic = time.perf_counter()
            tau = build_tau_map(fovea, (spec.height, spec.width))
            mask = build_sample_mask(noise, i, tau)
            comp = compact_mask(mask)
            mask_ms = (time.perf_counter() - tic) * 1e3
            fr = render_sparse_compact(scene, cam, comp, settings)
            render_ms = fr.render_ms
            tic = time.perf_counter()
            _, state = _reconstruct_frame(net, fr.rgba, mask.bits, state)
            rec_ms = (time.perf_counter() - tic) * 1e3
        rows.append((i, mask_ms, render_ms, rec_ms, mask_ms + render_ms + rec_ms))
    echo = {"dataset": spec.dataset, "mode": spec.mode, "frames": spec.frames,
            "film": [spec.width, spec.height], "seed": spec.seed,
            "preset": None if fovea is None else
            {"p_b": float(np.asarray(fovea.base_density)), "sigma": fovea.sigma}}
    out = Path(spec.out_dir) / "throughput"
    _write_csv(out / f"{spec.dataset}_{spec.mode}.csv",
               ["frame", "mask_ms", "render_ms", "reconstruct_ms", "total_ms"], rows, echo)
    totals = [r[4] for r in rows]
    _write_csv(out / f"{spec.dataset}_{spec.mode}_summary.csv",
               ["dataset", "mode", "mean_total_ms", "std_total_ms"],
               [(spec.dataset, spec.mode, float(np.mean(totals)), float(np.std(totals)))],
               echo)
    return rows


def speedup_table(out_dir: str | Path, datasets=DATASETS) -> list[tuple]:
    """(dataset, mode, speedup vs ovr) from written throughput summaries."""
    out = Path(out_dir) / "throughput"
    table = []
    for ds in datasets:
        base_path = out / f"{ds}_ovr_summary.csv"
        if not base_path.exists():
            continue
        base = float(read_csv_rows(base_path)[1][2])
        for mode in ("fast", "hifi"):
            p = out / f"{ds}_{mode}_summary.csv"
            if p.exists():
                mean_total = float(read_csv_rows(p)[1][2])
                table.append((ds, mode, base / mean_total))
    return table


def make_jump_cut_clips(scene: Scene, dims: tuple[int, int] = (96, 96),
                        frames_per_clip: int = 50, seed: int = 0,
                        settings: RenderSettings = RenderSettings()):
    """Two fly-through clips with a jump cut between them.

    Each clip starts and ends in fast camera motion and slows in the
    middle. Returns (frames list, cut index).
    """
    h, w = dims
    spec_a = OrbitPathSpec(n_frames=frames_per_clip, yaw_turns=0.5,
                           speed_profile="fast_slow_fast", seed_phase=0.03 * seed)
    spec_b = OrbitPathSpec(n_frames=frames_per_clip, yaw_turns=0.5,
                           speed_profile="fast_slow_fast",
                           seed_phase=0.37 + 0.03 * seed, pitch_amplitude_deg=-20.0)
    cams = (orbit_cameras(spec_a, scene.volume, w, h)
            + orbit_cameras(spec_b, scene.volume, w, h))
    frames = [render_full(scene, c, settings).rgba for c in cams]
    return frames, frames_per_clip


def quality_rows_for_clip(net: WNetParams, frames: list[np.ndarray], noise: NoiseStack,
                          p_b: float, sigma: float = 0.02,
                          n_rows: int = QUALITY_ROWS) -> list[tuple]:
    """128 looped rows of (frame, psnr, ssim, msssim, tpsnr) for one density."""
    h, w = frames[0].shape[:2]
    cfg = FoveaConfig(focus=((w - 1) / 2.0, (h - 1) / 2.0), sigma=sigma,
                      base_density=p_b, pixel_scale=pixel_scale_for_film((h, w)))
    looped = list(frames)
    while len(looped) < n_rows:
        looped.extend(frames)
    looped = looped[:n_rows]
    clip = build_eval_clip(looped, noise, cfg)
    _, report = evaluate(net, clip)
    return report.csv_rows()


def cmd_eval_quality(net: WNetParams, dataset: str = "sphere_shells",
                     p_b_list=(0.01, 0.03, 0.07, 0.10), sigma: float = 0.02,
                     dims: tuple[int, int] = (96, 96), frames_per_clip: int = 50,
                     out_dir: str | Path = "bench_out", seed: int = 0,
                     noise: NoiseStack | None = None,
                     frames: list[np.ndarray] | None = None) -> dict[float, Path]:
    """Quality CSVs over the jump-cut clip pair at each base density."""
    scene = default_scene(dataset)
    noise = noise if noise is not None else default_stack(cache_dir=None)
    if frames is None:
        frames, _ = make_jump_cut_clips(scene, dims, frames_per_clip, seed)
    out = Path(out_dir) / "quality"
    written = {}
    for p_b in p_b_list:
        if p_b not in QUALITY_SUFFIX:
            raise ValueError(f"no file suffix defined for P_b={p_b}")
        rows = quality_rows_for_clip(net, frames, noise, p_b, sigma)
        path = out / f"{dataset}_{QUALITY_SUFFIX[p_b]}.csv"
        echo = {"dataset": dataset, "p_b": p_b, "sigma": sigma, "dims": list(dims),
                "frames_per_clip": frames_per_clip, "rows": len(rows), "seed": seed,
                "clips": "looping, truncated", "state": "carried across jump cut"}
        _write_csv(path, ["frame", "psnr", "ssim", "msssim", "tpsnr"], rows, echo)
        written[p_b] = path
    return written


def _quantized_net(net: WNetParams, mode: str) -> WNetParams:
    """Storage-precision emulation on conv weights; biases stay fp32."""
    out = init_network(net.config, seed=0)
    for name, p in net.params.items():
        arr = p.data
        if mode == "fp16" and name.endswith(".w"):
            arr = truncate_fp16(arr)
        elif mode == "int8emu" and name.endswith(".w"):
            q, scale, zp = quantize_int8_affine(arr)
            arr = dequantize_int8_affine(q, scale, zp)
        out.params[name].data = arr.astype(np.float32).copy()
    return out


def cmd_precision(net: WNetParams, dataset: str = "sphere_shells",
                  precisions=("fp32", "fp16", "int8emu"),
                  dims: tuple[int, int] = (96, 96), out_dir: str | Path = "bench_out",
                  seed: int = 0, noise: NoiseStack | None = None) -> list[tuple]:
    """Reconstruct one fixed frame at each stored precision; PSNR vs fp32."""
    scene = default_scene(dataset)
    noise = noise if noise is not None else default_stack(cache_dir=None)
    h, w = dims
    from .volume import Camera

    center = scene.volume.center()
    diag = float(np.linalg.norm(scene.volume.extent))
    cam = Camera(position=tuple(center + diag * np.array([1.1, 0.6, 1.3])),
                 look_at=tuple(center), fov_y=40.0, width=w, height=h)
    gt = render_full(scene, cam)
    cfg = FoveaConfig(focus=((w - 1) / 2.0, (h - 1) / 2.0), **FAST_PRESET,
                      pixel_scale=pixel_scale_for_film((h, w)))
    mask = build_sample_mask(noise, 0, build_tau_map(cfg, (h, w)))
    out = Path(out_dir) / "precision"
    out.mkdir(parents=True, exist_ok=True)
    outputs = {}
    for mode in precisions:
        qnet = net if mode == "fp32" else _quantized_net(net, mode)
        state = reset_state(qnet.config, (h, w))
        img, _ = _reconstruct_frame(qnet, gt.rgba, mask.bits, state)
        outputs[mode] = img
        pngio.save_rgb_png(img, out / f"recon_{mode}.png")
    ref = outputs.get("fp32")
    rows = [(mode, PSNR_REF if mode == "fp32" else psnr(outputs[mode], ref))
            for mode in precisions]
    echo = {"dataset": dataset, "precisions": list(precisions), "dims": list(dims),
            "seed": seed, "reference": "fp32 output"}
    _write_csv(out / "precision.csv", ["precision", "psnr_vs_fp32"], rows, echo)
    return rows


PSNR_REF = 100.0  # fp32 row compares the reference with itself
