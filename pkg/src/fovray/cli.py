"""Command-line entry points for the rendering, training, and benchmark
pipeline.

Verbs: gen-noise, render, train, eval-quality, bench-cmax,
bench-throughput, precision, serve. Global flags --seed, --config
(JSON file merged under the parsed arguments), and --out are accepted
by every verb.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", type=str, default=None,
                   help="JSON file with defaults for this verb's options")
    p.add_argument("--out", type=str, default="fovray_out")


def _merge_config(args: argparse.Namespace) -> argparse.Namespace:
    if args.config:
        overrides = json.loads(Path(args.config).read_text())
        for key, value in overrides.items():
            key = key.replace("-", "_")
            if getattr(args, key, None) in (None, parser_defaults.get(key)):
                setattr(args, key, value)
    return args


parser_defaults: dict = {}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fovray",
                                     description="Foveated sparse volume rendering pipeline")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("gen-noise", help="generate and cache a noise stack")
    p.add_argument("--kind", choices=["uniform", "blue2d", "stbn"], default="stbn")
    p.add_argument("--size", type=int, nargs=2, default=[64, 64], metavar=("H", "W"))
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--sigma-spatial", type=float, default=1.9)
    p.add_argument("--sigma-temporal", type=float, default=1.2)
    _add_common(p)

    p = sub.add_parser("render", help="render a fly-through")
    p.add_argument("--dataset", default="sphere_shells")
    p.add_argument("--volume", type=str, default=None, help="raw volume file")
    p.add_argument("--descriptor", type=str, default=None, help="volume descriptor JSON")
    p.add_argument("--mode", choices=["full", "naive", "compact", "direct"], default="full")
    p.add_argument("--frames", type=int, default=16)
    p.add_argument("--film", type=int, nargs=2, default=[320, 180], metavar=("W", "H"))
    p.add_argument("--p-b", type=float, default=0.03)
    p.add_argument("--sigma", type=float, default=0.02)
    p.add_argument("--png", action="store_true", help="write per-frame PNGs")
    _add_common(p)

    p = sub.add_parser("train", help="train the reconstruction network")
    p.add_argument("--datasets", nargs="+", default=["sphere_shells", "vortex_field"])
    p.add_argument("--clip-frames", type=int, default=32)
    p.add_argument("--source-film", type=int, default=128)
    p.add_argument("--epochs", type=int, default=8)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--blocks", default=None, help="block config string")
    p.add_argument("--lr0", type=float, default=1.25e-3)
    _add_common(p)

    p = sub.add_parser("eval-quality", help="quality CSVs over jump-cut clips")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", default="sphere_shells")
    p.add_argument("--p-b", type=float, nargs="+", default=[0.01, 0.03, 0.07, 0.10])
    p.add_argument("--film", type=int, nargs=2, default=[96, 96], metavar=("W", "H"))
    _add_common(p)

    p = sub.add_parser("bench-cmax", help="compression sweep over tau")
    p.add_argument("--taus", type=float, nargs="+",
                   default=[0.01, 0.03, 0.05, 0.1, 0.2, 0.5, 1.0])
    p.add_argument("--film", type=int, nargs=2, default=[320, 180], metavar=("W", "H"))
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--dataset", default="vortex_field")
    _add_common(p)

    p = sub.add_parser("bench-throughput", help="fly-through timing per preset")
    p.add_argument("--dataset", default="sphere_shells")
    p.add_argument("--modes", nargs="+", default=["ovr", "fast", "hifi"])
    p.add_argument("--frames", type=int, default=16)
    p.add_argument("--film", type=int, nargs=2, default=[320, 180], metavar=("W", "H"))
    p.add_argument("--checkpoint", default=None)
    _add_common(p)

    p = sub.add_parser("precision", help="reconstruction at stored precisions")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", default="sphere_shells")
    p.add_argument("--precisions", nargs="+", default=["fp32", "fp16", "int8emu"])
    _add_common(p)

    p = sub.add_parser("serve", help="run the interactive render service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8089)
    p.add_argument("--dataset", default="sphere_shells")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--film", type=int, nargs=2, default=[320, 180], metavar=("W", "H"))
    _add_common(p)

    for sp in sub.choices.values():
        for action in sp._actions:
            if action.dest != "help":
                parser_defaults.setdefault(action.dest, action.default)
    return parser


def _load_noise(out_dir: str, seed: int):
    from .noise import default_stack

    return default_stack(cache_dir=Path(out_dir) / "noise_cache", seed=max(seed, 1))


def cmd_gen_noise(args) -> int:
    from . import pngio
    from .noise import gen_blue_noise_2d, gen_stbn, gen_uniform_noise, save_stack

    h, w = args.size
    if args.kind == "uniform":
        stack = gen_uniform_noise(h, w, args.frames, seed=args.seed)
    elif args.kind == "blue2d":
        stack = gen_blue_noise_2d(h, w, seed=args.seed)
    else:
        stack = gen_stbn(h, w, args.frames, seed=args.seed,
                         sigma_spatial=args.sigma_spatial,
                         sigma_temporal=args.sigma_temporal)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    name = f"{args.kind}_{h}x{w}x{stack.frames}_s{args.seed}"
    save_stack(stack, out / f"{name}.noise")
    for i in range(stack.frames):
        pngio.save_gray_png(stack.values[i], out / f"{name}_frame{i}.png")
    pngio.save_gray_png(stack.values.mean(axis=0), out / f"{name}_temporal_mean.png")
    print(f"wrote {name}.noise plus {stack.frames} frame PNGs to {out}")
    return 0


def _scene_from_args(args):
    from .bench import default_scene
    from .renderer import Scene
    from .volume import Light, TransferFunction, VolumeMeta, load_raw_volume

    if args.volume:
        if not args.descriptor:
            raise SystemExit("--volume needs --descriptor")
        meta = VolumeMeta.from_file(args.descriptor)
        vol = load_raw_volume(args.volume, meta)
        return Scene(volume=vol, tf=TransferFunction.default(),
                     light=Light(direction=(-1.0, -1.0, -0.5)))
    return default_scene(args.dataset)


def cmd_render(args) -> int:
    from .renderer import (OrbitPathSpec, frame_to_png, orbit_cameras,
                           render_flythrough, write_timing_csv)
    from .sample_maps import FoveaConfig, pixel_scale_for_film

    scene = _scene_from_args(args)
    w, h = args.film
    cams = orbit_cameras(OrbitPathSpec(n_frames=args.frames), scene.volume, w, h)
    fovea = None
    noise = None
    if args.mode != "full":
        noise = _load_noise(args.out, args.seed)
        fovea = FoveaConfig(focus=((w - 1) / 2, (h - 1) / 2), sigma=args.sigma,
                            base_density=args.p_b,
                            pixel_scale=pixel_scale_for_film((h, w)))
    frames, rows = render_flythrough(scene, cams, mode=args.mode, noise=noise,
                                     fovea=fovea, rng=np.random.default_rng(args.seed))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_timing_csv(out / f"timings_{args.mode}.csv", rows,
                     config_echo={"mode": args.mode, "frames": args.frames,
                                  "film": args.film, "seed": args.seed})
    if args.png:
        for i, fr in enumerate(frames):
            frame_to_png(fr, out / f"frame_{i:04d}.png")
    print(f"rendered {len(frames)} frames ({args.mode}); timings in {out}")
    return 0


def cmd_train(args) -> int:
    from .bench import default_scene
    from .network import DESK_BLOCKS, NetConfig, init_network
    from .renderer import OrbitPathSpec, orbit_cameras, render_full
    from .training import TrainConfig, slice_dataset, split_dataset, train

    noise = _load_noise(args.out, args.seed)
    rng = np.random.default_rng(args.seed)
    samples = []
    for ds in args.datasets:
        scene = default_scene(ds)
        cams = orbit_cameras(OrbitPathSpec(n_frames=args.clip_frames), scene.volume,
                             args.source_film, args.source_film)
        frames = [render_full(scene, c).rgba for c in cams]
        samples.extend(slice_dataset(frames, noise, seq_len=16, tile=64,
                                     rng=rng, source_id=ds))
    train_s, val_s, _ = split_dataset(samples, rng)
    net = init_network(NetConfig.from_string(args.blocks or DESK_BLOCKS), seed=args.seed)
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                      seed=args.seed, lr0=args.lr0, val_every=20)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train(cfg, net, train_s, val_samples=val_s, log_path=out / "train_log.csv",
          checkpoint_path=out / "model.ckpt", progress=True)
    print(f"checkpoint written to {out / 'model.ckpt'}")
    return 0


def cmd_eval_quality(args) -> int:
    from .bench import cmd_eval_quality as run
    from .network import load_network

    net, _ = load_network(args.checkpoint)
    w, h = args.film
    noise = _load_noise(args.out, args.seed)
    written = run(net, dataset=args.dataset, p_b_list=tuple(args.p_b), dims=(h, w),
                  out_dir=args.out, seed=args.seed, noise=noise)
    for p_b, path in written.items():
        print(f"P_b={p_b}: {path}")
    return 0


def cmd_bench_cmax(args) -> int:
    from .bench import cmd_bench_cmax as run

    w, h = args.film
    rows = run(taus=tuple(args.taus), dims=(h, w), repeats=args.repeats,
               dataset=args.dataset, out_dir=args.out, seed=args.seed)
    for r in rows:
        print(f"tau={r[0]:.3f} naive={r[1]:.1f}ms compact={r[2]:.1f}ms "
              f"cmax={r[3]:.3f} work={r[5]}")
    return 0


def cmd_bench_throughput(args) -> int:
    from .bench import ExperimentSpec, cmd_bench_throughput as run, speedup_table

    w, h = args.film
    for mode in args.modes:
        spec = ExperimentSpec(dataset=args.dataset, mode=mode, frames=args.frames,
                              seed=args.seed, width=w, height=h, out_dir=args.out)
        run(spec, checkpoint=args.checkpoint)
    print("speedup vs baseline (ovr):")
    for ds, mode, s in speedup_table(args.out, datasets=(args.dataset,)):
        print(f"  {ds:>16s} {mode:>5s}: {s:.2f}x")
    return 0


def cmd_precision(args) -> int:
    from .bench import cmd_precision as run
    from .network import load_network

    net, _ = load_network(args.checkpoint)
    rows = run(net, dataset=args.dataset, precisions=tuple(args.precisions),
               out_dir=args.out, seed=args.seed)
    for mode, db in rows:
        print(f"{mode}: {db:.2f} dB vs fp32 output")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .bench import default_scene
    from .viewer import create_app

    scene = default_scene(args.dataset)
    w, h = args.film
    app = create_app(scene, checkpoint=args.checkpoint, film=(w, h),
                     noise=_load_noise(args.out, args.seed))
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


VERBS = {
    "gen-noise": cmd_gen_noise,
    "render": cmd_render,
    "train": cmd_train,
    "eval-quality": cmd_eval_quality,
    "bench-cmax": cmd_bench_cmax,
    "bench-throughput": cmd_bench_throughput,
    "precision": cmd_precision,
    "serve": cmd_serve,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = _merge_config(parser.parse_args(argv))
    return VERBS[args.verb](args)


if __name__ == "__main__":
    sys.exit(main())
