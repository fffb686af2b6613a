"""Dataset slicing, augmentation, the training loop, and clip evaluation.

Videos are cut into non-overlapping 16-frame segments and non-overlapping
spatial tiles; every sequence gets its own fovea draw (uniform focal
point, fall-off and base density sampled from the quality presets) and
per-frame masks from the looping noise stack. One optimizer step is
taken per batch of full sequences: the forward pass carries recurrent
state across all frames, losses accumulate over the sequence, and a
single AdamW update with cosine-annealed learning rate follows.
"""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import OptimState, Tensor, adamw_step, cosine_lr, no_grad, zero_grads
from .flow import estimate_flow
from .losses import LossWeights, PerceptualProxy, spatial_loss, temporal_loss, total_loss
from .metrics import QualityReport, build_quality_report, psnr
from .network import WNetParams, detach_state, forward_full, reset_state, save_network
from .noise import NoiseStack, tile_field
from .sample_maps import FoveaConfig, build_tau_map, pixel_scale_for_film

TRAIN_SIGMAS = (0.02, 0.06)
TRAIN_DENSITIES = (0.01, 0.03, 0.07, 0.10)


@dataclass(frozen=True)
class AugmentProbs:
    colors: float = 0.6
    flip_horizontal: float = 0.5
    flip_vertical: float = 0.5
    grayscale: float = 0.3
    static: float = 0.3
    padding: float = 0.1
    padding_max: int = 8  # px cap for the random pad/crop shift

    def __post_init__(self):
        for name in ("colors", "flip_horizontal", "flip_vertical",
                     "grayscale", "static", "padding"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"probability {name} must be in [0,1], got {p}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 120
    lr0: float = 1.25e-3
    lr_min: float = 1e-8
    weight_decay: float = 1e-2
    batch_size: int = 4
    seq_len: int = 16
    tile: int = 64
    seed: int = 0
    loss_weights: LossWeights = LossWeights()
    augment: AugmentProbs = AugmentProbs()
    weight_floor: float = 0.0
    val_every: int = 0  # steps between validation passes; 0 disables

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.seq_len < 1:
            raise ValueError("epochs, batch_size, and seq_len must be positive")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in
             ("epochs", "lr0", "lr_min", "weight_decay", "batch_size",
              "seq_len", "tile", "seed", "weight_floor", "val_every")}
        d["loss_weights"] = {k: getattr(self.loss_weights, k)
                             for k in self.loss_weights.__dataclass_fields__}
        d["augment"] = {k: getattr(self.augment, k)
                        for k in self.augment.__dataclass_fields__}
        return d


@dataclass
class SequenceSample:
    """One 16-frame ground-truth tile sequence with per-frame masks."""

    gt_rgba: np.ndarray  # (t, 4, h, w) float32
    masks: np.ndarray    # (t, 1, h, w) float32 in {0,1}
    source_id: str = ""
    segment: int = 0
    tile_index: int = 0

    @property
    def seq_len(self) -> int:
        return self.gt_rgba.shape[0]

    def gt_rgb(self) -> np.ndarray:
        return self.gt_rgba[:, :3]

    def network_input(self, include_mask: bool = True) -> np.ndarray:
        sparse = self.gt_rgba * self.masks
        if include_mask:
            return np.concatenate([sparse, self.masks], axis=1)
        return sparse


def sample_fovea(rng: np.random.Generator, dims: tuple[int, int]) -> FoveaConfig:
    """Training fovea policy: uniform focal point, preset sigma/density draws.

    The offset scale adapts to the film size so the sigma presets keep
    their published meaning on desk-scale frames.
    """
    h, w = dims
    return FoveaConfig(
        focus=(float(rng.uniform(0, w - 1)), float(rng.uniform(0, h - 1))),
        sigma=float(rng.choice(TRAIN_SIGMAS)),
        base_density=float(rng.choice(TRAIN_DENSITIES)),
        pixel_scale=pixel_scale_for_film(dims),
    )


def masks_for_sequence(cfg: FoveaConfig, noise: NoiseStack, dims: tuple[int, int],
                       start_frame: int, t: int) -> np.ndarray:
    h, w = dims
    tau = build_tau_map(cfg, dims).values
    out = np.empty((t, 1, h, w), dtype=np.float32)
    for i in range(t):
        n = tile_field(noise, h, w, start_frame + i)
        out[i, 0] = (n < tau).astype(np.float32)
    return out


def slice_dataset(frames: list[np.ndarray], noise: NoiseStack, seq_len: int = 16,
                  tile: int = 64, rng: np.random.Generator | None = None,
                  source_id: str = "") -> list[SequenceSample]:
    """Cut a rendered video into non-overlapping segments x tiles.

    ``frames`` are (H, W, 4) float arrays. Masks are drawn per sequence
    with the training fovea policy, with the noise frame index advancing
    along the segment.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    if not frames:
        return []
    h, w = frames[0].shape[:2]
    n_seg = len(frames) // seq_len
    tiles_y, tiles_x = h // tile, w // tile
    samples = []
    for seg in range(n_seg):
        stack = np.stack([np.moveaxis(frames[seg * seq_len + i], -1, 0)
                          for i in range(seq_len)]).astype(np.float32)
        for ty in range(tiles_y):
            for tx in range(tiles_x):
                gt = stack[:, :4, ty * tile:(ty + 1) * tile, tx * tile:(tx + 1) * tile]
                # focus drawn in source-frame coordinates: tiles far from it
                # are periphery-sparse, tiles containing it are fovea-dense
                cfg = sample_fovea(rng, (h, w))
                full = masks_for_sequence(cfg, noise, (h, w),
                                          start_frame=seg * seq_len, t=seq_len)
                masks = full[:, :, ty * tile:(ty + 1) * tile, tx * tile:(tx + 1) * tile]
                samples.append(SequenceSample(
                    gt_rgba=np.ascontiguousarray(gt),
                    masks=np.ascontiguousarray(masks),
                    source_id=source_id, segment=seg, tile_index=ty * tiles_x + tx))
    return samples


def split_dataset(samples: list[SequenceSample], rng: np.random.Generator,
                  ratio: tuple[int, int, int] = (10, 1, 1)):
    """Train/val/test split, disjoint at the (source, segment) level."""
    keys = sorted({(s.source_id, s.segment) for s in samples})
    order = [keys[i] for i in rng.permutation(len(keys))]
    total = sum(ratio)
    n_val = max(1, round(len(order) * ratio[1] / total)) if len(order) > 2 else 1
    n_test = max(1, round(len(order) * ratio[2] / total)) if len(order) > 2 else 1
    val_keys = set(order[:n_val])
    test_keys = set(order[n_val:n_val + n_test])
    train, val, test = [], [], []
    for s in samples:
        key = (s.source_id, s.segment)
        (val if key in val_keys else test if key in test_keys else train).append(s)
    return train, val, test


def augment(sample: SequenceSample, rng: np.random.Generator,
            probs: AugmentProbs = AugmentProbs()) -> SequenceSample:
    """Sequence-level augmentations, each applied with its own probability."""
    gt = sample.gt_rgba
    masks = sample.masks
    if rng.random() < probs.colors:
        perm = rng.permutation(3)
        gt = np.concatenate([gt[:, perm], gt[:, 3:4]], axis=1)
    if rng.random() < probs.flip_horizontal:
        gt = gt[..., ::-1]
        masks = masks[..., ::-1]
    if rng.random() < probs.flip_vertical:
        gt = gt[:, :, ::-1, :]
        masks = masks[:, :, ::-1, :]
    if rng.random() < probs.grayscale:
        lum = 0.299 * gt[:, 0] + 0.587 * gt[:, 1] + 0.114 * gt[:, 2]
        gt = np.stack([lum, lum, lum, gt[:, 3]], axis=1)
    if rng.random() < probs.static:
        k = int(rng.integers(0, sample.seq_len))
        gt = np.repeat(gt[k:k + 1], sample.seq_len, axis=0)
    if rng.random() < probs.padding:
        p = int(rng.integers(1, probs.padding_max + 1))
        oy = int(rng.integers(0, 2 * p + 1))
        ox = int(rng.integers(0, 2 * p + 1))
        h, w = gt.shape[2], gt.shape[3]
        gt = np.pad(gt, ((0, 0), (0, 0), (p, p), (p, p)))[:, :, oy:oy + h, ox:ox + w]
        masks = np.pad(masks, ((0, 0), (0, 0), (p, p), (p, p)))[:, :, oy:oy + h, ox:ox + w]
    return SequenceSample(gt_rgba=np.ascontiguousarray(gt),
                          masks=np.ascontiguousarray(masks),
                          source_id=sample.source_id, segment=sample.segment,
                          tile_index=sample.tile_index)


def _forward_sequence(net: WNetParams, inputs: np.ndarray, dims: tuple[int, int],
                      use_kernel_stage: bool = True):
    """Run the network over (t, N, C, h, w) inputs carrying state."""
    state = reset_state(net.config, dims)
    preds = []
    for i in range(inputs.shape[0]):
        o, _, state = forward_full(net, inputs[i], state, use_kernel_stage=use_kernel_stage)
        preds.append(o)
    return preds


def sequence_loss(net: WNetParams, batch: list[SequenceSample],
                  weights: LossWeights, perceptual, flow_provider,
                  weight_floor: float = 0.0):
    """(total, L_s, L_t) for a batch of sequences, state carried per frame."""
    t = batch[0].seq_len
    h, w = batch[0].gt_rgba.shape[2], batch[0].gt_rgba.shape[3]
    inputs = np.stack([s.network_input(net.config.include_mask_channel) for s in batch],
                      axis=1)  # (t, N, C, h, w)
    gts = [Tensor(np.stack([s.gt_rgb()[i] for s in batch])) for i in range(t)]
    preds = _forward_sequence(net, inputs, (h, w))
    l_s = spatial_loss(preds, gts, weights, perceptual=perceptual, weight_floor=weight_floor)
    l_t = temporal_loss(preds, gts, flow_provider, weights)
    return total_loss(l_s, l_t, weights), l_s, l_t


def train(config: TrainConfig, net: WNetParams, dataset: list[SequenceSample],
          val_samples: list[SequenceSample] | None = None,
          log_path: str | Path | None = None,
          checkpoint_path: str | Path | None = None,
          perceptual=None, flow_provider=estimate_flow,
          progress: bool = False):
    """Train in place; returns (net, log rows).

    Log rows are (step, epoch, lr, loss, L_s, L_t, val_psnr); val_psnr
    is blank between validation passes. Aborts on a NaN loss, naming
    the step. Runs are deterministic for a fixed config seed.
    """
    if not dataset:
        raise ValueError("training needs a non-empty dataset")
    rng = np.random.default_rng(config.seed)
    perceptual = PerceptualProxy(seed=config.seed) if perceptual is None else perceptual
    state = OptimState(lr=config.lr0, weight_decay=config.weight_decay)
    steps_per_epoch = (len(dataset) + config.batch_size - 1) // config.batch_size
    total_steps = config.epochs * steps_per_epoch
    rows = []
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(dataset))
        for start in range(0, len(dataset), config.batch_size):
            batch_idx = order[start:start + config.batch_size]
            batch = [augment(dataset[i], rng, config.augment) for i in batch_idx]
            lr = cosine_lr(step, max(total_steps - 1, 1), config.lr0, config.lr_min)
            loss, l_s, l_t = sequence_loss(net, batch, config.loss_weights,
                                           perceptual, flow_provider, config.weight_floor)
            if not np.isfinite(loss.data):
                raise RuntimeError(f"non-finite loss at step {step} ({float(loss.data)})")
            zero_grads(net.params)
            ag.backward(loss)
            adamw_step(net.params, state, lr=lr)
            val_psnr = ""
            if config.val_every and val_samples and (step + 1) % config.val_every == 0:
                val_psnr = f"{validate_psnr(net, val_samples):.4f}"
            rows.append((step, epoch, lr, float(loss.data), float(l_s.data),
                         float(l_t.data), val_psnr))
            if progress and step % 10 == 0:
                print(f"step {step}/{total_steps} epoch {epoch} "
                      f"loss {float(loss.data):.5f} lr {lr:.2e}", flush=True)
            step += 1
    if log_path is not None:
        write_training_log(log_path, rows, config)
    if checkpoint_path is not None:
        meta = {"train_config": config.to_dict(), "final_loss": rows[-1][3],
                "steps": step, "perceptual": getattr(perceptual, "name", "custom"),
                "optimizer": "adamw"}
        save_network(net, checkpoint_path, meta=meta)
    return net, rows


def validate_psnr(net: WNetParams, samples: list[SequenceSample]) -> float:
    """Mean per-frame PSNR over validation sequences, state carried."""
    vals = []
    with no_grad():
        for s in samples:
            inputs = s.network_input(net.config.include_mask_channel)[:, None]
            preds = _forward_sequence(net, inputs, s.gt_rgba.shape[2:])
            gt = s.gt_rgb()
            for i, p in enumerate(preds):
                img = np.clip(np.moveaxis(p.data[0], 0, -1), 0.0, 1.0)
                vals.append(psnr(img, np.moveaxis(gt[i], 0, -1)))
    return float(np.mean(vals))


def write_training_log(path: str | Path, rows, config: TrainConfig) -> None:
    import json

    with open(path, "w", newline="") as f:
        f.write("# " + json.dumps(config.to_dict()) + "\n")
        writer = csv.writer(f)
        writer.writerow(["step", "epoch", "lr", "loss", "L_s", "L_t", "val_psnr"])
        writer.writerows(rows)


@dataclass
class EvalClip:
    """Ground-truth frames plus per-frame masks for one evaluation clip."""

    gt_frames: list[np.ndarray]  # (H, W, 4) each
    masks: np.ndarray            # (t, 1, H, W) float32
    name: str = "clip"


def build_eval_clip(frames: list[np.ndarray], noise: NoiseStack, cfg: FoveaConfig,
                    name: str = "clip", start_frame: int = 0) -> EvalClip:
    h, w = frames[0].shape[:2]
    masks = masks_for_sequence(cfg, noise, (h, w), start_frame, len(frames))
    return EvalClip(gt_frames=frames, masks=masks, name=name)


def evaluate(net: WNetParams, clip: EvalClip, use_kernel_stage: bool = True,
             reset_at: tuple[int, ...] = ()) -> tuple[list[np.ndarray], QualityReport]:
    """Run reconstruction over a clip and score it.

    State is carried across the whole clip by default (so a jump cut
    mid-clip shows the recovery dip); pass frame indices in ``reset_at``
    to reset instead. Returns (predicted frames (H,W,3) in [0,1], report).
    """
    h, w = clip.gt_frames[0].shape[:2]
    state = reset_state(net.config, (h, w))
    preds = []
    with no_grad():
        for i, gt in enumerate(clip.gt_frames):
            if i in reset_at:
                state = reset_state(net.config, (h, w))
            rgba = np.moveaxis(gt[..., :4], -1, 0)[None].astype(np.float32)
            x = rgba * clip.masks[i][None]
            if net.config.include_mask_channel:
                x = np.concatenate([x, clip.masks[i][None]], axis=1)
            o, _, state = forward_full(net, x, state, use_kernel_stage=use_kernel_stage)
            preds.append(np.clip(np.moveaxis(o.data[0], 0, -1), 0.0, 1.0))
    gt_rgb = [f[..., :3] for f in clip.gt_frames]
    return preds, build_quality_report(preds, gt_rgb)
