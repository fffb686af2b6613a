"""Training losses: ramped spatial term, pairwise+warped temporal term.

The spatial loss weights frame i by (1 - e^(-0.5 i)), so the first
frame of a sequence contributes nothing while recurrent state is still
empty. The temporal loss combines finite-difference consistency against
every prior frame with an optical-flow term that warps the previous
prediction onto the current one. All L1 terms are mean-reduced so the
published weights stay scale-independent.

The perceptual term is pluggable: ``PerceptualProxy`` is a fixed,
seed-deterministic random-feature extractor standing in for a
pretrained-network distance; anything callable as f(gt, pred) -> scalar
Tensor works in its place, and reports record which was used.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .flow import FlowField


@dataclass(frozen=True)
class LossWeights:
    spatial: float = 0.8        # weight of the spatial component
    temporal: float = 1.0       # weight of the temporal component
    perceptual: float = 0.9     # within spatial: feature distance
    spatial_l1: float = 0.1     # within spatial: plain L1
    temporal_l1: float = 1.0    # within temporal: pairwise finite differences
    flow: float = 0.1           # within temporal: warped-predecessor L1

    def __post_init__(self):
        for name in self.__dataclass_fields__:
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))


def l1_mean(a, b) -> Tensor:
    return ag.mean(ag.abs_(ag.sub(_as_tensor(a), _as_tensor(b))))


def frame_weight(i: int, floor: float = 0.0) -> float:
    """Ramp (1 - e^(-0.5 i)); optional floor for single-frame experiments."""
    return max(1.0 - float(np.exp(-0.5 * i)), floor)


def spatial_loss(pred_seq, gt_seq, weights: LossWeights = LossWeights(),
                 perceptual=None, weight_floor: float = 0.0) -> Tensor:
    """Sum over frames of ramp(i) * (w_p * perceptual + w_l1 * L1)."""
    if len(pred_seq) != len(gt_seq):
        raise ValueError(f"sequence lengths differ: {len(pred_seq)} vs {len(gt_seq)}")
    total = Tensor(np.zeros((), dtype=np.float32))
    for i, (pred, gt) in enumerate(zip(pred_seq, gt_seq)):
        wi = frame_weight(i, weight_floor)
        if wi == 0.0:
            continue
        term = ag.scale(l1_mean(pred, gt), weights.spatial_l1)
        if perceptual is not None and weights.perceptual > 0:
            term = ag.add(term, ag.scale(perceptual(_as_tensor(gt), _as_tensor(pred)),
                                         weights.perceptual))
        total = ag.add(total, ag.scale(term, wi))
    return total


def temporal_loss(pred_seq, gt_seq, flow_provider,
                  weights: LossWeights = LossWeights()) -> Tensor:
    """Pairwise finite-difference consistency plus warped-predecessor L1.

    ``flow_provider(prev_frame, cur_frame) -> FlowField`` is evaluated
    on ground-truth frames; the first frame has no predecessor and is
    excluded from both terms.
    """
    t = len(pred_seq)
    if len(gt_seq) != t:
        raise ValueError(f"sequence lengths differ: {t} vs {len(gt_seq)}")
    if t < 2:
        raise ValueError(f"temporal loss needs at least 2 frames, got {t}")
    preds = [_as_tensor(p) for p in pred_seq]
    gts = [_as_tensor(g) for g in gt_seq]
    total = Tensor(np.zeros((), dtype=np.float32))
    # (p_i - p_j) - (g_i - g_j) == r_i - r_j with residuals r = p - g
    residuals = [ag.sub(p, g) for p, g in zip(preds, gts)]
    for i in range(1, t):
        for j in range(i):
            total = ag.add(total, ag.scale(ag.mean(ag.abs_(ag.sub(residuals[i], residuals[j]))),
                                           weights.temporal_l1))
    if weights.flow > 0:
        for i in range(1, t):
            vec = _batched_flow(flow_provider, gts[i - 1], gts[i])
            warped = ag.warp_image(preds[i - 1], vec)
            total = ag.add(total, ag.scale(l1_mean(preds[i], warped), weights.flow))
    return total


def _batched_flow(provider, prev: Tensor, cur: Tensor) -> np.ndarray:
    """Per-batch-item flow fields stacked to (N, H, W, 2)."""
    dp, dc = prev.data, cur.data
    if dp.ndim != 4:
        dp, dc = dp[None], dc[None]
    fields = []
    for b in range(dp.shape[0]):
        field = provider(np.moveaxis(dp[b], 0, -1), np.moveaxis(dc[b], 0, -1))
        fields.append(field.vectors if isinstance(field, FlowField) else np.asarray(field))
    return np.stack(fields)


def total_loss(l_s: Tensor, l_t: Tensor, weights: LossWeights = LossWeights()) -> Tensor:
    return ag.add(ag.scale(_as_tensor(l_s), weights.spatial),
                  ag.scale(_as_tensor(l_t), weights.temporal))


def warp(image, flow) -> Tensor:
    """Differentiable backward warp; accepts a FlowField or raw vectors."""
    vec = flow.vectors if isinstance(flow, FlowField) else np.asarray(flow, dtype=np.float64)
    return ag.warp_image(_as_tensor(image), vec)


class PerceptualProxy:
    """Mean L1 over the stages of a fixed random strided-conv feature stack.

    Channels 8-16-32-32-32, 3x3 convs with stride 2 and ReLU between
    stages; weights are He-uniform from the seed and never trained, so
    the distance is deterministic. Zero for identical inputs and
    symmetric in its arguments.
    """

    name = "random-feature-proxy"
    channels = (8, 16, 32, 32, 32)

    def __init__(self, seed: int = 0, in_channels: int = 3):
        rng = np.random.default_rng(seed)
        self.weights: list[tuple[Tensor, Tensor]] = []
        cin = in_channels
        for cout in self.channels:
            fan_in = cin * 9
            bound = np.sqrt(6.0 / fan_in)
            w = rng.uniform(-bound, bound, size=(cout, cin, 3, 3)).astype(np.float32)
            b = np.zeros(cout, dtype=np.float32)
            self.weights.append((Tensor(w), Tensor(b)))
            cin = cout

    def features(self, x: Tensor) -> list[Tensor]:
        feats = []
        cur = x
        for w, b in self.weights:
            cur = ag.relu(ag.conv2d(cur, w, b, stride=2, padding=1))
            feats.append(cur)
        return feats

    def __call__(self, a, b) -> Tensor:
        fa = self.features(_as_tensor(a))
        fb = self.features(_as_tensor(b))
        total = Tensor(np.zeros((), dtype=np.float32))
        for xa, xb in zip(fa, fb):
            total = ag.add(total, ag.mean(ag.abs_(ag.sub(xa, xb))))
        return ag.scale(total, 1.0 / len(fa))
