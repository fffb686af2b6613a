"""Hybrid reconstruction network: direct-prediction U-Net D feeding a
kernel-prediction stage K.

D is a recurrent U-Net over the sparse input (RGBA + optional mask
channel + previous-output feedback): encoder blocks are two 3x3
convs + ReLU followed by 2x average pooling; the bottleneck and decoder
blocks are two 3x3 convs + ReLU with skip concatenation from the
matching encoder scale, a recurrent concat of the block's previous
hidden state, and 2x bilinear upsampling between scales. A 3x3 head
projects to the coarse image O_d.

K mirrors the block layout but owns only one 1x1 conv per block, which
predicts a per-pixel filter (kernel_size^2 logits) from D's decoder
hidden state at that block's scale. O_d is pushed through the U shape,
filtered at every block by the softmax-normalized predicted kernel,
pooled on the way down and bilinearly upsampled on the way up; the
result of the last filter is the final frame.

A block string like "e16-e16-e24-d32-d24-d16-d16" lists encoder blocks
then bottleneck+decoder blocks with their conv widths; the structural
encoder path (e-blocks plus the bottleneck) is one block longer than
the decoder path, so e-count must equal d-count minus one.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autograd as ag
from .autograd import Tensor

DESK_BLOCKS = "e16-e16-e24-d32-d24-d16-d16"
FULL_BLOCKS = "e64-e64-e80-d96-d80-d64-d64"


@dataclass(frozen=True)
class NetConfig:
    block_config: tuple[tuple[str, int], ...]
    kernel_size: int = 3        # conv size in D
    predicted_kernel: int = 3   # per-pixel filter size applied by K
    recurrent: bool = True
    include_mask_channel: bool = True

    @staticmethod
    def from_string(blocks: str = DESK_BLOCKS, **kwargs) -> "NetConfig":
        parsed = []
        for tok in blocks.split("-"):
            kind, ch = tok[0], int(tok[1:])
            if kind not in ("e", "d") or ch <= 0:
                raise ValueError(f"bad block token {tok!r}")
            parsed.append((kind, ch))
        return NetConfig(block_config=tuple(parsed), **kwargs)

    def __post_init__(self):
        kinds = [k for k, _ in self.block_config]
        n_e = kinds.count("e")
        n_d = kinds.count("d")
        if kinds != ["e"] * n_e + ["d"] * n_d:
            raise ValueError("block config must list e-blocks then d-blocks")
        if n_e != n_d - 1:
            raise ValueError(
                f"structural encoder count (e-blocks + bottleneck = {n_e + 1}) must be one "
                f"more than decoder count ({n_d - 1}); got {n_e} e and {n_d} d blocks")
        if self.predicted_kernel % 2 == 0 or self.kernel_size % 2 == 0:
            raise ValueError("kernel sizes must be odd")

    @property
    def n_enc(self) -> int:
        return sum(1 for k, _ in self.block_config if k == "e")

    @property
    def n_dec(self) -> int:
        return len(self.block_config) - self.n_enc

    @property
    def divisor(self) -> int:
        return 2 ** self.n_enc

    @property
    def in_channels(self) -> int:
        ch = 4 + (1 if self.include_mask_channel else 0)
        if self.recurrent:
            ch += 3  # previous-output feedback image
        return ch

    def channels(self) -> list[int]:
        return [c for _, c in self.block_config]

    def to_string(self) -> str:
        return "-".join(f"{k}{c}" for k, c in self.block_config)


@dataclass
class WNetParams:
    config: NetConfig
    params: dict[str, Tensor]

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.params.items()}


@dataclass
class RecurrentState:
    """Hidden tensors of D's bottleneck/decoder blocks plus O_d feedback.

    ``film_dims`` is the unpadded resolution the state belongs to; a
    forward pass at a different resolution must reset the state first.
    Zero-initialized states are stored with batch dim 1 and broadcast to
    the batch of the incoming frame.
    """

    film_dims: tuple[int, int]
    hidden: list[Tensor | None]
    prev_output: Tensor | None = None


def reset_state(config: NetConfig, dims: tuple[int, int]) -> RecurrentState:
    return RecurrentState(film_dims=tuple(dims), hidden=[None] * config.n_dec, prev_output=None)


def _he_uniform(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def _conv_channels(config: NetConfig) -> tuple[list[tuple[int, int]], list[int]]:
    """Per-D-block (in, out) conv widths and K's per-block input widths."""
    ch = config.channels()
    n_e = config.n_enc
    d_ch = ch[n_e:]
    d_in: list[int] = []
    for j in range(config.n_dec):
        if j == 0:
            inc = ch[n_e - 1]
        else:
            inc = d_ch[j - 1] + ch[n_e - j]  # upsampled previous + encoder skip
        if config.recurrent:
            inc += d_ch[j]
        d_in.append(inc)
    e_in = [config.in_channels] + ch[: n_e - 1]
    d_blocks = list(zip(d_in, d_ch))
    e_blocks = list(zip(e_in, ch[:n_e]))
    # K consumes the decoder hidden state present at each block's scale
    levels = _block_levels(config)
    hd_ch_by_level = {config.n_enc - j: d_ch[j] for j in range(config.n_dec)}
    k_in = [hd_ch_by_level[lv] for lv in levels]
    return e_blocks + d_blocks, k_in


def _block_levels(config: NetConfig) -> list[int]:
    """Downsampling level (log2) at which each block operates."""
    levels = []
    for i in range(config.n_enc):
        levels.append(i)
    for j in range(config.n_dec):
        levels.append(config.n_enc - j)
    return levels


def init_network(config: NetConfig, seed: int = 0) -> WNetParams:
    """He-uniform conv weights, zero biases; deterministic per seed."""
    rng = np.random.default_rng(seed)
    k = config.kernel_size
    params: dict[str, Tensor] = {}

    def conv(name: str, cin: int, cout: int, ksz: int):
        params[f"{name}.w"] = Tensor(_he_uniform(rng, (cout, cin, ksz, ksz)), requires_grad=True)
        params[f"{name}.b"] = Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True)

    d_blocks, k_in = _conv_channels(config)
    for i, (cin, cout) in enumerate(d_blocks):
        conv(f"D.block{i}.conv1", cin, cout, k)
        conv(f"D.block{i}.conv2", cout, cout, k)
    conv("D.head", d_blocks[-1][1], 3, k)
    kf = config.predicted_kernel
    for i, cin in enumerate(k_in):
        conv(f"K.block{i}", cin, kf * kf, 1)
    return WNetParams(config=config, params=params)


def _block_forward(params: dict[str, Tensor], name: str, x: Tensor) -> Tensor:
    h = ag.relu(ag.conv2d(x, params[f"{name}.conv1.w"], params[f"{name}.conv1.b"], padding=1))
    return ag.relu(ag.conv2d(h, params[f"{name}.conv2.w"], params[f"{name}.conv2.b"], padding=1))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))


def _hidden_or_zero(state_h: Tensor | None, n: int, c: int, h: int, w: int) -> Tensor:
    if state_h is None:
        return Tensor(np.zeros((n, c, h, w), dtype=np.float32))
    if state_h.data.shape[0] == n:
        return state_h
    if state_h.data.shape[0] == 1:
        return Tensor(np.broadcast_to(state_h.data, (n,) + state_h.data.shape[1:]).copy())
    raise ValueError(
        f"recurrent state batch {state_h.data.shape[0]} incompatible with input batch {n}")


def forward_D(net: WNetParams, x, state: RecurrentState):
    """Coarse reconstruction; returns (O_d, H_d list, state').

    ``x`` is the sparse RGBA(+mask) input; the previous output image is
    concatenated from the state when the config is recurrent. Spatial
    dims must already be divisible by config.divisor.
    """
    cfg = net.config
    p = net.params
    x = _as_tensor(x)
    n, _, h, w = x.data.shape
    if h % cfg.divisor or w % cfg.divisor:
        raise ValueError(f"input {h}x{w} not divisible by {cfg.divisor}; pad upstream")
    if state.film_dims != (h, w):
        raise ValueError(
            f"carried state is for {state.film_dims}, input is {(h, w)}; reset the state")
    ch = cfg.channels()
    n_e, n_d = cfg.n_enc, cfg.n_dec
    d_ch = ch[n_e:]

    if cfg.recurrent:
        prev = state.prev_output
        if prev is None:
            prev = Tensor(np.zeros((n, 3, h, w), dtype=np.float32))
        else:
            prev = _hidden_or_zero(prev, n, 3, h, w)
        x = ag.concat_channels([x, prev])
    if x.data.shape[1] != cfg.in_channels:
        raise ValueError(f"input has {x.data.shape[1]} channels, expected {cfg.in_channels}")

    skips: list[Tensor] = []
    cur = x
    for i in range(n_e):
        cur = _block_forward(p, f"D.block{i}", cur)
        skips.append(cur)
        cur = ag.avg_pool2(cur)

    h_d: list[Tensor] = []
    new_hidden: list[Tensor] = []
    for j in range(n_d):
        if j > 0:
            cur = ag.concat_channels([ag.upsample_bilinear2(cur), skips[n_e - j]])
        if cfg.recurrent:
            sh, sw = cur.data.shape[2], cur.data.shape[3]
            hid = _hidden_or_zero(state.hidden[j], n, d_ch[j], sh, sw)
            cur = ag.concat_channels([cur, hid])
        cur = _block_forward(p, f"D.block{n_e + j}", cur)
        h_d.append(cur)
        new_hidden.append(cur)
    o_d = ag.conv2d(h_d[-1], p["D.head.w"], p["D.head.b"], padding=1)
    state_out = RecurrentState(film_dims=(h, w), hidden=new_hidden, prev_output=o_d)
    return o_d, h_d, state_out


@dataclass
class KernelField:
    """Per-block predicted filter logits; normalized() softmaxes over taps."""

    logits: Tensor
    kernel_size: int

    def normalized(self) -> Tensor:
        return ag.softmax_channels(self.logits)


def predict_kernel_fields(net: WNetParams, h_d: list[Tensor]) -> list[KernelField]:
    cfg = net.config
    p = net.params
    levels = _block_levels(cfg)
    hd_by_level = {cfg.n_enc - j: h_d[j] for j in range(cfg.n_dec)}
    fields = []
    for i, lv in enumerate(levels):
        logits = ag.conv2d(hd_by_level[lv], p[f"K.block{i}.w"], p[f"K.block{i}.b"], padding=0)
        fields.append(KernelField(logits=logits, kernel_size=cfg.predicted_kernel))
    return fields


def forward_K(net: WNetParams, h_d: list[Tensor], o_d: Tensor) -> Tensor:
    """Refinement: filter O_d through the U shape with predicted kernels."""
    cfg = net.config
    fields = predict_kernel_fields(net, h_d)
    kf = cfg.predicted_kernel
    img = o_d
    n_blocks = len(cfg.block_config)
    for i, (kind, _) in enumerate(cfg.block_config):
        img = ag.apply_kernel_field(img, fields[i].normalized(), kf)
        if kind == "e":
            img = ag.avg_pool2(img)
        elif i < n_blocks - 1:
            img = ag.upsample_bilinear2(img)
    return img


def forward_full(net: WNetParams, sparse_input, state: RecurrentState,
                 use_kernel_stage: bool = True):
    """Full pipeline with padding handled; returns (O, O_d, state').

    ``sparse_input`` is (N, 4[+1], H, W); outputs are cropped back to
    H x W. Set ``use_kernel_stage=False`` for the direct-prediction
    ablation (O = O_d).
    """
    cfg = net.config
    x = np.asarray(sparse_input.data if isinstance(sparse_input, Tensor) else sparse_input,
                   dtype=np.float32)
    n, c, h, w = x.shape
    if state.film_dims != (h, w):
        raise ValueError(
            f"carried state is for {state.film_dims}, input is {(h, w)}; reset the state")
    pad_h = (-h) % cfg.divisor
    pad_w = (-w) % cfg.divisor
    hp, wp = h + pad_h, w + pad_w
    xt = Tensor(np.pad(x, ((0, 0), (0, 0), (0, pad_h), (0, pad_w))))
    padded_state = RecurrentState(film_dims=(hp, wp), hidden=state.hidden,
                                  prev_output=state.prev_output)
    o_d_p, h_d, new_padded = forward_D(net, xt, padded_state)
    o_p = forward_K(net, h_d, o_d_p) if use_kernel_stage else o_d_p
    o = ag.crop2d(o_p, h, w)
    o_d = ag.crop2d(o_d_p, h, w)
    state_out = RecurrentState(film_dims=(h, w), hidden=new_padded.hidden,
                               prev_output=new_padded.prev_output)
    return o, o_d, state_out


def detach_state(state: RecurrentState) -> RecurrentState:
    """Cut the tape between sequences while carrying values forward."""
    hidden = [None if t is None else Tensor(t.data.copy()) for t in state.hidden]
    prev = None if state.prev_output is None else Tensor(state.prev_output.data.copy())
    return RecurrentState(film_dims=state.film_dims, hidden=hidden, prev_output=prev)


def save_network(net: WNetParams, path, meta: dict | None = None) -> None:
    meta = dict(meta or {})
    meta["block_config"] = net.config.to_string()
    meta["predicted_kernel"] = net.config.predicted_kernel
    meta["recurrent"] = net.config.recurrent
    meta["include_mask_channel"] = net.config.include_mask_channel
    ag.save_checkpoint(path, net.named_arrays(), meta=meta)


def load_network(path) -> tuple[WNetParams, dict]:
    arrays, meta = ag.load_checkpoint(path)
    config = NetConfig.from_string(
        meta["block_config"],
        predicted_kernel=int(meta.get("predicted_kernel", 3)),
        recurrent=bool(meta.get("recurrent", True)),
        include_mask_channel=bool(meta.get("include_mask_channel", True)),
    )
    net = init_network(config, seed=0)
    for name, arr in arrays.items():
        if name not in net.params:
            raise ValueError(f"checkpoint parameter {name!r} not in network")
        if net.params[name].data.shape != arr.shape:
            raise ValueError(f"checkpoint shape mismatch for {name!r}")
        net.params[name] = Tensor(arr.astype(np.float32), requires_grad=True)
    return net, meta
