"""Minimal dense-tensor engine with reverse-mode differentiation.

Tensors wrap numpy arrays (float32 by default; ops preserve the input
dtype so checkers can run in float64). Each operation records its
parents and a backward closure; ``backward`` walks the tape in reverse
topological order and accumulates gradients additively, so calling it
twice without zeroing doubles every gradient. Gradient recording can be
suspended per-thread with ``no_grad()`` for inference.

Includes the optimizer (AdamW with decoupled decay), the cosine
learning-rate schedule, storage-precision emulation (fp16 truncation
and affine int8), and the versioned checkpoint format.
"""
from __future__ import annotations

import json
import struct
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

_state = threading.local()


def _recording() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    prev = _recording()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """N-D array with an optional gradient slot and tape linkage."""

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf",
                 parents: tuple = (), backward=None):
        self.data = np.asarray(data, dtype=np.float32) if not isinstance(data, np.ndarray) else data
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op = op
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op!r}, grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    arr = np.asarray(data)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    return Tensor(arr, requires_grad=requires_grad)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], op: str, backward) -> Tensor:
    if _recording() and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, op=op, parents=parents, backward=backward)
    return Tensor(data, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _result(out, (a, b), "add", bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _result(out, (a, b), "sub", bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def bw(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return _result(out, (a, b), "mul", bw)


def scale(a: Tensor, s: float) -> Tensor:
    out = a.data * s

    def bw(g):
        return (g * s,)

    return _result(out, (a,), "scale", bw)


def add_scalar(a: Tensor, s: float) -> Tensor:
    out = a.data + s

    def bw(g):
        return (g,)

    return _result(out, (a,), "add_scalar", bw)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = a.data * mask

    def bw(g):
        return (g * mask,)

    return _result(out, (a,), "relu", bw)


def abs_(a: Tensor) -> Tensor:
    out = np.abs(a.data)
    sign = np.sign(a.data)

    def bw(g):
        return (g * sign,)

    return _result(out, (a,), "abs", bw)


def mean(a: Tensor) -> Tensor:
    out = np.asarray(a.data.mean(), dtype=a.data.dtype)
    n = a.data.size

    def bw(g):
        return (np.full_like(a.data, g / n),)

    return _result(out, (a,), "mean", bw)


def sum_(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(), dtype=a.data.dtype)

    def bw(g):
        return (np.full_like(a.data, g),)

    return _result(out, (a,), "sum", bw)


def concat_channels(xs: list[Tensor]) -> Tensor:
    ref = xs[0].data.shape
    for x in xs[1:]:
        if x.data.shape[0] != ref[0] or x.data.shape[2:] != ref[2:]:
            raise ValueError(
                f"concat needs matching batch/spatial dims, got {[x.data.shape for x in xs]}")
    out = np.concatenate([x.data for x in xs], axis=1)
    splits = np.cumsum([x.data.shape[1] for x in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=1))

    return _result(out, tuple(xs), "concat_channels", bw)


def softmax_channels(a: Tensor) -> Tensor:
    """Softmax over axis 1; each position's channel vector sums to 1."""
    x = a.data
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    out = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        return (out * (g - dot),)

    return _result(out, (a,), "softmax_channels", bw)


def pad2d(a: Tensor, pad_h: int, pad_w: int) -> Tensor:
    """Zero-pad bottom/right so spatial dims grow by (pad_h, pad_w)."""
    out = np.pad(a.data, ((0, 0), (0, 0), (0, pad_h), (0, pad_w)))
    h, w = a.data.shape[2], a.data.shape[3]

    def bw(g):
        return (g[:, :, :h, :w],)

    return _result(out, (a,), "pad2d", bw)


def crop2d(a: Tensor, h: int, w: int) -> Tensor:
    out = a.data[:, :, :h, :w]
    full_h, full_w = a.data.shape[2], a.data.shape[3]

    def bw(g):
        return (np.pad(g, ((0, 0), (0, 0), (0, full_h - h), (0, full_w - w))),)

    return _result(out, (a,), "crop2d", bw)


def _conv_cols(xp: np.ndarray, kh: int, kw: int, oh: int, ow: int, stride: int,
               dilation: int) -> np.ndarray:
    """(N, OH*OW, C*KH*KW) patch matrix from a padded input."""
    from numpy.lib.stride_tricks import sliding_window_view

    span_h = dilation * (kh - 1) + 1
    span_w = dilation * (kw - 1) + 1
    win = sliding_window_view(xp, (span_h, span_w), axis=(2, 3))
    win = win[:, :, ::stride, ::stride, ::dilation, ::dilation][:, :, :oh, :ow]
    n, c = xp.shape[0], xp.shape[1]
    # (N, C, OH, OW, KH, KW) -> (N, OH*OW, C*KH*KW), single copy
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        n, oh * ow, c * kh * kw)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 1, dilation: int = 1) -> Tensor:
    """Cross-correlation with odd kernels; output dims follow the usual formula."""
    n, c, h, w = x.data.shape
    oc, ic, kh, kw = weight.data.shape
    if ic != c:
        raise ValueError(f"conv2d channel mismatch: input has {c}, weight expects {ic}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d kernels must be odd-sized, got {kh}x{kw}")
    oh = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    ow = (w + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    if oh < 1 or ow < 1:
        raise ValueError(f"conv2d output would be empty for input {h}x{w}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _conv_cols(xp, kh, kw, oh, ow, stride, dilation)
    wmat = weight.data.reshape(oc, c * kh * kw)
    out = cols @ wmat.T  # (N, OH*OW, OC)
    out = np.ascontiguousarray(out.transpose(0, 2, 1)).reshape(n, oc, oh, ow)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def bw(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n, oh * ow, oc)
        dw = np.tensordot(gmat, cols, axes=([0, 1], [0, 1])).reshape(oc, c, kh, kw)
        dcols = gmat @ wmat  # (N, OH*OW, C*KH*KW)
        dcols = dcols.reshape(n, oh, ow, c, kh, kw)
        dxp = np.zeros_like(xp)
        for ky in range(kh):
            for kx in range(kw):
                sl_y = slice(ky * dilation, ky * dilation + stride * (oh - 1) + 1, stride)
                sl_x = slice(kx * dilation, kx * dilation + stride * (ow - 1) + 1, stride)
                dxp[:, :, sl_y, sl_x] += dcols[:, :, :, :, ky, kx].transpose(0, 3, 1, 2)
        dx = dxp[:, :, padding: padding + h, padding: padding + w]
        if bias is not None:
            return dx, dw, g.sum(axis=(0, 2, 3))
        return dx, dw

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, "conv2d", bw)


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 mean pooling, stride 2; spatial dims must be even."""
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ValueError(f"avg_pool2 needs even dims, got {h}x{w}")
    d = x.data
    out = 0.25 * (d[:, :, 0::2, 0::2] + d[:, :, 1::2, 0::2]
                  + d[:, :, 0::2, 1::2] + d[:, :, 1::2, 1::2])

    def bw(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)

    return _result(out, (x,), "avg_pool2", bw)


def _up2_axis(d: np.ndarray, axis: int) -> np.ndarray:
    """Double one spatial axis with half-pixel bilinear weights, edge clamp.

    Even outputs take 0.25*prev + 0.75*self, odd take 0.75*self + 0.25*next.
    """
    d = np.moveaxis(d, axis, -1)
    prev = np.concatenate([d[..., :1], d[..., :-1]], axis=-1)
    nxt = np.concatenate([d[..., 1:], d[..., -1:]], axis=-1)
    out = np.empty(d.shape[:-1] + (2 * d.shape[-1],), dtype=d.dtype)
    out[..., 0::2] = 0.25 * prev + 0.75 * d
    out[..., 1::2] = 0.75 * d + 0.25 * nxt
    return np.moveaxis(out, -1, axis)


def _up2_axis_grad(g: np.ndarray, axis: int) -> np.ndarray:
    g = np.moveaxis(g, axis, -1)
    ge = g[..., 0::2]
    go = g[..., 1::2]
    dx = 0.75 * ge + 0.75 * go
    # prev-neighbor spread of even taps: dx[i-1] += 0.25*ge[i], edge folds back
    dx[..., :-1] += 0.25 * ge[..., 1:]
    dx[..., 0] += 0.25 * ge[..., 0]
    # next-neighbor spread of odd taps
    dx[..., 1:] += 0.25 * go[..., :-1]
    dx[..., -1] += 0.25 * go[..., -1]
    return np.moveaxis(dx, -1, axis)


def upsample_bilinear2(x: Tensor) -> Tensor:
    """2x bilinear upsampling, half-pixel centers, edges clamped."""
    out = _up2_axis(_up2_axis(x.data, 2), 3)

    def bw(g):
        return (_up2_axis_grad(_up2_axis_grad(g, 3), 2),)

    return _result(np.ascontiguousarray(out), (x,), "upsample_bilinear2", bw)


def apply_kernel_field(image: Tensor, kernels: Tensor, k: int) -> Tensor:
    """Filter each pixel with its own k x k kernel (zero padding).

    ``kernels`` has k*k channels of per-pixel weights (normalized
    upstream); output[c, y, x] = sum_j kernels[j, y, x] * image[c, y+dy_j, x+dx_j].
    """
    n, c, h, w = image.data.shape
    if kernels.data.shape != (n, k * k, h, w):
        raise ValueError(
            f"kernel field shape {kernels.data.shape} != expected {(n, k * k, h, w)}")
    pad = (k - 1) // 2
    imgp = np.pad(image.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros_like(image.data)
    for j in range(k * k):
        dy, dx = divmod(j, k)
        out += kernels.data[:, j: j + 1] * imgp[:, :, dy: dy + h, dx: dx + w]

    def bw(g):
        dimgp = np.zeros_like(imgp)
        dkern = np.zeros_like(kernels.data)
        for j in range(k * k):
            dy, dx = divmod(j, k)
            dimgp[:, :, dy: dy + h, dx: dx + w] += kernels.data[:, j: j + 1] * g
            dkern[:, j] = (imgp[:, :, dy: dy + h, dx: dx + w] * g).sum(axis=1)
        dimg = dimgp[:, :, pad: pad + h, pad: pad + w]
        return dimg, dkern

    return _result(out, (image, kernels), "apply_kernel_field", bw)


def warp_image(image: Tensor, flow: np.ndarray) -> Tensor:
    """Backward warp: out(p) = image(p - flow(p)), bilinear, edges clamped.

    ``flow`` is a constant displacement field in pixels, either (H, W, 2)
    shared by the batch or (N, H, W, 2) per item; gradients flow to the
    image argument only.
    """
    n, c, h, w = image.data.shape
    if flow.shape == (h, w, 2):
        flow = np.broadcast_to(flow, (n, h, w, 2))
    elif flow.shape != (n, h, w, 2):
        raise ValueError(f"flow shape {flow.shape} != {(h, w, 2)} or {(n, h, w, 2)}")
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64),
                         indexing="ij")
    sx = np.clip(xs[None] - flow[..., 0], 0.0, w - 1.0)
    sy = np.clip(ys[None] - flow[..., 1], 0.0, h - 1.0)
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    tx = (sx - x0).astype(image.data.dtype)[:, None]  # (n, 1, h, w)
    ty = (sy - y0).astype(image.data.dtype)[:, None]
    w00 = (1 - tx) * (1 - ty)
    w10 = tx * (1 - ty)
    w01 = (1 - tx) * ty
    w11 = tx * ty
    d = image.data
    bidx = np.arange(n)[:, None, None, None]
    cidx = np.arange(c)[None, :, None, None]
    y0b, x0b = y0[:, None], x0[:, None]
    y1b, x1b = y1[:, None], x1[:, None]
    out = (d[bidx, cidx, y0b, x0b] * w00 + d[bidx, cidx, y0b, x1b] * w10
           + d[bidx, cidx, y1b, x0b] * w01 + d[bidx, cidx, y1b, x1b] * w11)

    def bw(g):
        dimg = np.zeros_like(image.data)
        np.add.at(dimg, (bidx, cidx, y0b, x0b), g * w00)
        np.add.at(dimg, (bidx, cidx, y0b, x1b), g * w10)
        np.add.at(dimg, (bidx, cidx, y1b, x0b), g * w01)
        np.add.at(dimg, (bidx, cidx, y1b, x1b), g * w11)
        return (dimg,)

    return _result(np.ascontiguousarray(out), (image,), "warp_image", bw)


def backward(loss: Tensor) -> None:
    """Reverse-mode pass from a scalar loss; accumulates into .grad slots.

    Raises on NaN gradients, naming the op that produced them.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None or node._backward is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if not p.requires_grad:
                continue
            if np.isnan(pg).any():
                raise FloatingPointError(f"NaN gradient produced by op {node.op!r}")
            if p._backward is None:  # leaf parameter: accumulate persistently
                p.grad = pg.copy() if p.grad is None else p.grad + pg
            else:
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg


def zero_grads(params) -> None:
    for p in (params.values() if isinstance(params, dict) else params):
        p.grad = None


@dataclass
class OptimState:
    """AdamW accumulators; moments are shaped like their parameters."""

    lr: float = 1.25e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-2
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: dict[str, Tensor], state: OptimState, lr: float | None = None) -> None:
    """One decoupled-weight-decay Adam update with bias-corrected moments."""
    lr = state.lr if lr is None else lr
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = p.data - lr * update - lr * state.weight_decay * p.data


def cosine_lr(step: int, total_steps: int, lr0: float = 1.25e-3,
              lr_min: float = 1e-8) -> float:
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return lr0
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + np.cos(np.pi * step / total_steps))


FP16_MAX = 65504.0


def truncate_fp16(arr: np.ndarray) -> np.ndarray:
    """Round-trip through IEEE binary16 storage; overflow clamps to +-65504."""
    dtype = arr.dtype
    clipped = np.clip(arr, -FP16_MAX, FP16_MAX)
    return clipped.astype(np.float16).astype(dtype)


def quantize_int8_affine(arr: np.ndarray) -> tuple[np.ndarray, float, float]:
    """Per-tensor affine int8: returns (q, scale, zero_point).

    zero_point is kept in float so a constant tensor round-trips
    exactly; degenerate ranges use scale 1 with all-zero codes.
    """
    if not np.all(np.isfinite(arr)):
        raise ValueError("int8 quantization requires finite values")
    lo, hi = float(arr.min()), float(arr.max())
    if hi == lo:
        scale = 1.0
        zero_point = -lo
        q = np.zeros(arr.shape, dtype=np.int8)
        return q, scale, zero_point
    scale = (hi - lo) / 255.0
    zero_point = -lo / scale - 128.0
    q = np.clip(np.round(arr / scale + zero_point), -128, 127).astype(np.int8)
    return q, scale, zero_point


def dequantize_int8_affine(q: np.ndarray, scale: float, zero_point: float) -> np.ndarray:
    return ((q.astype(np.float64) - zero_point) * scale).astype(np.float32)


_CKPT_MAGIC = b"FVRCKPT1"


def save_checkpoint(path: str | Path, params: dict[str, np.ndarray],
                    meta: dict | None = None) -> None:
    """Versioned header + named parameter manifest + little-endian payload."""
    manifest = []
    blobs = []
    for name, arr in params.items():
        arr32 = np.ascontiguousarray(arr, dtype="<f4")
        manifest.append({"name": name, "shape": list(arr.shape), "dtype": "float32"})
        blobs.append(arr32.tobytes())
    header = json.dumps({"version": 1, "params": manifest, "meta": meta or {}}).encode()
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    blob = Path(path).read_bytes()
    if blob[:8] != _CKPT_MAGIC:
        raise ValueError(f"not a checkpoint file: {path}")
    (hlen,) = struct.unpack("<I", blob[8:12])
    header = json.loads(blob[12: 12 + hlen].decode())
    if header.get("version") != 1:
        raise ValueError(f"unsupported checkpoint version {header.get('version')}")
    params: dict[str, np.ndarray] = {}
    off = 12 + hlen
    for entry in header["params"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        nbytes = count * 4
        arr = np.frombuffer(blob[off: off + nbytes], dtype="<f4").reshape(entry["shape"]).copy()
        params[entry["name"]] = arr
        off += nbytes
    return params, header.get("meta", {})


def gradcheck(fn, inputs: list[np.ndarray], eps: float = 1e-3, samples: int = 24,
              seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` maps Tensors to a scalar Tensor. Inputs are promoted to
    float64 so the finite differences themselves are trustworthy.
    """
    rng = np.random.default_rng(seed)
    tensors = [Tensor(np.asarray(x, dtype=np.float64), requires_grad=True) for x in inputs]
    loss = fn(*tensors)
    backward(loss)
    worst = 0.0
    for t in tensors:
        flat = t.data.reshape(-1)
        gflat = t.grad.reshape(-1)
        n = flat.size
        idx = np.arange(n) if n <= samples else rng.choice(n, size=samples, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(fn(*[Tensor(x.data) for x in tensors]).data)
            flat[i] = orig - eps
            fm = float(fn(*[Tensor(x.data) for x in tensors]).data)
            flat[i] = orig
            fd = (fp - fm) / (2.0 * eps)
            denom = max(abs(fd), abs(gflat[i]), 1.0)
            worst = max(worst, abs(fd - gflat[i]) / denom)
    return worst
