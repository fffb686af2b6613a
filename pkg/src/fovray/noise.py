"""Tileable rank-noise stacks: uniform, blue, and spatio-temporal blue.

Every generated frame is a permutation of the exact rank set
{(i+0.5)/(H*W)}, so thresholding a frame at tau selects round(tau*H*W)
pixels up to rounding. Blue-noise frames are built with the
void-and-cluster method under a toroidal Gaussian energy; the
spatio-temporal generator extends the energy to the 3D torus with a
separable spatial/temporal Gaussian while constraining each time slice
to stay histogram-uniform, which makes every pixel's value sequence
high-frequency over time as well.

Generation is greedy and sequential, so stacks are meant to be
generated once and cached to disk; rendering only performs lookups.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DEFAULT_TILE = 64
DEFAULT_FRAMES = 8
DEFAULT_SIGMA_SPATIAL = 1.9
DEFAULT_SIGMA_TEMPORAL = 1.2

_JITTER = 1e-9  # deterministic tie-break scale, far below any kernel value


@dataclass(frozen=True)
class NoiseStack:
    """T x H x W stack of rank-noise values in [0,1)."""

    values: np.ndarray  # (T, H, W) float32
    seed: int = 0
    sigma_spatial: float = 0.0
    sigma_temporal: float = 0.0

    def __post_init__(self):
        v = self.values
        if v.ndim != 3 or v.shape[0] < 1:
            raise ValueError(f"noise stack must be (T>=1, H, W), got {v.shape}")
        n = v.shape[1] * v.shape[2]
        ranks = (np.arange(n) + 0.5) / n
        for t in range(v.shape[0]):
            if not np.array_equal(np.sort(v[t].ravel()), ranks.astype(v.dtype)):
                raise ValueError(f"frame {t} is not a rank permutation")
        self.values.setflags(write=False)

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def dims(self) -> tuple[int, int]:
        return self.values.shape[1], self.values.shape[2]


def _rank_values(order_r: np.ndarray, n: int, shape: tuple[int, int]) -> np.ndarray:
    """rank-per-site array -> values (r+0.5)/n reshaped to (H, W)."""
    return ((order_r.astype(np.float64) + 0.5) / n).reshape(shape).astype(np.float32)


def gen_uniform_noise(h: int, w: int, t: int = 1, seed: int = 0) -> NoiseStack:
    """Independent random rank permutation per frame."""
    if h < 8 or w < 8:
        raise ValueError(f"noise dims must be >= 8, got {h}x{w}")
    rng = np.random.default_rng(seed)
    n = h * w
    frames = np.empty((t, h, w), dtype=np.float32)
    for k in range(t):
        ranks = rng.permutation(n)
        frames[k] = _rank_values(ranks, n, (h, w))
    return NoiseStack(values=frames, seed=seed)


def _gauss_kernel_1d(radius: int, sigma: float) -> np.ndarray:
    d = np.arange(-radius, radius + 1, dtype=np.float64)
    return np.exp(-(d * d) / (2.0 * sigma * sigma))


def _toroidal_gauss_temporal(t: int, sigma: float) -> np.ndarray:
    # full-length kernel over wrapped temporal distance
    dt = np.arange(t, dtype=np.float64)
    dt = np.minimum(dt, t - dt)
    return np.exp(-(dt * dt) / (2.0 * sigma * sigma))


class _EnergyField2D:
    """Incrementally maintained toroidal Gaussian energy of a point set."""

    def __init__(self, h: int, w: int, sigma: float):
        self.h, self.w = h, w
        self.radius = max(2, int(np.ceil(3.5 * sigma)))
        k1 = _gauss_kernel_1d(self.radius, sigma)
        self.kernel = np.outer(k1, k1)
        self.field = np.zeros((h, w), dtype=np.float64)
        offs = np.arange(-self.radius, self.radius + 1)
        self._offs = offs

    def splat(self, y: int, x: int, sign: float = 1.0) -> None:
        ys = (y + self._offs) % self.h
        xs = (x + self._offs) % self.w
        self.field[np.ix_(ys, xs)] += sign * self.kernel


def gen_blue_noise_2d(h: int, w: int, seed: int = 0,
                      sigma: float = DEFAULT_SIGMA_SPATIAL) -> NoiseStack:
    """Single-frame blue noise via void-and-cluster on the 2D torus.

    The resulting rank field is deficient in low spatial frequencies
    relative to a uniform permutation of the same rank set.
    """
    if h < 16 or w < 16:
        raise ValueError(f"blue-noise dims must be >= 16, got {h}x{w}")
    rng = np.random.default_rng(seed)
    n = h * w
    jitter = rng.uniform(0.0, _JITTER, size=(h, w))
    energy = _EnergyField2D(h, w, sigma)

    # prototype pattern: random tenth of the sites, then relaxed
    n1 = max(2, n // 10)
    ones = np.zeros((h, w), dtype=bool)
    init = rng.choice(n, size=n1, replace=False)
    ones.ravel()[init] = True
    for y, x in zip(*np.nonzero(ones)):
        energy.splat(y, x)

    big = 1e30
    for _ in range(4 * n1):  # relaxation: move tightest cluster into largest void
        e = energy.field + jitter
        cl = np.argmax(np.where(ones, e, -big))
        cy, cx = divmod(int(cl), w)
        ones[cy, cx] = False
        energy.splat(cy, cx, -1.0)
        e = energy.field + jitter
        vd = np.argmin(np.where(ones, big, e))
        vy, vx = divmod(int(vd), w)
        ones[vy, vx] = True
        energy.splat(vy, vx, +1.0)
        if (vy, vx) == (cy, cx):
            break

    order = np.full((h, w), -1, dtype=np.int64)
    # rank the prototype points by repeatedly removing the tightest cluster
    proto = ones.copy()
    proto_energy = _EnergyField2D(h, w, sigma)
    proto_energy.field = energy.field.copy()
    for rank in range(n1 - 1, -1, -1):
        e = proto_energy.field + jitter
        cl = np.argmax(np.where(proto, e, -big))
        cy, cx = divmod(int(cl), w)
        proto[cy, cx] = False
        proto_energy.splat(cy, cx, -1.0)
        order[cy, cx] = rank
    # grow the pattern: always insert into the largest remaining void.
    # On the torus the void-energy of the zero set is an affine flip of the
    # one-set energy, so the same selection rule covers both growth phases.
    for rank in range(n1, n):
        e = energy.field + jitter
        vd = np.argmin(np.where(ones, big, e))
        vy, vx = divmod(int(vd), w)
        ones[vy, vx] = True
        energy.splat(vy, vx, +1.0)
        order[vy, vx] = rank
    values = _rank_values(order.ravel(), n, (h, w))[None, ...]
    return NoiseStack(values=values, seed=seed, sigma_spatial=sigma)


TEMPORAL_WEIGHT = 0.5   # temporal-penalty weight relative to the spatial peak
TEMPORAL_DECAY = 0.6    # recency decay of the temporal penalty per value band
RELAX_SWEEPS = 4        # member-swap relaxation passes per band


def _balanced_band_sizes(n: int, t: int) -> np.ndarray:
    """sizes[frame, band] with exact row and column sums of n/t (+-1)."""
    sizes = np.full((t, t), n // t, dtype=np.int64)
    rem = n % t
    for band in range(t):
        for fr in range(t):
            if (band + fr) % t < rem:
                sizes[fr, band] += 1
    return sizes


def gen_stbn(h: int, w: int, t: int, seed: int = 0,
             sigma_spatial: float = DEFAULT_SIGMA_SPATIAL,
             sigma_temporal: float = DEFAULT_SIGMA_TEMPORAL) -> NoiseStack:
    """Spatio-temporal blue noise on the 3D torus.

    The value range is split into T bands. Band by band, every pixel is
    assigned the frame in which it will carry a value from that band,
    under two exact constraints: each frame receives its per-band quota,
    and each pixel uses every band exactly once across the loop. The
    Latin-style band structure stratifies the T values at any pixel over
    [0,1), which pins the time-averaged mask density at every pixel to
    within 1/T of its threshold. Within the quotas, frames grow their
    bands void-and-cluster style: a frame always extends with the pixel
    of least accumulated energy, where energy adds an in-frame spatial
    Gaussian (sigma_spatial, pixels, toroidal) and a recency-decaying
    temporal Gaussian on the pixel's column (sigma_temporal, frames,
    toroidal) that pushes a pixel's consecutive frames into distant
    bands. Each band ends with member-swap relaxation between frames,
    and a final per-frame pass orders each band's pixels by the same
    spatial energy rule to fix the exact ranks. Quota dead-ends near
    band boundaries are resolved by reassigning a chain of pixels
    between frames (one always exists because the quotas are balanced).
    """
    if t < 2:
        raise ValueError(f"stbn needs T >= 2 frames, got {t}")
    if sigma_spatial <= 0 or sigma_temporal <= 0:
        raise ValueError("sigmas must be > 0")
    if h < 16 or w < 16:
        raise ValueError(f"stbn dims must be >= 16, got {h}x{w}")
    rng = np.random.default_rng(seed)
    n = h * w
    rs = max(2, int(np.ceil(3.5 * sigma_spatial)))
    k1 = _gauss_kernel_1d(rs, sigma_spatial)
    k_spatial = np.outer(k1, k1)
    k_center = k_spatial[rs, rs]
    g_t = TEMPORAL_WEIGHT * _toroidal_gauss_temporal(t, sigma_temporal)
    offs = np.arange(-rs, rs + 1)
    tidx = np.arange(t)
    big = 1e30

    sizes = _balanced_band_sizes(n, t)
    used = np.zeros((n, t), dtype=bool)       # pixel x frame: band already fixed
    band_of = np.empty((t, n), dtype=np.int64)  # [frame][pixel] -> band
    energy = np.zeros((t, n), dtype=np.float64)
    temp_pen = np.zeros((n, t), dtype=np.float64)
    jitter = rng.uniform(0.0, _JITTER, size=(t, n))

    def splat(fr: int, pix: int, sign: float = 1.0) -> None:
        y, x = divmod(int(pix), w)
        energy[fr].reshape(h, w)[np.ix_((y + offs) % h, (x + offs) % w)] += sign * k_spatial

    def place(fr: int, pix: int, band: int, members) -> None:
        used[pix, fr] = True
        band_of[fr][pix] = band
        members[fr].append(pix)
        splat(fr, pix)
        temp_pen[pix] += g_t[(tidx - fr) % t]

    def unplace(fr: int, pix: int, members) -> None:
        used[pix, fr] = False
        members[fr].remove(pix)
        splat(fr, pix, -1.0)
        temp_pen[pix] -= g_t[(tidx - fr) % t]

    def augment(fr_need: int, consumed: np.ndarray, members, band: int) -> None:
        # BFS over frames: find a chain of member moves that frees a
        # consumable pixel for fr_need; balanced quotas guarantee one exists.
        parent: dict[int, tuple[int, int]] = {}  # frame -> (prev frame, pixel moved)
        frontier = [fr_need]
        seen = {fr_need}
        while frontier:
            nxt = []
            for f in frontier:
                free = np.flatnonzero(~consumed & ~used[:, f])
                if free.size:
                    p = int(free[np.argmin(energy[f][free] + temp_pen[free, f] + jitter[f][free])])
                    consumed[p] = True
                    place(f, p, band, members)
                    while f != fr_need:  # cascade moves back toward fr_need
                        g, q = parent[f]
                        unplace(f, q, members)
                        place(g, q, band, members)
                        f = g
                    return
                for g in range(t):
                    if g in seen:
                        continue
                    movable = [q for q in members[g] if not used[q, f]]
                    if movable:
                        # moving q from g to f frees a quota slot in g
                        parent[g] = (f, movable[0])
                        seen.add(g)
                        nxt.append(g)
            frontier = nxt
        raise RuntimeError("band quota augmentation failed")  # unreachable

    def relax(members, band: int) -> None:
        # swap badly clustered members between frames; keeps quotas exact
        for _ in range(RELAX_SWEEPS):
            improved = 0
            for fr in range(t):
                arr = np.array(members[fr], dtype=np.int64)
                if arr.size < 8:
                    continue
                self_e = energy[fr][arr] - k_center
                for p in arr[np.argsort(self_e)[::-1][: arr.size // 8]]:
                    p = int(p)
                    ep = energy[fr][p] - k_center
                    best_gain, fr2 = 0.0, -1
                    for g in range(t):
                        if g == fr or used[p, g]:
                            continue
                        gain = energy[g][p] - ep
                        if gain < best_gain:
                            best_gain, fr2 = gain, g
                    if fr2 < 0:
                        continue
                    best_q, best_total = None, -1e-9
                    for q in members[fr2]:
                        if used[q, fr]:
                            continue
                        dq = energy[fr][q] - (energy[fr2][q] - k_center)
                        if best_gain + dq < best_total:
                            best_total = best_gain + dq
                            best_q = q
                    if best_q is not None:
                        unplace(fr, p, members)
                        unplace(fr2, best_q, members)
                        place(fr2, p, band, members)
                        place(fr, best_q, band, members)
                        improved += 1
            if improved == 0:
                break

    for band in range(t):
        cap = sizes[:, band].copy()
        consumed = np.zeros(n, dtype=bool)
        members: list[list[int]] = [[] for _ in range(t)]
        while cap.sum() > 0:
            progressed = False
            for fr in rng.permutation(t):
                if cap[fr] == 0:
                    continue
                e = np.where(consumed | used[:, fr], big,
                             energy[fr] + temp_pen[:, fr] + jitter[fr])
                p = int(np.argmin(e))
                if e[p] >= big:
                    continue
                consumed[p] = True
                place(fr, p, band, members)
                cap[fr] -= 1
                progressed = True
            if not progressed:
                for fr in range(t):
                    while cap[fr] > 0:
                        augment(fr, consumed, members, band)
                        cap[fr] -= 1
        relax(members, band)
        temp_pen *= TEMPORAL_DECAY

    # exact ranks: per frame, order each band's pixels by a fresh
    # void-and-cluster pass over the frame's cumulative spatial energy.
    values = np.empty((t, h, w), dtype=np.float32)
    for fr in range(t):
        order = np.empty(n, dtype=np.int64)
        e = np.zeros(n, dtype=np.float64)
        jit = rng.uniform(0.0, _JITTER, size=n)
        level = 0
        for band in range(t):
            sel = band_of[fr] == band
            remaining = int(sel.sum())
            blocked = np.where(sel, 0.0, big)
            for _ in range(remaining):
                p = int(np.argmin(e + jit + blocked))
                order[p] = level
                level += 1
                blocked[p] = big
                splat_y, splat_x = divmod(p, w)
                e.reshape(h, w)[np.ix_((splat_y + offs) % h, (splat_x + offs) % w)] += k_spatial
        values[fr] = _rank_values(order, n, (h, w))
    return NoiseStack(values=values, seed=seed,
                      sigma_spatial=sigma_spatial, sigma_temporal=sigma_temporal)


def tile_lookup(stack: NoiseStack, u: int, v: int, frame: int) -> float:
    """Toroidal lookup: coordinates wrap over the tile, frames loop."""
    t = stack.values.shape[0]
    h, w = stack.dims
    return float(stack.values[frame % t, v % h, u % w])


def tile_field(stack: NoiseStack, h: int, w: int, frame: int) -> np.ndarray:
    """Frame `frame` of the stack tiled out to an (h, w) field."""
    t = stack.values.shape[0]
    th, tw = stack.dims
    vs = np.arange(h) % th
    us = np.arange(w) % tw
    return stack.values[frame % t][np.ix_(vs, us)]


def radial_power_spectrum(frame: np.ndarray, n_bands: int = 32) -> np.ndarray:
    """Mean squared DFT magnitude per annular frequency band, DC excluded.

    Band k covers radial frequency [k, k+1) * (rho_max / n_bands) with
    rho_max = sqrt(2)/2 cycles/pixel (the spectrum corner).
    """
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 2 or frame.shape[0] != frame.shape[1]:
        raise ValueError(f"radial spectrum needs a square slice, got {frame.shape}")
    p = np.abs(np.fft.fft2(frame)) ** 2
    p[0, 0] = 0.0
    fy = np.fft.fftfreq(frame.shape[0])[:, None]
    fx = np.fft.fftfreq(frame.shape[1])[None, :]
    rho = np.sqrt(fx * fx + fy * fy)
    rho_max = np.sqrt(2.0) / 2.0
    band = np.minimum((rho / rho_max * n_bands).astype(np.int64), n_bands - 1)
    band[0, 0] = 0
    sums = np.bincount(band.ravel(), weights=p.ravel(), minlength=n_bands)
    counts = np.bincount(band.ravel(), minlength=n_bands).astype(np.float64)
    counts[0] = max(counts[0] - 1.0, 1.0)  # DC removed from its band
    return sums / np.maximum(counts, 1.0)


def low_band_energy(frame: np.ndarray, rho_cut: float = 0.125) -> float:
    """Mean spectral energy at radial frequencies 0 < rho <= rho_cut."""
    frame = np.asarray(frame, dtype=np.float64)
    p = np.abs(np.fft.fft2(frame)) ** 2
    fy = np.fft.fftfreq(frame.shape[0])[:, None]
    fx = np.fft.fftfreq(frame.shape[1])[None, :]
    rho = np.sqrt(fx * fx + fy * fy)
    sel = (rho > 0) & (rho <= rho_cut)
    return float(p[sel].mean())


def temporal_power_profile(stack: NoiseStack) -> np.ndarray:
    """Mean over pixels of per-pixel temporal |DFT|^2, DC excluded.

    Returns the positive-frequency profile (length T//2) averaged over
    all pixel time series, for comparing temporal blueness of stacks.
    """
    v = stack.values.astype(np.float64)
    spec = np.abs(np.fft.rfft(v, axis=0)) ** 2  # (T//2+1, H, W)
    return spec[1:].mean(axis=(1, 2))


_CACHE_MAGIC = b"RNKSTACK"


def save_stack(stack: NoiseStack, path: str | Path) -> None:
    """Cache file: magic, (H, W, T, seed, sigma_s, sigma_t), float32 values."""
    t = stack.values.shape[0]
    h, w = stack.dims
    header = struct.pack("<8sIIIq dd", _CACHE_MAGIC, h, w, t, stack.seed,
                         stack.sigma_spatial, stack.sigma_temporal)
    with open(path, "wb") as f:
        f.write(header)
        f.write(stack.values.astype("<f4").tobytes())


def load_stack(path: str | Path) -> NoiseStack:
    blob = Path(path).read_bytes()
    head_size = struct.calcsize("<8sIIIq dd")
    magic, h, w, t, seed, ss, st = struct.unpack("<8sIIIq dd", blob[:head_size])
    if magic != _CACHE_MAGIC:
        raise ValueError(f"not a noise stack cache: {path}")
    values = np.frombuffer(blob[head_size:], dtype="<f4").reshape(t, h, w).copy()
    return NoiseStack(values=values, seed=seed, sigma_spatial=ss, sigma_temporal=st)


def default_stack(cache_dir: str | Path | None = None, h: int = DEFAULT_TILE,
                  w: int = DEFAULT_TILE, t: int = DEFAULT_FRAMES,
                  seed: int = 1) -> NoiseStack:
    """The pipeline's default STBN tile, generated once and cached."""
    if cache_dir is not None:
        path = Path(cache_dir) / f"stbn_{h}x{w}x{t}_s{seed}.noise"
        if path.exists():
            return load_stack(path)
    stack = gen_stbn(h, w, t, seed=seed)
    if cache_dir is not None:
        Path(cache_dir).mkdir(parents=True, exist_ok=True)
        save_stack(stack, path)
    return stack
