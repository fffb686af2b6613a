"""Volume data, transfer functions, cameras, and lights.

Volumes are scalar grids normalized to [0,1] on load so transfer
functions are dataset-independent; the raw value range is kept for
reporting. The world-space bounding box of a grid spans
[0, n*spacing] per axis with voxel centers at (i+0.5)*spacing.
Data arrays are indexed [z, y, x] (x fastest), matching the raw file
layout.

All types are immutable after construction and safe to share across
concurrent renderer workers.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

_DTYPES = {"uint8": np.uint8, "float32": np.dtype("<f4")}


@dataclass(frozen=True)
class VolumeMeta:
    """Sidecar descriptor for a raw volume file (little-endian, x fastest)."""

    dims: tuple[int, int, int]  # (nx, ny, nz)
    dtype: str = "uint8"
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    @staticmethod
    def from_file(path: str | Path) -> "VolumeMeta":
        spec = json.loads(Path(path).read_text())
        return VolumeMeta(
            dims=tuple(int(d) for d in spec["dims"]),
            dtype=spec.get("dtype", "uint8"),
            spacing=tuple(float(s) for s in spec.get("spacing", (1.0, 1.0, 1.0))),
        )

    def to_file(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps({"dims": list(self.dims), "dtype": self.dtype, "spacing": list(self.spacing)})
        )


@dataclass(frozen=True)
class VolumeGrid:
    """Scalar field on a regular grid, values normalized to [0,1]."""

    dims: tuple[int, int, int]  # (nx, ny, nz) voxels
    spacing: tuple[float, float, float]
    data: np.ndarray  # shape (nz, ny, nx), float32 in [0,1]
    value_range: tuple[float, float]  # raw extremes before normalization

    def __post_init__(self):
        nx, ny, nz = self.dims
        if min(self.dims) < 2:
            raise ValueError(f"volume dims must all be >= 2, got {self.dims}")
        if self.data.shape != (nz, ny, nx):
            raise ValueError(f"data shape {self.data.shape} does not match dims {self.dims}")
        if self.data.size and (self.data.min() < 0.0 or self.data.max() > 1.0):
            raise ValueError("volume data must be normalized to [0,1]")
        self.data.setflags(write=False)

    @property
    def extent(self) -> np.ndarray:
        """World-space size of the bounding box, (x, y, z)."""
        return np.asarray(self.dims, dtype=np.float64) * np.asarray(self.spacing, dtype=np.float64)

    def center(self) -> np.ndarray:
        return self.extent * 0.5


def _normalize(raw: np.ndarray) -> tuple[np.ndarray, tuple[float, float]]:
    lo, hi = float(raw.min()), float(raw.max())
    if hi > lo:
        data = (raw.astype(np.float64) - lo) / (hi - lo)
    else:
        data = np.zeros_like(raw, dtype=np.float64)
    return data.astype(np.float32), (lo, hi)


def load_raw_volume(path: str | Path, meta: VolumeMeta) -> VolumeGrid:
    """Load a little-endian raw volume file and min-max normalize it.

    Raises ValueError on a byte-count mismatch between the file and the
    descriptor, and on NaN values in float data.
    """
    if meta.dtype not in _DTYPES:
        raise ValueError(f"unsupported dtype {meta.dtype!r}; expected one of {sorted(_DTYPES)}")
    nx, ny, nz = meta.dims
    elem = np.dtype(_DTYPES[meta.dtype])
    expected = nx * ny * nz * elem.itemsize
    blob = Path(path).read_bytes()
    if len(blob) != expected:
        raise ValueError(
            f"size mismatch for {path}: expected {expected} bytes "
            f"({nx}x{ny}x{nz} {meta.dtype}), got {len(blob)}"
        )
    raw = np.frombuffer(blob, dtype=elem).reshape(nz, ny, nx)
    if np.issubdtype(raw.dtype, np.floating):
        bad = np.flatnonzero(np.isnan(raw.ravel()))
        if bad.size:
            i = int(bad[0])
            z, y, x = np.unravel_index(i, raw.shape)
            raise ValueError(f"NaN in volume data at flat index {i} (voxel x={x}, y={y}, z={z})")
    data, value_range = _normalize(raw)
    return VolumeGrid(dims=meta.dims, spacing=meta.spacing, data=data, value_range=value_range)


def make_procedural_volume(kind: str, dims: tuple[int, int, int],
                           spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)) -> VolumeGrid:
    """Deterministic test volume, min-max normalized to span [0,1].

    Raw fields, on normalized coordinates u,v,w in [-1,1] at voxel
    centers (u along x), with r = sqrt(u^2+v^2+w^2):

    - sphere_shells: 0.5*(1 + cos(2*pi*3*r))
    - vortex_field:  sin(3*pi*u + 2*v*w) * cos(2*pi*v - 1.5*u*w)
                     + 0.5*cos(4*pi*r)
    - box_lattice:   parity of floor(2*(u+1)) + floor(2*(v+1)) + floor(2*(w+1)),
                     blended 0.7/0.3 with the ramp (u+1)/2
    """
    if min(dims) < 8:
        raise ValueError(f"procedural dims must be >= 8 per axis, got {dims}")
    nx, ny, nz = dims
    axes = [(np.arange(n) + 0.5) / n * 2.0 - 1.0 for n in (nx, ny, nz)]
    u = axes[0][None, None, :]
    v = axes[1][None, :, None]
    w = axes[2][:, None, None]
    r = np.sqrt(u * u + v * v + w * w)
    if kind == "sphere_shells":
        raw = 0.5 * (1.0 + np.cos(2.0 * np.pi * 3.0 * r))
    elif kind == "vortex_field":
        raw = np.sin(3.0 * np.pi * u + 2.0 * v * w) * np.cos(2.0 * np.pi * v - 1.5 * u * w)
        raw = raw + 0.5 * np.cos(4.0 * np.pi * r)
    elif kind == "box_lattice":
        parity = (np.floor(2.0 * (u + 1.0)) + np.floor(2.0 * (v + 1.0)) + np.floor(2.0 * (w + 1.0))) % 2.0
        raw = 0.7 * parity + 0.3 * (u + 1.0) / 2.0
        raw = np.broadcast_to(raw, (nz, ny, nx)).copy()
    else:
        raise ValueError(f"unknown procedural volume kind {kind!r}")
    raw = np.broadcast_to(raw, (nz, ny, nx))
    data, value_range = _normalize(np.ascontiguousarray(raw))
    return VolumeGrid(dims=dims, spacing=spacing, data=data, value_range=value_range)


def sample_trilinear(vol: VolumeGrid, p: np.ndarray) -> np.ndarray:
    """Trilinearly interpolated value at world point(s) p; 0 outside the box.

    p has shape (..., 3); the result has shape (...).
    """
    p = np.asarray(p, dtype=np.float64)
    scalar_input = p.ndim == 1
    pts = np.atleast_2d(p)
    sp = np.asarray(vol.spacing, dtype=np.float64)
    ext = vol.extent
    inside = np.all((pts >= 0.0) & (pts <= ext), axis=-1)
    q = pts / sp - 0.5  # continuous voxel coordinates
    out = np.zeros(pts.shape[:-1], dtype=np.float64)
    if inside.any():
        qi = q[inside]
        n = np.asarray(vol.dims)
        f = np.floor(qi)
        t = qi - f
        i0 = np.clip(f.astype(np.int64), 0, n - 1)
        i1 = np.clip(i0 + 1, 0, n - 1)
        d = vol.data
        x0, y0, z0 = i0[:, 0], i0[:, 1], i0[:, 2]
        x1, y1, z1 = i1[:, 0], i1[:, 1], i1[:, 2]
        tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]
        c00 = d[z0, y0, x0] * (1 - tx) + d[z0, y0, x1] * tx
        c10 = d[z0, y1, x0] * (1 - tx) + d[z0, y1, x1] * tx
        c01 = d[z1, y0, x0] * (1 - tx) + d[z1, y0, x1] * tx
        c11 = d[z1, y1, x0] * (1 - tx) + d[z1, y1, x1] * tx
        c0 = c00 * (1 - ty) + c10 * ty
        c1 = c01 * (1 - ty) + c11 * ty
        out[inside] = c0 * (1 - tz) + c1 * tz
    return out[0] if scalar_input else out


@dataclass(frozen=True)
class TransferFunction:
    """RGBA lookup table over scalar value in [0,1], K >= 2 entries.

    Lookup interpolates linearly between uniformly spaced entries.
    """

    lut: np.ndarray  # (K, 4) float32, all channels in [0,1]

    def __post_init__(self):
        lut = np.asarray(self.lut, dtype=np.float32)
        if lut.ndim != 2 or lut.shape[1] != 4 or lut.shape[0] < 2:
            raise ValueError(f"transfer function lut must be (K>=2, 4), got {lut.shape}")
        if lut.min() < 0.0 or lut.max() > 1.0:
            raise ValueError("transfer function entries must lie in [0,1]")
        object.__setattr__(self, "lut", lut)
        self.lut.setflags(write=False)

    def apply(self, s: np.ndarray) -> np.ndarray:
        """Map scalar array s (any shape) to RGBA, shape s.shape + (4,)."""
        s = np.clip(np.asarray(s, dtype=np.float64), 0.0, 1.0)
        k = self.lut.shape[0]
        x = s * (k - 1)
        i0 = np.clip(np.floor(x).astype(np.int64), 0, k - 2)
        t = (x - i0)[..., None]
        return self.lut[i0] * (1 - t) + self.lut[i0 + 1] * t

    @staticmethod
    def from_file(path: str | Path) -> "TransferFunction":
        rows = []
        for line in Path(path).read_text().splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            vals = [float(tok) for tok in line.split()]
            if len(vals) != 4:
                raise ValueError(f"transfer function line needs 4 floats, got {line!r}")
            rows.append(vals)
        return TransferFunction(lut=np.asarray(rows, dtype=np.float32))

    def to_file(self, path: str | Path) -> None:
        lines = [" ".join(f"{c:.6f}" for c in row) for row in self.lut]
        Path(path).write_text("\n".join(lines) + "\n")

    @staticmethod
    def default() -> "TransferFunction":
        # Cool-to-warm ramp with alpha increasing in density; low values near-transparent.
        lut = np.asarray(
            [
                [0.10, 0.10, 0.35, 0.00],
                [0.15, 0.35, 0.80, 0.02],
                [0.10, 0.75, 0.70, 0.12],
                [0.55, 0.85, 0.25, 0.30],
                [0.95, 0.80, 0.15, 0.55],
                [0.95, 0.35, 0.10, 0.80],
                [0.90, 0.90, 0.90, 0.95],
            ],
            dtype=np.float32,
        )
        return TransferFunction(lut=lut)


@dataclass(frozen=True)
class Camera:
    """Pinhole camera; rays pass through pixel centers."""

    position: tuple[float, float, float]
    look_at: tuple[float, float, float]
    up: tuple[float, float, float] = (0.0, 1.0, 0.0)
    fov_y: float = 45.0  # degrees
    width: int = 320
    height: int = 180

    def __post_init__(self):
        if not (0.0 < self.fov_y < 180.0):
            raise ValueError(f"fov_y must be in (0, 180) degrees, got {self.fov_y}")
        if self.width < 1 or self.height < 1:
            raise ValueError("film dims must be positive")
        fwd = np.subtract(self.look_at, self.position, dtype=np.float64)
        n = np.linalg.norm(fwd)
        if n == 0.0:
            raise ValueError("camera position and look_at coincide")
        upn = np.asarray(self.up, dtype=np.float64)
        if np.linalg.norm(np.cross(fwd / n, upn)) < 1e-9:
            raise ValueError("up vector is parallel to the view direction")

    def basis(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Orthonormal (right, up, forward) in world space."""
        fwd = np.subtract(self.look_at, self.position, dtype=np.float64)
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(self.up, dtype=np.float64))
        right /= np.linalg.norm(right)
        up = np.cross(right, fwd)
        return right, up, fwd


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray  # unit length


def generate_ray(cam: Camera, u: int, v: int) -> Ray:
    """Ray through the center of pixel (u, v); v grows downward."""
    if not (0 <= u < cam.width and 0 <= v < cam.height):
        raise ValueError(f"pixel ({u}, {v}) outside film {cam.width}x{cam.height}")
    o, d = generate_rays(cam, np.asarray([u]), np.asarray([v]))
    return Ray(origin=o[0], direction=d[0])


def generate_rays(cam: Camera, us: np.ndarray, vs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized ray generation; returns (origins, unit directions), shape (n,3)."""
    right, up, fwd = cam.basis()
    tan_half = np.tan(np.deg2rad(cam.fov_y) * 0.5)
    aspect = cam.width / cam.height
    sx = ((np.asarray(us, dtype=np.float64) + 0.5) / cam.width * 2.0 - 1.0) * tan_half * aspect
    sy = (1.0 - (np.asarray(vs, dtype=np.float64) + 0.5) / cam.height * 2.0) * tan_half
    d = fwd[None, :] + sx[:, None] * right[None, :] + sy[:, None] * up[None, :]
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    o = np.broadcast_to(np.asarray(cam.position, dtype=np.float64), d.shape).copy()
    return o, d


@dataclass(frozen=True)
class Light:
    """Directional or point light with RGB intensity.

    ``direction`` is the propagation direction of the light (photons
    travel along it); shadow rays march against it. Exactly one of
    ``direction`` / ``position`` must be set.
    """

    direction: tuple[float, float, float] | None = None
    position: tuple[float, float, float] | None = None
    intensity: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if (self.direction is None) == (self.position is None):
            raise ValueError("light needs exactly one of direction or position")
        vec = self.direction if self.direction is not None else self.position
        if not np.all(np.isfinite(vec)):
            raise ValueError("light vector must be finite")
        if not np.all(np.isfinite(self.intensity)) or min(self.intensity) < 0:
            raise ValueError("light intensity must be finite and >= 0")
        if self.direction is not None and np.linalg.norm(self.direction) == 0:
            raise ValueError("light direction must be nonzero")
