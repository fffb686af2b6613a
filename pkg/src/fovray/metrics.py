"""Image and video quality metrics: PSNR, SSIM, MS-SSIM, and tPSNR.

PSNR is computed jointly over RGB; identical frames report the 100 dB
sentinel so CSV columns stay numeric. SSIM follows the standard recipe
(Rec.601 luma, 11x11 Gaussian window with sigma 1.5, K1=0.01, K2=0.03)
averaged over valid window positions only. MS-SSIM uses the standard
5-scale weights, renormalized automatically when the frames are too
small for all five scales; negative contrast-structure means clamp to
zero before the weighted product. tPSNR is PSNR applied to temporal
finite differences, shifted into [0,1] via (d+1)/2 so the peak stays 1.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PSNR_CAP_DB = 100.0
MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_K1, _K2 = 0.01, 0.03


def _rgb(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[2] >= 3:
        return img[..., :3]
    return img


def _luma(img: np.ndarray) -> np.ndarray:
    img = _rgb(img)
    if img.ndim == 2:
        return img
    return 0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2]


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE) over RGB, capped at 100 dB for identity."""
    a = _rgb(a)
    b = _rgb(b)
    if a.shape != b.shape:
        raise ValueError(f"psnr dims differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * float(np.log10(peak * peak / mse)), PSNR_CAP_DB)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    d = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-(d * d) / (2.0 * sigma * sigma))
    return k / k.sum()


def _filter_valid(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Separable 'valid'-mode correlation with a 1D kernel."""
    rows = sliding_window_view(img, len(kernel), axis=0) @ kernel
    return sliding_window_view(rows, len(kernel), axis=1) @ kernel


def _ssim_stats(la: np.ndarray, lb: np.ndarray):
    k = _gaussian_window(_SSIM_WINDOW, _SSIM_SIGMA)
    mu_a = _filter_valid(la, k)
    mu_b = _filter_valid(lb, k)
    var_a = _filter_valid(la * la, k) - mu_a * mu_a
    var_b = _filter_valid(lb * lb, k) - mu_b * mu_b
    cov = _filter_valid(la * lb, k) - mu_a * mu_b
    return mu_a, mu_b, var_a, var_b, cov


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM over valid 11x11 Gaussian windows on Rec.601 luma."""
    la = _luma(a)
    lb = _luma(b)
    if la.shape != lb.shape:
        raise ValueError(f"ssim dims differ: {la.shape} vs {lb.shape}")
    if min(la.shape) < _SSIM_WINDOW:
        raise ValueError(f"frames smaller than the {_SSIM_WINDOW}px SSIM window: {la.shape}")
    c1 = _K1 * _K1
    c2 = _K2 * _K2
    mu_a, mu_b, var_a, var_b, cov = _ssim_stats(la, lb)
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2))
    return float(s.mean())


def _downsample2(img: np.ndarray) -> np.ndarray:
    h, w = img.shape
    c = img[: h // 2 * 2, : w // 2 * 2]
    return 0.25 * (c[0::2, 0::2] + c[1::2, 0::2] + c[0::2, 1::2] + c[1::2, 1::2])


def msssim_scale_count(dims: tuple[int, int]) -> int:
    """Scales usable before the coarsest image drops under the SSIM window."""
    m = 1
    size = min(dims)
    while m < len(MSSSIM_WEIGHTS) and size // 2 >= _SSIM_WINDOW:
        size //= 2
        m += 1
    return m


def msssim(a: np.ndarray, b: np.ndarray) -> float:
    """Multi-scale SSIM with automatic scale reduction and renormalized weights."""
    la = _luma(a)
    lb = _luma(b)
    if la.shape != lb.shape:
        raise ValueError(f"msssim dims differ: {la.shape} vs {lb.shape}")
    m = msssim_scale_count(la.shape)
    weights = np.asarray(MSSSIM_WEIGHTS[:m])
    weights = weights / weights.sum()
    c1 = _K1 * _K1
    c2 = _K2 * _K2
    value = 1.0
    for j in range(m):
        mu_a, mu_b, var_a, var_b, cov = _ssim_stats(la, lb)
        cs = (2 * cov + c2) / (var_a + var_b + c2)
        if j == m - 1:
            lum = (2 * mu_a * mu_b + c1) / (mu_a * mu_a + mu_b * mu_b + c1)
            stat = float((lum * cs).mean())
        else:
            stat = float(cs.mean())
        value *= max(stat, 0.0) ** weights[j]
        if j < m - 1:
            la = _downsample2(la)
            lb = _downsample2(lb)
    return float(value)


def tpsnr(seq_a, seq_b) -> np.ndarray:
    """PSNR of temporal finite differences, one value per frame from 1 on.

    Differences are mapped into [0,1] by (d+1)/2 before PSNR with peak 1.
    """
    t = len(seq_a)
    if len(seq_b) != t:
        raise ValueError(f"sequence lengths differ: {t} vs {len(seq_b)}")
    if t < 2:
        raise ValueError(f"tpsnr needs at least 2 frames, got {t}")
    out = np.empty(t - 1)
    for i in range(1, t):
        da = (_rgb(seq_a[i]) - _rgb(seq_a[i - 1]) + 1.0) / 2.0
        db = (_rgb(seq_b[i]) - _rgb(seq_b[i - 1]) + 1.0) / 2.0
        out[i - 1] = psnr(da, db, peak=1.0)
    return out


@dataclass
class QualityReport:
    """Per-frame metrics for a clip; tpsnr is NaN for frame 0."""

    psnr: np.ndarray
    ssim: np.ndarray
    msssim: np.ndarray
    tpsnr: np.ndarray

    @property
    def n_frames(self) -> int:
        return len(self.psnr)

    def aggregates(self) -> dict[str, float]:
        out = {}
        for name in ("psnr", "ssim", "msssim", "tpsnr"):
            vals = getattr(self, name)
            finite = vals[np.isfinite(vals)]
            out[f"{name}_mean"] = float(finite.mean()) if finite.size else float("nan")
            out[f"{name}_min"] = float(finite.min()) if finite.size else float("nan")
        return out

    def csv_rows(self) -> list[tuple]:
        rows = []
        for i in range(self.n_frames):
            tp = "" if np.isnan(self.tpsnr[i]) else f"{self.tpsnr[i]:.6f}"
            rows.append((i, f"{self.psnr[i]:.6f}", f"{self.ssim[i]:.6f}",
                         f"{self.msssim[i]:.6f}", tp))
        return rows


def build_quality_report(pred_seq, gt_seq) -> QualityReport:
    t = len(pred_seq)
    if len(gt_seq) != t:
        raise ValueError(f"sequence lengths differ: {t} vs {len(gt_seq)}")
    ps = np.array([psnr(pred_seq[i], gt_seq[i]) for i in range(t)])
    ss = np.array([ssim(pred_seq[i], gt_seq[i]) for i in range(t)])
    ms = np.array([msssim(pred_seq[i], gt_seq[i]) for i in range(t)])
    tp = np.full(t, np.nan)
    if t >= 2:
        tp[1:] = tpsnr(pred_seq, gt_seq)
    return QualityReport(psnr=ps, ssim=ss, msssim=ms, tpsnr=tp)
