"""PNG import/export helpers shared by the CLI, benches, and viewer."""
from __future__ import annotations

import io
from pathlib import Path

import numpy as np
from PIL import Image


def to_uint8(img01: np.ndarray) -> np.ndarray:
    return (np.clip(img01, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def save_gray_png(img01: np.ndarray, path: str | Path) -> None:
    Image.fromarray(to_uint8(img01), mode="L").save(path)


def save_rgb_png(img01: np.ndarray, path: str | Path) -> None:
    Image.fromarray(to_uint8(img01), mode="RGB").save(path)


def save_rgba_png(img01: np.ndarray, path: str | Path) -> None:
    Image.fromarray(to_uint8(img01), mode="RGBA").save(path)


def encode_rgb_png(img01: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(to_uint8(img01), mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def load_png(path: str | Path) -> np.ndarray:
    """Load a PNG as float array in [0,1] (grayscale (H,W) or (H,W,C))."""
    arr = np.asarray(Image.open(path))
    return arr.astype(np.float32) / 255.0
