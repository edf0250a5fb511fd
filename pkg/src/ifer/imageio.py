"""PNG helpers. Images are float arrays ``[3, H, W]`` in [0, 1]."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def to_uint8(image) -> np.ndarray:
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"expected [3, H, W] image, got shape {arr.shape}")
    return np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)


def save_png(image, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image), mode="RGB").save(path, format="PNG")
    return path


def load_png(path: str | Path, size: int | None = None) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("RGB")
        if size is not None and im.size != (size, size):
            im = im.resize((size, size), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1).copy()


def hstack(panels) -> np.ndarray:
    """Side-by-side grid of equally sized panels."""
    return np.concatenate([np.asarray(p, dtype=np.float32) for p in panels], axis=2)


def heat_overlay(image, heat, alpha: float = 0.5) -> np.ndarray:
    """Blend a [H, W] heatmap in [0, 1] over an image as a red-to-yellow ramp."""
    heat = np.asarray(heat, dtype=np.float32)
    ramp = np.stack([np.ones_like(heat), heat, np.zeros_like(heat)])
    a = alpha * heat[None]
    return (1.0 - a) * np.asarray(image, dtype=np.float32) + a * ramp
