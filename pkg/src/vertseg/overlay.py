"""Colour overlays of ground truth (red) and prediction (blue) on a radiograph."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .imaging import BinaryMask, GrayImage
from .tensor import DimensionError

RED = np.array([255, 0, 0])
BLUE = np.array([0, 0, 255])
PURPLE = np.array([255, 0, 255])


def render_overlay(image: GrayImage, truth: BinaryMask, pred: BinaryMask, alpha: float = 0.5) -> np.ndarray:
    """RGB uint8 array: truth-only pixels tinted red, prediction-only blue, both purple."""
    if not (image.pixels.shape == truth.pixels.shape == pred.pixels.shape):
        raise DimensionError("image, truth and prediction must share dimensions")
    gray = image.pixels.astype(np.float64) * (255.0 / image.maxval)
    rgb = np.repeat(gray[..., None], 3, axis=2)
    t, p = truth.pixels.astype(bool), pred.pixels.astype(bool)
    for sel, colour in ((t & ~p, RED), (p & ~t, BLUE), (t & p, PURPLE)):
        rgb[sel] = (1 - alpha) * rgb[sel] + alpha * colour
    return np.clip(np.floor(rgb + 0.5), 0, 255).astype(np.uint8)


def classify_overlay(rgb: np.ndarray) -> dict[str, int]:
    """Count tint classes in an overlay rendered with ``alpha > 0``."""
    r, g, b = (rgb[..., i].astype(int) for i in range(3))
    red = (r > g) & (b == g)
    blue = (b > g) & (r == g)
    purple = (r > g) & (b > g)
    return {
        "truth_only": int(red.sum()),
        "pred_only": int(blue.sum()),
        "both": int(purple.sum()),
        "neither": int(((r == g) & (g == b)).sum()),
    }


def write_overlay(rgb: np.ndarray, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(rgb).save(path, format="PNG")
