"""PNG image I/O with the exact sRGB transfer function.

Files are 8-bit sRGB; in memory everything is linear float64 in [0, 1].
Writers are timestamp-free so identical inputs give byte-identical files.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

__all__ = ["srgb_to_linear", "linear_to_srgb", "read_png", "write_png"]


def srgb_to_linear(c: np.ndarray) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(c: np.ndarray) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    c = np.clip(c, 0.0, 1.0)
    return np.where(c <= 0.0031308, c * 12.92, 1.055 * c ** (1.0 / 2.4) - 0.055)


def read_png(path) -> np.ndarray:
    """Read an 8-bit PNG into linear (H, W, 3) float64."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return srgb_to_linear(arr)


def write_png(path, image: np.ndarray) -> None:
    """Write linear (H, W, 3) floats as an 8-bit sRGB PNG."""
    srgb = linear_to_srgb(image)
    u8 = np.round(srgb * 255.0).astype(np.uint8)
    if u8.ndim == 2:
        u8 = np.repeat(u8[:, :, None], 3, axis=2)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(u8, mode="RGB").save(path, format="PNG")


def write_mask_png(path, mask: np.ndarray) -> None:
    """Write a boolean/float mask as an 8-bit grayscale PNG (no transfer curve)."""
    u8 = np.round(np.clip(np.asarray(mask, dtype=np.float64), 0, 1) * 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(u8, mode="L").save(path, format="PNG")


def read_mask_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0
