"""PNG helpers for images, masks and condition maps."""

from pathlib import Path

import numpy as np
from PIL import Image


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def save_rgb_png(path: Path, image: np.ndarray) -> None:
    """``image`` is [3, H, W] in [0, 1] or uint8."""
    arr = image if image.dtype == np.uint8 else to_uint8(image)
    Image.fromarray(np.ascontiguousarray(arr.transpose(1, 2, 0)), mode="RGB").save(path)


def load_rgb_png(path: Path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB")).transpose(2, 0, 1).copy()


def save_gray_png(path: Path, values: np.ndarray) -> None:
    arr = values if values.dtype == np.uint8 else to_uint8(values)
    Image.fromarray(np.ascontiguousarray(arr), mode="L").save(path)


def load_gray_png(path: Path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("L")).copy()


def save_mask_png(path: Path, mask: np.ndarray) -> None:
    Image.fromarray(np.ascontiguousarray(np.asarray(mask, dtype=bool))).convert("1").save(path)


def load_mask_png(path: Path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("1"), dtype=bool).copy()
