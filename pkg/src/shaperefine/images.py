"""8-bit PNG silhouette and confidence image I/O."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

BINARY_THRESHOLD = 127


def load_silhouette(path, binary: bool = False) -> np.ndarray:
    """Silhouette in ``[0, 1]`` from a grayscale, RGB or alpha PNG.

    With an alpha channel the mask is gray times alpha. ``binary`` thresholds
    the 8-bit value at 127.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(str(path))
    with Image.open(path) as img:
        if img.mode in ("LA", "RGBA", "PA") or (img.mode == "P" and "transparency" in img.info):
            la = np.asarray(img.convert("LA"), dtype=np.float64)
            gray = la[..., 0] * la[..., 1] / 255.0
        else:
            gray = np.asarray(img.convert("L"), dtype=np.float64)
    if binary:
        return (gray > BINARY_THRESHOLD).astype(np.float64)
    return gray / 255.0


def to_uint8(values) -> np.ndarray:
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.round(255.0 * v).astype(np.uint8)


def save_silhouette(values, path) -> None:
    Image.fromarray(to_uint8(values), mode="L").save(str(path))
