"""8-bit PNG loading and saving mapped to [0, 1] grids."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .grids import GridError, ImageGrid


def load_image(path: str | Path) -> ImageGrid:
    """Read an 8-bit image file as an RGB [0, 1] grid.

    16-bit inputs are rejected rather than silently rescaled.
    """
    path = Path(path)
    try:
        img = Image.open(path)
    except (OSError, ValueError) as exc:
        raise GridError(f"cannot read image {path}: {exc}") from exc
    if img.mode in ("I", "I;16", "I;16B", "I;16L", "F"):
        raise GridError(f"{path}: 16-bit/float images are not supported")
    rgb = img.convert("RGB")
    data = np.asarray(rgb, dtype=np.float64) / 255.0
    return ImageGrid(data)


def save_image(grid: ImageGrid, path: str | Path) -> None:
    """Write a grid as an 8-bit PNG; diffusion-space grids are remapped."""
    if grid.value_range != (0.0, 1.0):
        grid = grid.to_unit()
    data = np.clip(grid.data, 0.0, 1.0)
    if grid.channels == 1:
        data = np.repeat(data, 3, axis=2)
    arr = np.round(data * 255.0).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="RGB").save(path)
