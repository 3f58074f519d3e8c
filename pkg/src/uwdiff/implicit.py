"""Implicit reconstruction branch: render RGB from per-pixel features plus
periodically-encoded coordinates, and build the diffusion condition image.

Coordinates are relative positions in [-1, 1] lifted through sin/cos bands at
frequencies 2^i * pi, i = 0..L-1, so the lowest band spans one half-period
across the image.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .grids import ImageGrid, SIGNED_RANGE, require_same_shape
from .priors import grid_to_tensor, tensor_to_grid


def make_grid(height: int, width: int) -> np.ndarray:
    """H x W x 2 array of (x, y) positions in [-1, 1], corners exact.

    A single-pixel axis maps to 0.
    """
    if height < 1 or width < 1:
        raise ValueError("grid extent must be positive")
    xs = np.linspace(-1.0, 1.0, width) if width > 1 else np.zeros(1)
    ys = np.linspace(-1.0, 1.0, height) if height > 1 else np.zeros(1)
    coords = np.empty((height, width, 2), dtype=np.float64)
    coords[..., 0] = xs[None, :]
    coords[..., 1] = ys[:, None]
    return coords


def encode_coords(coords: np.ndarray, num_bands: int) -> np.ndarray:
    """Lift H x W x 2 coordinates to H x W x 4L sin/cos features.

    Layout: for each component (x, then y), L pairs (sin(2^i pi c),
    cos(2^i pi c)) ordered by frequency.
    """
    if num_bands < 1:
        raise ValueError("num_bands must be >= 1")
    h, w, _ = coords.shape
    out = np.empty((h, w, 4 * num_bands), dtype=np.float64)
    idx = 0
    for comp in range(2):
        c = coords[..., comp]
        for i in range(num_bands):
            angle = (2.0**i) * np.pi * c
            out[..., idx] = np.sin(angle)
            out[..., idx + 1] = np.cos(angle)
            idx += 2
    return out


class ImplicitRenderer(nn.Module):
    """Feature encoder plus per-pixel MLP from (features, encoded coords) to
    RGB in [-1, 1].

    The MLP is realized as 1x1 convolutions, which is exactly a pointwise
    function of each pixel's inputs.
    """

    def __init__(self, feature_channels: int = 16, hidden: int = 64,
                 num_bands: int = 10, mlp_layers: int = 3):
        super().__init__()
        self.num_bands = num_bands
        self.encoder = nn.Sequential(
            nn.Conv2d(3, feature_channels, 3, padding=1),
            nn.GELU(),
            nn.Conv2d(feature_channels, feature_channels, 3, padding=1),
            nn.GELU(),
            nn.Conv2d(feature_channels, feature_channels, 3, padding=1),
        )
        layers: list[nn.Module] = []
        cin = feature_channels + 4 * num_bands
        for _ in range(mlp_layers):
            layers += [nn.Conv2d(cin, hidden, 1), nn.GELU()]
            cin = hidden
        layers.append(nn.Conv2d(cin, 3, 1))
        self.mlp = nn.Sequential(*layers)
        self._coord_cache: dict[tuple[int, int], torch.Tensor] = {}

    def coord_features(self, height: int, width: int) -> torch.Tensor:
        key = (height, width)
        cached = self._coord_cache.get(key)
        if cached is None:
            enc = encode_coords(make_grid(height, width), self.num_bands)
            cached = torch.from_numpy(enc.astype(np.float32)).permute(2, 0, 1)[None]
            self._coord_cache[key] = cached
        return cached

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, _, h, w = x.shape
        feats = self.encoder(x)
        coords = self.coord_features(h, w).to(x.device, x.dtype).expand(b, -1, -1, -1)
        return torch.tanh(self.mlp(torch.cat([feats, coords], dim=1)))


def inr_render(image: ImageGrid, renderer: ImplicitRenderer) -> ImageGrid:
    """Render one image; preserves the caller's value-range convention."""
    signed_in = image.value_range == SIGNED_RANGE
    work = image if signed_in else image.to_signed()
    was_training = renderer.training
    renderer.eval()
    with torch.no_grad():
        out = renderer(grid_to_tensor(work))
    if was_training:
        renderer.train()
    rendered = tensor_to_grid(out, SIGNED_RANGE)
    return rendered if signed_in else rendered.to_unit()


def inr_loss(rendered, target):
    """Mean absolute reconstruction error (works on grids or tensors)."""
    if isinstance(rendered, ImageGrid) and isinstance(target, ImageGrid):
        require_same_shape(rendered, target, "loss inputs")
        return float(np.mean(np.abs(rendered.data - target.data)))
    if rendered.shape != target.shape:
        raise ValueError(
            f"shape mismatch {tuple(rendered.shape)} vs {tuple(target.shape)}"
        )
    return (rendered - target).abs().mean()


def fuse_condition(rendered, image):
    """Diffusion condition: elementwise sum, no clamping (signed space)."""
    if isinstance(rendered, ImageGrid) and isinstance(image, ImageGrid):
        require_same_shape(rendered, image, "condition inputs")
        return ImageGrid(
            rendered.data + image.data, SIGNED_RANGE, check_range=False
        )
    if rendered.shape != image.shape:
        raise ValueError(
            f"shape mismatch {tuple(rendered.shape)} vs {tuple(image.shape)}"
        )
    return rendered + image
