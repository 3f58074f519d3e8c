"""Image rasters and physics priors shared by every stage of the pipeline.

An :class:`ImageGrid` is an H x W x C float64 array plus the interval its
values are supposed to live in.  Physical-space images use [0, 1]; the
diffusion process works in [-1, 1] where excursions outside the interval are
legitimate (noised samples), so only [0, 1] grids are range-checked.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

UNIT_RANGE = (0.0, 1.0)
SIGNED_RANGE = (-1.0, 1.0)

# Transmission floor: keeps the 1/T inversion bounded (standard dehazing guard).
EPS_T = 0.05

# Slack for float round-off when validating [0, 1] grids.
_RANGE_TOL = 1e-9


class GridError(ValueError):
    """Raised when an image grid or prior violates its contract."""


@dataclass
class ImageGrid:
    """H x W x C raster with a declared value range.

    ``value_range`` is (0, 1) for physical-space images (checked on
    construction, tiny float excursions are clipped) or (-1, 1) for
    diffusion-space tensors (not checked: noised samples may exceed it).
    Set ``check_range=False`` to carry out-of-range physical values, e.g.
    the output of an inverse recovery with an inconsistent prior.
    """

    data: np.ndarray
    value_range: tuple[float, float] = UNIT_RANGE
    check_range: bool = field(default=True, repr=False)

    def __post_init__(self) -> None:
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 3:
            raise GridError(f"expected H x W x C array, got shape {arr.shape}")
        h, w, c = arr.shape
        if h < 1 or w < 1:
            raise GridError(f"empty spatial extent {h} x {w}")
        if c not in (1, 3):
            raise GridError(f"channel count must be 1 or 3, got {c}")
        if not np.all(np.isfinite(arr)):
            raise GridError("grid contains non-finite values")
        if self.value_range == UNIT_RANGE and self.check_range:
            lo, hi = arr.min(), arr.max()
            if lo < -_RANGE_TOL or hi > 1.0 + _RANGE_TOL:
                raise GridError(
                    f"values [{lo:.6g}, {hi:.6g}] outside declared range [0, 1]"
                )
            arr = np.clip(arr, 0.0, 1.0)
        self.data = arr

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def to_signed(self) -> "ImageGrid":
        """Map [0, 1] physical values onto the [-1, 1] diffusion interval."""
        if self.value_range == SIGNED_RANGE:
            return self
        return ImageGrid(self.data * 2.0 - 1.0, SIGNED_RANGE)

    def to_unit(self, clip: bool = True) -> "ImageGrid":
        """Map [-1, 1] diffusion values back to [0, 1], clipping by default."""
        if self.value_range == UNIT_RANGE:
            return self
        data = (self.data + 1.0) / 2.0
        if clip:
            data = np.clip(data, 0.0, 1.0)
        return ImageGrid(data, UNIT_RANGE, check_range=clip)


def require_same_shape(a: ImageGrid, b: ImageGrid, what: str = "grids") -> None:
    if a.shape != b.shape:
        raise GridError(f"{what} have mismatched shapes {a.shape} vs {b.shape}")


@dataclass
class PhysicsPrior:
    """Per-pixel transmission map and background light for one image.

    Transmission entries must sit above the floor ``EPS_T`` so the inverse
    model stays bounded.  Backgrounds synthesized by :func:`uwdiff.physics.
    synth_pair` are spatially constant per channel; estimated backgrounds are
    merely [0, 1] rasters.
    """

    transmission: ImageGrid
    background: ImageGrid

    def __post_init__(self) -> None:
        require_same_shape(self.transmission, self.background, "prior maps")
        tmin = self.transmission.data.min()
        if tmin < EPS_T - 1e-12:
            raise GridError(
                f"transmission floor violated: min {tmin:.6g} < {EPS_T}"
            )
        if self.transmission.data.max() > 1.0 + _RANGE_TOL:
            raise GridError("transmission entries must not exceed 1")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.transmission.shape
