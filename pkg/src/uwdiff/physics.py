"""Koschmieder scattering model: degradation, inverse recovery, synthesis.

The forward model mixes scene radiance J with a background light B through a
transmission map T:

    I = J * T + (1 - T) * B

and the recovery inverts it pixelwise:

    J = I / T + B * (1 - 1/T)

Both are pure float64 math; the pair is an exact inverse wherever T stays
above the ``EPS_T`` floor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .grids import EPS_T, GridError, ImageGrid, PhysicsPrior, require_same_shape


def koschmieder_forward(j: np.ndarray, t: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Array-level forward mix; accepts any broadcastable float arrays.

    Exposed separately from :func:`degrade` so callers can evaluate the raw
    model outside the prior's transmission-floor contract (e.g. T == 0).
    """
    return j * t + (1.0 - t) * b


def koschmieder_inverse(i: np.ndarray, t: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Array-level inverse; caller is responsible for keeping t bounded away
    from zero."""
    inv_t = 1.0 / t
    return i * inv_t + b * (1.0 - inv_t)


def degrade(image: ImageGrid, prior: PhysicsPrior) -> ImageGrid:
    """Apply the scattering model to a clean [0, 1] image.

    The output is a convex combination of image and background per pixel, so
    it stays in [0, 1] for valid inputs.
    """
    if image.value_range != (0.0, 1.0):
        raise GridError("degrade expects a [0, 1] image")
    require_same_shape(image, prior.transmission, "image and prior")
    mixed = koschmieder_forward(
        image.data, prior.transmission.data, prior.background.data
    )
    return ImageGrid(mixed)


def recover(image: ImageGrid, prior: PhysicsPrior) -> ImageGrid:
    """Invert the scattering model.

    Round-trips ``recover(degrade(J, p), p) == J`` to float tolerance.  With
    an inconsistent (image, prior) pair the result can leave [0, 1]; the
    returned grid is therefore not range-checked.
    """
    require_same_shape(image, prior.transmission, "image and prior")
    t = prior.transmission.data
    if t.min() < EPS_T - 1e-12:
        raise GridError(f"transmission below floor {EPS_T}")
    restored = koschmieder_inverse(image.data, t, prior.background.data)
    return ImageGrid(restored, image.value_range, check_range=False)


def gaussian_kernel_1d(sigma: float, kernel_size: int) -> np.ndarray:
    """Normalized 1-D Gaussian taps of odd length ``kernel_size``."""
    if kernel_size % 2 == 0 or kernel_size < 3:
        raise ValueError(f"kernel_size must be odd and >= 3, got {kernel_size}")
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    radius = kernel_size // 2
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(image: ImageGrid, sigma: float, kernel_size: int) -> ImageGrid:
    """Separable Gaussian blur with reflective (half-sample symmetric) edges.

    Normalized taps plus symmetric reflection preserve the global mean and
    make the blur a contraction, which the background-light front end relies
    on.
    """
    kernel = gaussian_kernel_1d(sigma, kernel_size)
    out = image.data
    # mode='reflect' in scipy.ndimage is half-sample symmetric padding.
    out = ndimage.convolve1d(out, kernel, axis=0, mode="reflect")
    out = ndimage.convolve1d(out, kernel, axis=1, mode="reflect")
    if image.value_range == (0.0, 1.0):
        out = np.clip(out, 0.0, 1.0)
    return ImageGrid(out, image.value_range, check_range=image.check_range)


@dataclass(frozen=True)
class SynthParams:
    """Controls for the synthetic paired-data generator."""

    depth_scale: float = 2.0
    attenuation: tuple[float, float, float] = (0.9, 0.5, 0.3)
    background_range: tuple[float, float] = (0.2, 0.8)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.depth_scale < 0:
            raise ValueError("depth_scale must be nonnegative")
        if any(a <= 0 for a in self.attenuation):
            raise ValueError("attenuation coefficients must be positive")
        lo, hi = self.background_range
        if not (0.0 <= lo <= hi <= 1.0):
            raise ValueError("background_range must be within [0, 1]")


def depth_field(height: int, width: int, params: SynthParams) -> np.ndarray:
    """Smooth random depth map in [0, depth_scale].

    Sum of 3 low-frequency cosine modes, deterministically seeded and
    rescaled; depth_scale == 0 collapses to a zero field.
    """
    rng = np.random.default_rng(params.seed)
    yy, xx = np.meshgrid(
        np.linspace(0.0, 1.0, height), np.linspace(0.0, 1.0, width), indexing="ij"
    )
    field = np.zeros((height, width), dtype=np.float64)
    for _ in range(3):
        fx, fy = rng.uniform(0.5, 2.0, size=2)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        amp = rng.uniform(0.5, 1.0)
        field += amp * np.cos(2.0 * np.pi * (fx * xx + fy * yy) + phase)
    span = field.max() - field.min()
    if span < 1e-12 or params.depth_scale == 0.0:
        return np.zeros_like(field)
    return (field - field.min()) / span * params.depth_scale


def transmission_from_depth(
    depth: np.ndarray, attenuation: tuple[float, float, float]
) -> np.ndarray:
    """Per-channel Beer-Lambert transmission exp(-beta_c * d), floored at
    ``EPS_T``."""
    beta = np.asarray(attenuation, dtype=np.float64)
    t = np.exp(-depth[..., None] * beta[None, None, :])
    return np.maximum(t, EPS_T)


def smooth_color_field(height: int, width: int, seed: int) -> ImageGrid:
    """Seeded smooth RGB test card in [0, 1] for procedural datasets."""
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(
        np.linspace(0.0, 1.0, height), np.linspace(0.0, 1.0, width), indexing="ij"
    )
    data = np.empty((height, width, 3), dtype=np.float64)
    for c in range(3):
        chan = np.zeros((height, width))
        for _ in range(3):
            fx, fy = rng.uniform(0.5, 3.0, size=2)
            phase = rng.uniform(0.0, 2.0 * np.pi)
            chan += rng.uniform(0.3, 1.0) * np.cos(
                2.0 * np.pi * (fx * xx + fy * yy) + phase
            )
        span = chan.max() - chan.min()
        data[..., c] = 0.5 if span < 1e-12 else (chan - chan.min()) / span
    return ImageGrid(data * 0.9 + 0.05)


def synth_pair(
    image: ImageGrid, params: SynthParams
) -> tuple[ImageGrid, PhysicsPrior]:
    """Degrade a clean image with a seeded synthetic water column.

    Returns the degraded image together with the exact prior used, so
    closed-loop tests can verify recovery against ground truth.
    """
    h, w, c = image.shape
    if c != 3:
        raise GridError("synth_pair expects a 3-channel image")
    depth = depth_field(h, w, params)
    t = transmission_from_depth(depth, params.attenuation)
    rng = np.random.default_rng(params.seed + 1)
    lo, hi = params.background_range
    b_levels = rng.uniform(lo, hi, size=3)
    b = np.broadcast_to(b_levels[None, None, :], (h, w, 3)).copy()
    prior = PhysicsPrior(
        transmission=ImageGrid(t),
        background=ImageGrid(b),
    )
    return degrade(image, prior), prior
