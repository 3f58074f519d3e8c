"""Reference and no-reference image quality metrics plus CSV reporting.

PSNR/SSIM follow the standard formulations on [0, 1] images.  UCIQE and UIQM
implement the published underwater scores with their original coefficient
sets; term normalizations are pinned here so reports stay comparable:

* UCIQE = 0.4680 * sigma_chroma + 0.2745 * contrast_luma + 0.2576 * mean_sat,
  computed in CIELab with chroma scaled by 1/100, luma contrast as the 99th
  minus 1st percentile of L/100, saturation as chroma/L.
* UIQM = 0.0282 * UICM + 0.2953 * UISM + 3.5753 * UIConM, computed on the
  [0, 255] scale with 8x8 blocks, asymmetric alpha-trimmed colorfulness
  (alpha = 0.1), Sobel-EME sharpness, and logAMEE contrast on luma.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .grids import GridError, ImageGrid, require_same_shape
from .physics import gaussian_kernel_1d

PSNR_CAP_DB = 100.0

UCIQE_COEFFS = (0.4680, 0.2745, 0.2576)
UIQM_COEFFS = (0.0282, 0.2953, 3.5753)


def psnr(a: ImageGrid, b: ImageGrid) -> float:
    """Peak signal-to-noise ratio in dB on [0, 1] images; identical images
    return the 100 dB cap."""
    require_same_shape(a, b, "psnr inputs")
    mse = float(np.mean((a.data - b.data) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * math.log10(1.0 / mse), PSNR_CAP_DB)


def _local_gaussian(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    out = ndimage.convolve1d(x, kernel, axis=0, mode="reflect")
    return ndimage.convolve1d(out, kernel, axis=1, mode="reflect")


def ssim(
    a: ImageGrid,
    b: ImageGrid,
    window_size: int = 11,
    sigma: float = 1.5,
) -> float:
    """Mean structural similarity with a Gaussian window, channel-averaged.

    Standard constants C1 = 0.01^2, C2 = 0.03^2 on the [0, 1] range.
    """
    require_same_shape(a, b, "ssim inputs")
    h, w, _ = a.shape
    if h < window_size or w < window_size:
        raise GridError(
            f"image {h}x{w} smaller than ssim window {window_size}"
        )
    kernel = gaussian_kernel_1d(sigma, window_size)
    c1, c2 = 0.01**2, 0.03**2
    scores = []
    for c in range(a.channels):
        x = a.data[..., c]
        y = b.data[..., c]
        mu_x = _local_gaussian(x, kernel)
        mu_y = _local_gaussian(y, kernel)
        xx = _local_gaussian(x * x, kernel) - mu_x * mu_x
        yy = _local_gaussian(y * y, kernel) - mu_y * mu_y
        xy = _local_gaussian(x * y, kernel) - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
        den = (mu_x**2 + mu_y**2 + c1) * (xx + yy + c2)
        scores.append(float(np.mean(num / den)))
    return float(np.mean(scores))


# sRGB (D65) to CIELab, vectorized.  Verified against skimage in the tests.
# Rows are rescaled so neutral RGB maps exactly onto the white point, which
# keeps gray images at exactly zero chroma.
_D65_WHITE = np.array([0.95047, 1.0, 1.08883])
_RGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
_RGB_TO_XYZ *= (_D65_WHITE / _RGB_TO_XYZ.sum(axis=1))[:, None]


def rgb_to_lab(rgb: np.ndarray) -> np.ndarray:
    """Convert an H x W x 3 sRGB array in [0, 1] to CIELab (L in [0, 100])."""
    rgb = np.clip(rgb, 0.0, 1.0)
    linear = np.where(
        rgb <= 0.04045, rgb / 12.92, ((rgb + 0.055) / 1.055) ** 2.4
    )
    xyz = linear @ _RGB_TO_XYZ.T
    xyz = xyz / _D65_WHITE
    eps, kappa = 216.0 / 24389.0, 24389.0 / 27.0
    f = np.where(xyz > eps, np.cbrt(xyz), (kappa * xyz + 16.0) / 116.0)
    fx, fy, fz = f[..., 0], f[..., 1], f[..., 2]
    lab = np.empty_like(xyz)
    lab[..., 0] = 116.0 * fy - 16.0
    lab[..., 1] = 500.0 * (fx - fy)
    lab[..., 2] = 200.0 * (fy - fz)
    return lab


def uciqe(image: ImageGrid) -> float:
    """No-reference underwater color quality score (higher is better)."""
    if image.channels != 3:
        raise GridError("uciqe expects an RGB image")
    lab = rgb_to_lab(image.data)
    luma = lab[..., 0]
    chroma = np.hypot(lab[..., 1], lab[..., 2])
    sigma_chroma = float(np.std(chroma)) / 100.0
    l_scaled = luma / 100.0
    contrast_luma = float(
        np.percentile(l_scaled, 99.0) - np.percentile(l_scaled, 1.0)
    )
    saturation = chroma / np.maximum(luma, 1e-6)
    # gray pixels have zero chroma; treat their saturation as exactly 0
    saturation = np.where(chroma < 1e-12, 0.0, saturation)
    mean_sat = float(np.mean(saturation))
    c1, c2, c3 = UCIQE_COEFFS
    return c1 * sigma_chroma + c2 * contrast_luma + c3 * mean_sat


def _alpha_trimmed_mean(values: np.ndarray, alpha: float = 0.1) -> float:
    flat = np.sort(values.ravel())
    k = flat.size
    lo = math.ceil(alpha * k)
    hi = math.floor(alpha * k)
    trimmed = flat[lo : k - hi] if k - lo - hi > 0 else flat
    return float(trimmed.mean())


def _colorfulness(rgb255: np.ndarray) -> float:
    rg = rgb255[..., 0] - rgb255[..., 1]
    yb = (rgb255[..., 0] + rgb255[..., 1]) / 2.0 - rgb255[..., 2]
    mu_rg = _alpha_trimmed_mean(rg)
    mu_yb = _alpha_trimmed_mean(yb)
    var_rg = float(np.mean((rg - mu_rg) ** 2))
    var_yb = float(np.mean((yb - mu_yb) ** 2))
    return -0.0268 * math.hypot(mu_rg, mu_yb) + 0.1586 * math.sqrt(
        var_rg + var_yb
    )


def _block_view(x: np.ndarray, size: int) -> np.ndarray:
    h, w = x.shape
    bh, bw = h // size, w // size
    x = x[: bh * size, : bw * size]
    return x.reshape(bh, size, bw, size).swapaxes(1, 2)


def _eme(x: np.ndarray, block: int = 8) -> float:
    """Enhancement measure: mean log max/min ratio over blocks.

    Zero extrema are replaced by 1 (the customary guard), so flat blocks
    contribute nothing while strong edges next to flat areas still count.
    """
    block = max(1, min(block, *x.shape))
    blocks = _block_view(x, block)
    bmax = blocks.max(axis=(2, 3))
    bmin = blocks.min(axis=(2, 3))
    bmax = np.where(bmax == 0.0, 1.0, bmax)
    bmin = np.where(bmin == 0.0, 1.0, bmin)
    return float(2.0 * np.log(bmax / bmin).mean())


def _sharpness(rgb255: np.ndarray) -> float:
    weights = (0.299, 0.587, 0.114)
    total = 0.0
    for c, w in enumerate(weights):
        chan = rgb255[..., c]
        gx = ndimage.sobel(chan, axis=0, mode="reflect")
        gy = ndimage.sobel(chan, axis=1, mode="reflect")
        edge = np.hypot(gx, gy) * chan
        total += w * _eme(edge)
    return total


def _log_amee(gray255: np.ndarray, block: int = 8) -> float:
    block = max(1, min(block, *gray255.shape))
    blocks = _block_view(gray255, block)
    bmax = blocks.max(axis=(2, 3))
    bmin = blocks.min(axis=(2, 3))
    top = bmax - bmin
    bot = bmax + bmin
    valid = (top > 0) & (bot > 0)
    ratio = np.zeros_like(top)
    ratio[valid] = top[valid] / bot[valid]
    vals = np.zeros_like(top)
    vals[valid] = ratio[valid] * np.log(ratio[valid])
    return float(-vals.mean())


def uiqm(image: ImageGrid) -> float:
    """No-reference underwater quality: colorfulness + sharpness + contrast."""
    if image.channels != 3:
        raise GridError("uiqm expects an RGB image")
    rgb255 = image.data * 255.0
    uicm = _colorfulness(rgb255)
    uism = _sharpness(rgb255)
    luma = rgb255 @ np.array([0.299, 0.587, 0.114])
    uiconm = _log_amee(luma)
    c1, c2, c3 = UIQM_COEFFS
    return c1 * uicm + c2 * uism + c3 * uiconm


def uiqm_components(image: ImageGrid) -> tuple[float, float, float]:
    """(UICM, UISM, UIConM) terms, exposed for the term-wise oracles."""
    rgb255 = image.data * 255.0
    luma = rgb255 @ np.array([0.299, 0.587, 0.114])
    return _colorfulness(rgb255), _sharpness(rgb255), _log_amee(luma)


@dataclass
class MetricRow:
    name: str
    psnr: float
    ssim: float
    uciqe: float
    uiqm: float


@dataclass
class MetricReport:
    """Per-image metric rows plus their arithmetic means."""

    rows: list[MetricRow]

    def means(self) -> MetricRow:
        if not self.rows:
            raise ValueError("empty report")
        return MetricRow(
            name="mean",
            psnr=float(np.mean([r.psnr for r in self.rows])),
            ssim=float(np.mean([r.ssim for r in self.rows])),
            uciqe=float(np.mean([r.uciqe for r in self.rows])),
            uiqm=float(np.mean([r.uiqm for r in self.rows])),
        )

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["name", "psnr", "ssim", "uciqe", "uiqm"])
            for row in [*self.rows, self.means()]:
                writer.writerow(
                    [row.name, f"{row.psnr:.6f}", f"{row.ssim:.6f}",
                     f"{row.uciqe:.6f}", f"{row.uiqm:.6f}"]
                )


def score_pair(name: str, result: ImageGrid, reference: ImageGrid) -> MetricRow:
    return MetricRow(
        name=name,
        psnr=psnr(result, reference),
        ssim=ssim(result, reference),
        uciqe=uciqe(result),
        uiqm=uiqm(result),
    )
