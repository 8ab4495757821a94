"""Image I/O, luma conversion, quality metrics, and paired augmentations.

Images are numpy float arrays of shape (H, W, 3) with values in [0, 1].
Conversion to 8-bit happens only at file boundaries (round half up).
PSNR/SSIM follow restoration practice: both are computed on the Y channel
of YCbCr (BT.601 digital convention, 16..235 footroom on the 0..255 scale).
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image as PILImage
from scipy.signal import convolve2d

PSNR_CAP_DB = 100.0

# BT.601 luma coefficients for [0,1] RGB inputs (MATLAB rgb2ycbcr convention)
_LUMA_WEIGHTS = np.array([65.481, 128.553, 24.966])
_LUMA_OFFSET = 16.0

_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_C1 = (0.01 * 255.0) ** 2
_SSIM_C2 = (0.03 * 255.0) ** 2


def validate_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) array, got shape {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError("image must have at least one pixel")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite values")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    return img


def load_image(path: str | os.PathLike) -> np.ndarray:
    """Load a PNG/JPEG file as an (H, W, 3) float array in [0, 1]."""
    with PILImage.open(path) as handle:
        rgb = handle.convert("RGB")
        arr = np.asarray(rgb, dtype=np.float64) / 255.0
    return validate_image(arr)


def save_image(path: str | os.PathLike, img: np.ndarray) -> None:
    """Write an image as 8-bit RGB PNG, clamping and rounding half up."""
    img = np.asarray(img, dtype=np.float64)
    quantized = np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    PILImage.fromarray(quantized, mode="RGB").save(path, format="PNG")


def to_luma(img: np.ndarray) -> np.ndarray:
    """BT.601 digital luma on the 0..255 scale (16 for black, 235 for white)."""
    img = validate_image(img)
    return _LUMA_OFFSET + img @ _LUMA_WEIGHTS


def psnr(a: np.ndarray, b: np.ndarray, cap_db: float = PSNR_CAP_DB) -> float:
    """Peak signal-to-noise ratio in dB between two [0,1] RGB images.

    Computed on the luma channel with MAX = 255. Identical images return
    ``cap_db`` so reports stay finite and sortable.
    """
    if np.shape(a) != np.shape(b):
        raise ValueError(f"shape mismatch: {np.shape(a)} vs {np.shape(b)}")
    ya = to_luma(a)
    yb = to_luma(b)
    mse = float(np.mean((ya - yb) ** 2))
    if mse == 0.0:
        return cap_db
    return min(cap_db, 10.0 * np.log10(255.0**2 / mse))


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean structural similarity between two [0,1] RGB images (luma channel)."""
    if np.shape(a) != np.shape(b):
        raise ValueError(f"shape mismatch: {np.shape(a)} vs {np.shape(b)}")
    return ssim_luma(to_luma(a), to_luma(b))


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    coords = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(coords**2) / (2.0 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def ssim_luma(ya: np.ndarray, yb: np.ndarray) -> float:
    """SSIM between two luma planes on the 0..255 scale.

    11x11 Gaussian window (sigma 1.5), C1 = (0.01*255)^2, C2 = (0.03*255)^2,
    averaged over the valid (fully windowed) region.
    """
    ya = np.asarray(ya, dtype=np.float64)
    yb = np.asarray(yb, dtype=np.float64)
    if ya.shape != yb.shape:
        raise ValueError(f"shape mismatch: {ya.shape} vs {yb.shape}")
    if min(ya.shape) < _SSIM_WINDOW:
        raise ValueError(
            f"image too small for SSIM: need min side >= {_SSIM_WINDOW}, got {ya.shape}"
        )
    win = _gaussian_window(_SSIM_WINDOW, _SSIM_SIGMA)

    mu_a = convolve2d(ya, win, mode="valid")
    mu_b = convolve2d(yb, win, mode="valid")
    mu_aa = mu_a * mu_a
    mu_bb = mu_b * mu_b
    mu_ab = mu_a * mu_b
    var_a = convolve2d(ya * ya, win, mode="valid") - mu_aa
    var_b = convolve2d(yb * yb, win, mode="valid") - mu_bb
    cov = convolve2d(ya * yb, win, mode="valid") - mu_ab

    ssim_map = ((2 * mu_ab + _SSIM_C1) * (2 * cov + _SSIM_C2)) / (
        (mu_aa + mu_bb + _SSIM_C1) * (var_a + var_b + _SSIM_C2)
    )
    return float(ssim_map.mean())


def _as_rng(seed_or_rng: int | np.random.Generator) -> np.random.Generator:
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)


def crop_window(
    height: int, width: int, size: int, rng: int | np.random.Generator
) -> tuple[int, int]:
    """Draw the (top, left) corner of a size x size crop window."""
    if size > height or size > width:
        raise ValueError(f"crop size {size} exceeds image dims ({height}, {width})")
    rng = _as_rng(rng)
    top = int(rng.integers(0, height - size + 1))
    left = int(rng.integers(0, width - size + 1))
    return top, left


def random_crop_pair(
    a: np.ndarray, b: np.ndarray, size: int, rng: int | np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Crop the same random window out of two aligned images."""
    if np.shape(a) != np.shape(b):
        raise ValueError(f"shape mismatch: {np.shape(a)} vs {np.shape(b)}")
    top, left = crop_window(a.shape[0], a.shape[1], size, rng)
    return (
        a[top : top + size, left : left + size].copy(),
        b[top : top + size, left : left + size].copy(),
    )


def random_flip_pair(
    a: np.ndarray, b: np.ndarray, p: float, rng: int | np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Apply horizontal then vertical flips, each with probability p, to both images."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"flip probability must be in [0, 1], got {p}")
    rng = _as_rng(rng)
    if rng.random() < p:
        a, b = a[:, ::-1], b[:, ::-1]
    if rng.random() < p:
        a, b = a[::-1, :], b[::-1, :]
    return a.copy(), b.copy()


@dataclass
class MetricsReport:
    """Per-image PSNR/SSIM rows plus dataset means."""

    rows: list[tuple[str, float, float]] = field(default_factory=list)

    def add(self, image_id: str, psnr_db: float, ssim_value: float) -> None:
        self.rows.append((image_id, float(psnr_db), float(ssim_value)))

    @property
    def count(self) -> int:
        return len(self.rows)

    @property
    def psnr_mean(self) -> float:
        return float(np.mean([r[1] for r in self.rows])) if self.rows else float("nan")

    @property
    def ssim_mean(self) -> float:
        return float(np.mean([r[2] for r in self.rows])) if self.rows else float("nan")

    def write_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["image", "psnr", "ssim"])
            for image_id, p, s in self.rows:
                writer.writerow([image_id, f"{p:.6f}", f"{s:.6f}"])

    def write_json(self, path: str | os.PathLike) -> None:
        if not self.rows:
            raise ValueError("refusing to summarize an empty report")
        summary = {
            "psnr_mean": self.psnr_mean,
            "ssim_mean": self.ssim_mean,
            "count": self.count,
        }
        with open(path, "w") as handle:
            json.dump(summary, handle, indent=2)
            handle.write("\n")
