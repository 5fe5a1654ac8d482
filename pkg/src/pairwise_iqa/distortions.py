"""Parametric distortion families and the analytic ground-truth error.

Five families stand in for a real distortion bank.  Each takes a scalar
``strength``; strength 0 leaves the image untouched.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import ndimage


def _noise(img: np.ndarray, s: float, rng: np.random.Generator) -> np.ndarray:
    return img + rng.standard_normal(img.shape) * (s * 255.0)


def _box(img: np.ndarray, radius: int) -> np.ndarray:
    if radius == 0:
        return img
    size = [2 * radius + 1, 2 * radius + 1] + [1] * (img.ndim - 2)
    return ndimage.uniform_filter(img, size=size, mode="reflect")


def _blur(img: np.ndarray, s: float, rng: np.random.Generator) -> np.ndarray:
    k = int(np.floor(s))
    frac = s - k
    out = _box(img, k)
    if frac > 0:
        out = (1.0 - frac) * out + frac * _box(img, k + 1)
    return out


def quantize_levels(s: float) -> int:
    return max(2, int(round(2.0 ** (8.0 * (1.0 - s)))))


def _quantize(img: np.ndarray, s: float, rng: np.random.Generator) -> np.ndarray:
    levels = quantize_levels(s)
    step = 255.0 / (levels - 1)
    return np.round(img / step) * step


def _contrast(img: np.ndarray, s: float, rng: np.random.Generator) -> np.ndarray:
    m = img.mean(axis=(0, 1), keepdims=True)
    return m + (1.0 - s) * (img - m)


def pixelate_block(s: float) -> int:
    return 1 + int(round(s * 7))


def _pixelate(img: np.ndarray, s: float, rng: np.random.Generator) -> np.ndarray:
    b = pixelate_block(s)
    if b == 1:
        return img
    h, w = img.shape[:2]
    ph, pw = -h % b, -w % b
    pad = [(0, ph), (0, pw)] + [(0, 0)] * (img.ndim - 2)
    p = np.pad(img, pad, mode="edge")
    H, W = p.shape[:2]
    blocks = p.reshape(H // b, b, W // b, b, *p.shape[2:]).mean(axis=(1, 3))
    up = np.repeat(np.repeat(blocks, b, axis=0), b, axis=1)
    return up[:h, :w]


@dataclass(frozen=True)
class Family:
    name: str
    max_strength: float
    fn: Callable[[np.ndarray, float, np.random.Generator], np.ndarray]
    unit: str


FAMILIES: dict[str, Family] = {
    f.name: f
    for f in (
        Family("gaussian_noise", 0.3, _noise, "noise std as a fraction of 255"),
        Family("box_blur", 4.0, _blur, "box radius in pixels, fractional radii blend"),
        Family("quantize", 1.0, _quantize, "levels = max(2, round(2**(8*(1-s))))"),
        Family("contrast_scale", 0.9, _contrast, "fractional contrast reduction about the mean"),
        Family("pixelate", 1.0, _pixelate, "block size = 1 + round(7*s)"),
    )
}


@dataclass(frozen=True)
class DistortionSpec:
    family: str
    strength: float

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown distortion family {self.family!r}; "
                             f"choose from {sorted(FAMILIES)}")
        hi = FAMILIES[self.family].max_strength
        if not 0.0 <= self.strength <= hi:
            raise ValueError(f"{self.family} strength {self.strength} outside [0, {hi}]")

    def to_dict(self) -> dict:
        return {"family": self.family, "strength": self.strength}


def apply_distortion(image: np.ndarray, spec: DistortionSpec, seed: int = 0) -> np.ndarray:
    """Distort an 8-bit grayscale or RGB image; same seed, same output."""
    image = np.asarray(image)
    if image.dtype != np.uint8:
        raise ValueError(f"expected a uint8 image, got {image.dtype}")
    if spec.strength == 0:
        return image.copy()
    rng = np.random.default_rng(seed)
    out = FAMILIES[spec.family].fn(image.astype(np.float64), float(spec.strength), rng)
    return np.clip(np.round(out), 0, 255).astype(np.uint8)


def downsample2(a: np.ndarray) -> np.ndarray:
    """2x2 block average over the two leading axes (odd edges cropped)."""
    h, w = a.shape[0] // 2 * 2, a.shape[1] // 2 * 2
    a = a[:h, :w]
    return a.reshape(h // 2, 2, w // 2, 2, *a.shape[2:]).mean(axis=(1, 3))


def oracle_score(image: np.ndarray, reference: np.ndarray, scales: int = 3) -> float:
    """Ground-truth error proxy: RMSE on the [0, 1] scale averaged over
    ``scales`` dyadic resolutions (full, 1/2, 1/4)."""
    a = np.asarray(image, dtype=np.float64) / 255.0
    r = np.asarray(reference, dtype=np.float64) / 255.0
    if a.shape != r.shape:
        raise ValueError(f"image shape {a.shape} != reference shape {r.shape}")
    total = 0.0
    for k in range(scales):
        if k:
            a, r = downsample2(a), downsample2(r)
        total += float(np.sqrt(np.mean((a - r) ** 2)))
    return total / scales
