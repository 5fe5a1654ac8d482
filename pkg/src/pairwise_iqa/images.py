"""8-bit image helpers: synthetic reference scenes and binary PGM/PPM files."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy import ndimage


def synthetic_reference(size: int = 64, seed: int = 0, channels: int = 3) -> np.ndarray:
    """A deterministic natural-ish scene: smooth shading, flat shapes, a grating
    and fine texture, so every distortion family has something to act on."""
    rng = np.random.default_rng(seed)
    h = w = size
    yy, xx = np.mgrid[0:h, 0:w] / size
    img = np.empty((h, w, channels))
    for ch in range(channels):
        coarse = rng.uniform(40, 215, size=(4, 4))
        img[..., ch] = ndimage.zoom(coarse, size / 4, order=3, mode="nearest")[:h, :w]

    for _ in range(rng.integers(3, 6)):
        color = rng.uniform(0, 255, size=channels)
        cy, cx = rng.uniform(0.1, 0.9, size=2)
        if rng.random() < 0.5:
            r = rng.uniform(0.08, 0.25)
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
        else:
            hh, ww = rng.uniform(0.1, 0.35, size=2)
            mask = (np.abs(yy - cy) < hh / 2) & (np.abs(xx - cx) < ww / 2)
        img[mask] = 0.35 * img[mask] + 0.65 * color

    # oriented grating over a random band
    theta = rng.uniform(0, np.pi)
    freq = rng.uniform(4, 12)
    grating = 30 * np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)))
    band = (yy > rng.uniform(0.0, 0.5)) & (yy < rng.uniform(0.55, 1.0))
    img += (grating * band)[..., None]

    img += rng.normal(0, 6, size=img.shape)
    img = np.clip(np.round(img), 0, 255).astype(np.uint8)
    return img[..., 0] if channels == 1 else img


def to_unit(img: np.ndarray) -> np.ndarray:
    """uint8 HxW or HxWxC -> float64 CxHxW in [0, 1]."""
    a = np.asarray(img, dtype=np.float64) / 255.0
    if a.ndim == 2:
        a = a[None]
    else:
        a = np.moveaxis(a, -1, 0)
    return np.ascontiguousarray(a)


def write_pnm(path: str | Path, img: np.ndarray) -> None:
    """Binary PGM (P5) for HxW, PPM (P6) for HxWx3; 8-bit only."""
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise ValueError(f"expected uint8 image, got {img.dtype}")
    if img.ndim == 2:
        magic = b"P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"unsupported image shape {img.shape}")
    h, w = img.shape[:2]
    Path(path).write_bytes(magic + b"\n%d %d\n255\n" % (w, h) + img.tobytes())


def _tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    out, pos = [], 0
    while len(out) < count:
        while buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        start = pos
        while not buf[pos:pos + 1].isspace():
            pos += 1
        out.append(buf[start:pos])
    return out, pos + 1


def read_pnm(path: str | Path) -> np.ndarray:
    buf = Path(path).read_bytes()
    (magic, w, h, maxval), pos = _tokens(buf, 4)
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"{path}: not a binary PGM/PPM file")
    if int(maxval) != 255:
        raise ValueError(f"{path}: only 8-bit images are supported")
    w, h = int(w), int(h)
    ch = 3 if magic == b"P6" else 1
    data = np.frombuffer(buf, dtype=np.uint8, count=w * h * ch, offset=pos)
    return data.reshape((h, w, 3) if ch == 3 else (h, w)).copy()
