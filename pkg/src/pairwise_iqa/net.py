"""Patch-based error-estimation network.

A weight-shared convolutional feature extractor turns each co-located patch
of the distorted and reference images into a multi-scale feature vector
``x`` and a last-layer vector ``y``.  Two small fully connected heads map
``x_ref - x_dist`` to a patch error and ``y_ref - y_dist`` to a positive
patch weight; the image error is the weighted mean of patch errors.

The raw error head outputs a constant on a zero difference (its bias path).
That constant is the reference-zero offset; every reported score has it
removed, so the reference scored against itself is exactly 0.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor

CHECKPOINT_FORMAT = 1
WEIGHT_EPS = 1e-6


@dataclass
class NetConfig:
    conv_widths: tuple[int, ...] = (8, 8, 16, 16, 32, 32, 64, 64, 128, 128, 128)
    concat_taps: tuple[int, ...] | None = None  # None: every pooled layer plus the last
    hidden_units: int = 512
    patch_size: int = 32
    patches_train: int = 36
    patches_eval: int = 1024
    in_channels: int = 3

    def __post_init__(self):
        self.conv_widths = tuple(int(w) for w in self.conv_widths)
        if not self.conv_widths or min(self.conv_widths) <= 0:
            raise ValueError("conv_widths must be a non-empty list of positive integers")
        if self.concat_taps is None:
            self.concat_taps = self.default_taps(len(self.conv_widths))
        self.concat_taps = tuple(sorted(int(t) for t in self.concat_taps))
        if not self.concat_taps or not set(self.concat_taps) <= set(range(1, self.n_layers + 1)):
            raise ValueError(f"concat_taps {self.concat_taps} must be within 1..{self.n_layers}")
        if self.patch_size % (2 ** self.n_pools):
            raise ValueError(f"patch size {self.patch_size} is not divisible by "
                             f"2**{self.n_pools} (one halving per pooled layer)")
        for name in ("hidden_units", "patches_train", "patches_eval", "in_channels"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @staticmethod
    def default_taps(n_layers: int) -> tuple[int, ...]:
        return tuple(sorted({l for l in range(2, n_layers + 1, 2)} | {n_layers}))

    @property
    def n_layers(self) -> int:
        return len(self.conv_widths)

    @property
    def n_pools(self) -> int:
        return self.n_layers // 2

    def side_after(self, layer: int) -> int:
        """Spatial side of layer ``layer``'s output (after its pool, if any)."""
        return self.patch_size // 2 ** (layer // 2)

    @property
    def x_length(self) -> int:
        return sum(self.conv_widths[t - 1] * self.side_after(t) ** 2 for t in self.concat_taps)

    @property
    def y_length(self) -> int:
        return self.conv_widths[-1] * self.side_after(self.n_layers) ** 2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        return cls(**d)


@dataclass
class FeaturePair:
    x: Tensor  # [batch, x_length]
    y: Tensor  # [batch, y_length]


class ErrorNet:
    """Default error-estimation function.  See module docstring."""

    def __init__(self, config: NetConfig | None = None, seed: int = 0):
        self.config = config or NetConfig()
        self.params: dict[str, Parameter] = {}
        self.reference_zero = 0.0
        self._init(np.random.default_rng(seed))
        self.recalibrate()

    # parameters ------------------------------------------------------------
    def _add(self, name: str, value: np.ndarray) -> Parameter:
        p = Parameter(value, name)
        self.params[name] = p
        return p

    def _init(self, rng: np.random.Generator) -> None:
        cfg = self.config
        c = cfg.in_channels
        for l, f in enumerate(cfg.conv_widths, start=1):
            std = np.sqrt(2.0 / (9 * c))
            self._add(f"fe.conv{l}.w", rng.normal(0.0, std, size=(f, c, 3, 3)))
            self._add(f"fe.conv{l}.b", np.zeros(f))
            c = f
        h = cfg.hidden_units
        for head, n_in in (("score", cfg.x_length), ("weight", cfg.y_length)):
            self._add(f"sc.{head}.fc1.w", rng.normal(0.0, np.sqrt(2.0 / n_in), size=(h, n_in)))
            self._add(f"sc.{head}.fc1.b", np.zeros(h))
            self._add(f"sc.{head}.fc2.w", rng.normal(0.0, np.sqrt(1.0 / h), size=(1, h)))
            self._add(f"sc.{head}.fc2.b", np.zeros(1))

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def fe_parameters(self) -> list[Parameter]:
        return [p for n, p in self.params.items() if n.startswith("fe.")]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    # feature extraction --------------------------------------------------------
    def extract_features(self, patches) -> FeaturePair:
        """Patches [batch, C, P, P] (or one [C, P, P]) in [0, 1] -> FeaturePair."""
        cfg = self.config
        data = np.asarray(patches.data if isinstance(patches, Tensor) else patches, dtype=np.float64)
        if data.ndim == 3:
            data = data[None]
        if data.ndim != 4 or data.shape[1] != cfg.in_channels or data.shape[2:] != (cfg.patch_size,) * 2:
            raise ValueError(f"patches must be [batch, {cfg.in_channels}, {cfg.patch_size}, "
                             f"{cfg.patch_size}], got {data.shape}")
        # convolutions run channel-major: [C, batch, H, W]
        x = T.Tensor(np.ascontiguousarray(data.transpose(1, 0, 2, 3)))
        taps = []
        for l in range(1, cfg.n_layers + 1):
            x = T.relu(T.conv2d(x, self.params[f"fe.conv{l}.w"], self.params[f"fe.conv{l}.b"]))
            if l % 2 == 0:
                x = T.maxpool2(x)
            if l in cfg.concat_taps:
                taps.append(x)
        return FeaturePair(T.concat(taps, batch_axis=1), T.concat([x], batch_axis=1))

    # score computation ---------------------------------------------------------
    def _hidden(self, head: str, diff) -> Tensor:
        p = self.params
        return T.relu(T.fully_connected(diff, p[f"sc.{head}.fc1.w"], p[f"sc.{head}.fc1.b"]))

    def patch_error(self, x_ref, x_dist) -> Tensor:
        """Raw (uncalibrated) patch error from the multi-scale feature difference."""
        diff = T.sub(x_ref, x_dist)
        self._check_len(diff, self.config.x_length, "x")
        p = self.params
        out = T.fully_connected(self._hidden("score", diff), p["sc.score.fc2.w"], p["sc.score.fc2.b"])
        return T.reshape(out, out.shape[:-1])

    def calibrated_patch_error(self, x_ref, x_dist) -> Tensor:
        """``patch_error - reference_zero``, arranged so a zero difference gives
        exactly 0: the hidden activation of the zero input (``relu(b1)``) is
        subtracted before the output layer, which cancels the bias path."""
        diff = T.sub(x_ref, x_dist)
        self._check_len(diff, self.config.x_length, "x")
        h = self._hidden("score", diff)
        h0 = T.relu(self.params["sc.score.fc1.b"])
        w2 = self.params["sc.score.fc2.w"]
        out = T.sum(T.mul(T.sub(h, h0), T.reshape(w2, (w2.shape[1],))), axis=-1)
        return out

    def patch_weight(self, y_ref, y_dist) -> Tensor:
        """Strictly positive patch weight: softplus of the weight head, plus 1e-6."""
        diff = T.sub(y_ref, y_dist)
        self._check_len(diff, self.config.y_length, "y")
        p = self.params
        z = T.fully_connected(self._hidden("weight", diff), p["sc.weight.fc2.w"], p["sc.weight.fc2.b"])
        z = T.reshape(z, z.shape[:-1])
        return T.add(T.softplus(z), WEIGHT_EPS)

    @staticmethod
    def _check_len(diff: Tensor, n: int, which: str) -> None:
        if diff.shape[-1] != n:
            raise ValueError(f"{which}-feature length {diff.shape[-1]} != expected {n}")

    def reference_zero_constant(self) -> float:
        """Raw error-head output on an all-zero feature difference."""
        z = np.zeros(self.config.x_length)
        return float(self.patch_error(z, z).data)

    def recalibrate(self) -> float:
        self.reference_zero = self.reference_zero_constant()
        return self.reference_zero

    # image-level scoring -------------------------------------------------------
    def image_scores(self, dist_stacks: Sequence[np.ndarray], ref_stack: np.ndarray,
                     n_images: int) -> list[Tensor]:
        """Calibrated errors for several distorted patch stacks against one
        shared reference stack.

        Each stack is [n_images * M, C, P, P] with the M patches of image k in
        rows k*M..(k+1)*M-1, co-located across all stacks.  Returns one
        [n_images] tensor per distorted stack.  The reference features are
        computed once and reused.
        """
        ref = self.extract_features(ref_stack)
        out = []
        for stack in dist_stacks:
            d = self.extract_features(stack)
            e = self.calibrated_patch_error(ref.x, d.x)
            w = self.patch_weight(ref.y, d.y)
            m = e.shape[0] // n_images
            e = T.reshape(e, (n_images, m))
            w = T.reshape(w, (n_images, m))
            out.append(T.div(T.sum(T.mul(w, e), axis=1), T.sum(w, axis=1)))
        return out

    def score_patches(self, dist: np.ndarray, ref: np.ndarray, locs: np.ndarray,
                      chunk: int = 128) -> float:
        """Weighted-mean calibrated error over patches at ``locs`` of two
        float [C, H, W] images, evaluated ``chunk`` patches at a time."""
        p = self.config.patch_size
        num = den = 0.0
        for start in range(0, len(locs), chunk):
            sel = locs[start:start + chunk]
            ref_f = self.extract_features(extract_patches(ref, sel, p))
            dist_f = self.extract_features(extract_patches(dist, sel, p))
            e = self.calibrated_patch_error(ref_f.x, dist_f.x).data
            w = self.patch_weight(ref_f.y, dist_f.y).data
            num += float(w @ e)
            den += float(w.sum())
        return num / den

    def score_image(self, dist_image: np.ndarray, ref_image: np.ndarray,
                    n_patches: int | None = None, seed: int = 0) -> float:
        """Calibrated perceptual error of ``dist_image`` w.r.t. ``ref_image``.

        Images are uint8 HxW(xC) or float CxHxW in [0, 1].
        """
        dist, ref = as_chw(dist_image), as_chw(ref_image)
        if dist.shape != ref.shape:
            raise ValueError(f"image shapes differ: {dist.shape} vs {ref.shape}")
        n = n_patches or self.config.patches_eval
        locs = sample_locations(ref.shape[1:], self.config.patch_size, n,
                                np.random.default_rng(seed))
        return self.score_patches(dist, ref, locs)

    # checkpoints -------------------------------------------------------------
    def save(self, path: str | Path) -> None:
        """JSON header line, then little-endian float64 values in header order."""
        self.recalibrate()
        header = {
            "format_version": CHECKPOINT_FORMAT,
            "config": self.config.to_dict(),
            "parameters": [{"name": n, "shape": list(p.shape)} for n, p in self.params.items()],
            "reference_zero": self.reference_zero,
        }
        blob = b"".join(p.data.astype("<f8").tobytes() for p in self.params.values())
        Path(path).write_bytes(json.dumps(header).encode() + b"\n" + blob)

    @classmethod
    def load(cls, path: str | Path) -> "ErrorNet":
        raw = Path(path).read_bytes()
        cut = raw.index(b"\n")
        header = json.loads(raw[:cut])
        if header.get("format_version") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: unsupported checkpoint format {header.get('format_version')}")
        net = cls(NetConfig.from_dict(header["config"]))
        offset = cut + 1
        for entry in header["parameters"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape))
            vals = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape)
            net.params[entry["name"]].value = vals.astype(np.float64)
            offset += 8 * count
        if offset != len(raw):
            raise ValueError(f"{path}: {len(raw) - offset} trailing bytes")
        net.recalibrate()
        return net

    def state(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.params.items()}


def aggregate(errors, weights) -> float:
    """Weighted mean of patch errors; weights must be positive."""
    e = np.asarray(errors, dtype=float)
    w = np.asarray(weights, dtype=float)
    if e.size == 0 or e.shape != w.shape:
        raise ValueError("errors and weights must be equal-length and non-empty")
    if (w <= 0).any():
        raise ValueError("patch weights must be strictly positive")
    return float((w * e).sum() / w.sum())


def as_chw(img: np.ndarray) -> np.ndarray:
    a = np.asarray(img)
    if a.dtype == np.uint8:
        a = a.astype(np.float64) / 255.0
        return np.ascontiguousarray(a[None] if a.ndim == 2 else np.moveaxis(a, -1, 0))
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 2:
        a = a[None]
    return a


def sample_locations(shape: tuple[int, int], patch: int, n: int,
                     rng: np.random.Generator) -> np.ndarray:
    """``n`` top-left corners, uniform over valid positions, with replacement."""
    h, w = shape
    if patch > h or patch > w:
        raise ValueError(f"image {h}x{w} is smaller than the {patch}x{patch} patch")
    ys = rng.integers(0, h - patch + 1, size=n)
    xs = rng.integers(0, w - patch + 1, size=n)
    return np.stack([ys, xs], axis=1)


def extract_patches(img_chw: np.ndarray, locs: np.ndarray, patch: int) -> np.ndarray:
    return np.stack([img_chw[:, y:y + patch, x:x + patch] for y, x in locs])
