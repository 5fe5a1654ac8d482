"""Twin-branch pairwise training.

Two error scores ``s_a = f(A, R)`` and ``s_b = f(B, R)`` from one shared
estimator become a preference ``sigmoid(s_b - s_a)``; the loss is the mean
squared difference to the observed preference fraction.

Any object with ``parameters()``, ``patch_size`` and
``image_scores(dist_stacks, ref_stack, n_images)`` can be trained here;
:class:`~pairwise_iqa.net.ErrorNet` is the default.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from . import tensor as T
from .dataset import TrainingTriplet
from .net import extract_patches, sample_locations
from .tensor import Parameter, Tensor

log = logging.getLogger(__name__)


class ErrorEstimator(Protocol):
    patch_size: int

    def parameters(self) -> list[Parameter]: ...

    def image_scores(self, dist_stacks: Sequence[np.ndarray], ref_stack: np.ndarray,
                     n_images: int) -> list[Tensor]: ...


def patch_size_of(f) -> int:
    return f.config.patch_size if hasattr(f, "config") else f.patch_size


class PixelErrorEstimator:
    """Minimal plug-in estimator: a learned per-channel weighting of the
    mean squared patch difference, ``s = sum_c w_c * mean((D - R)_c ** 2)``.

    Useful as a fast stand-in for the network and as a template for other
    estimators; it is zero on the reference by construction.
    """

    def __init__(self, channels: int = 3, patch_size: int = 8, init: float = 1.0):
        self.patch_size = patch_size
        self.weights = Parameter(np.full(channels, float(init)), "pixel.w")

    def parameters(self) -> list[Parameter]:
        return [self.weights]

    def image_scores(self, dist_stacks: Sequence[np.ndarray], ref_stack: np.ndarray,
                     n_images: int) -> list[Tensor]:
        out = []
        for stack in dist_stacks:
            mse = ((stack - ref_stack) ** 2).mean(axis=(2, 3))  # [N*M, C]
            per_image = mse.reshape(n_images, -1, mse.shape[1]).mean(axis=1)
            out.append(T.fully_connected(per_image, T.reshape(self.weights, (1, -1)),
                                         Tensor(np.zeros(1))))
        return [T.reshape(o, (n_images,)) for o in out]


class TrainingDivergedError(RuntimeError):
    def __init__(self, iteration: int, loss: float, checkpoint: Path | None):
        self.iteration = iteration
        self.checkpoint = checkpoint
        where = f"; diagnostic checkpoint at {checkpoint}" if checkpoint else ""
        super().__init__(f"non-finite loss {loss} at iteration {iteration}{where}")


@dataclass
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 4
    patches_per_image: int = 36
    step_size: float = 1e-4
    optimizer: str = "adam"  # or "sgd"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 0  # 0: only at the end
    log_every: int = 50

    def __post_init__(self):
        for name in ("iterations", "batch_size", "patches_per_image"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


def _canonical(t: TrainingTriplet) -> tuple[np.ndarray, np.ndarray, float]:
    """Orientation with label >= 1/2 (ties broken on pixel bytes).

    A triplet and its swap-complement map to the same arrays and the same
    label bits, which makes their losses and gradients bitwise equal.
    """
    p = t.label
    flip = p < 0.5 or (p == 0.5 and t.image_a.tobytes() > t.image_b.tobytes())
    if flip:
        return t.image_b, t.image_a, 1.0 - p
    return t.image_a, t.image_b, p


def _stacks(triplets: Sequence[TrainingTriplet], f, n_patches: int,
            rng: np.random.Generator, canonical: bool):
    p = patch_size_of(f)
    sa, sb, sr, labels = [], [], [], []
    for t in triplets:
        a, b, lab = _canonical(t) if canonical else (t.image_a, t.image_b, t.label)
        locs = sample_locations(t.image_ref.shape[1:], p, n_patches, rng)
        sa.append(extract_patches(a, locs, p))
        sb.append(extract_patches(b, locs, p))
        sr.append(extract_patches(t.image_ref, locs, p))
        labels.append(lab)
    cat = np.concatenate
    return cat(sa), cat(sb), cat(sr), np.array(labels)


def pair_scores(triplets: Sequence[TrainingTriplet], f, n_patches: int,
                rng: np.random.Generator, canonical: bool = False):
    """(s_a, s_b, labels) for a batch; patches co-located across A, B and R."""
    a, b, r, labels = _stacks(triplets, f, n_patches, rng, canonical)
    s_a, s_b = f.image_scores([a, b], r, len(triplets))
    return s_a, s_b, labels


def predicted_preference(triplet: TrainingTriplet, f, n_patches: int | None = None,
                         seed: int = 0) -> float:
    """Probability that A is preferred over B, via the shared estimator."""
    n = n_patches or _default_patches(f)
    s_a, s_b, _ = pair_scores([triplet], f, n, np.random.default_rng(seed))
    return float(T.sigmoid(T.sub(s_b, s_a)).data[0])


def _default_patches(f) -> int:
    return f.config.patches_train if hasattr(f, "config") else 36


def batch_loss(triplets: Sequence[TrainingTriplet], f, n_patches: int | None = None,
               rng: np.random.Generator | int = 0) -> Tensor:
    """Mean squared error between predicted and labelled preference."""
    if not triplets:
        raise ValueError("batch_loss needs at least one triplet")
    n = n_patches or _default_patches(f)
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    s_a, s_b, labels = pair_scores(triplets, f, n, rng, canonical=True)
    pred = T.sigmoid(T.sub(s_b, s_a))
    return T.mean(T.square(T.sub(pred, labels)))


class Adam:
    def __init__(self, params: Sequence[Parameter], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SGD:
    def __init__(self, params: Sequence[Parameter], lr: float):
        self.params = list(params)
        self.lr = lr

    def step(self) -> None:
        for p in self.params:
            p.data -= self.lr * p.grad


@dataclass
class TrainingLog:
    rows: list[tuple[int, float, float]] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [r[1] for r in self.rows]

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "loss", "wall_time"])
            for it, loss, wall in self.rows:
                w.writerow([it, repr(loss), f"{wall:.3f}"])


def train(dataset: Sequence[TrainingTriplet], config: TrainConfig, f=None,
          checkpoint_dir: str | Path | None = None) -> tuple[object, TrainingLog]:
    """Minibatch training with fresh patch locations every iteration.

    Returns the trained estimator (``f``, updated in place) and the per-
    iteration loss log.  Everything random derives from ``config.seed``.
    """
    if not dataset:
        raise ValueError("training dataset is empty")
    if f is None:
        from .net import ErrorNet
        f = ErrorNet(seed=config.seed)
    params = f.parameters()
    if config.optimizer == "adam":
        opt = Adam(params, config.step_size, config.beta1, config.beta2, config.eps)
    else:
        opt = SGD(params, config.step_size)
    rng = np.random.default_rng(config.seed)
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    history = TrainingLog()
    start = time.perf_counter()
    for it in range(1, config.iterations + 1):
        idx = rng.integers(0, len(dataset), size=config.batch_size)
        batch = [dataset[i] for i in idx]
        for p in params:
            p.zero_grad()
        loss = batch_loss(batch, f, config.patches_per_image, rng)
        value = float(loss.data)
        if not math.isfinite(value):
            path = None
            if ckpt_dir and hasattr(f, "save"):
                path = ckpt_dir / f"diverged_{it:06d}.ckpt"
                f.save(path)
            raise TrainingDivergedError(it, value, path)
        loss.backward()
        opt.step()
        if hasattr(f, "recalibrate"):
            f.recalibrate()
        history.rows.append((it, value, time.perf_counter() - start))
        if config.log_every and it % config.log_every == 0:
            recent = history.losses[-config.log_every:]
            log.info("iter %d  loss %.5f", it, float(np.mean(recent)))
        if ckpt_dir and config.checkpoint_every and it % config.checkpoint_every == 0 \
                and hasattr(f, "save"):
            f.save(ckpt_dir / f"step_{it:06d}.ckpt")
    if hasattr(f, "recalibrate"):
        f.recalibrate()
    if ckpt_dir and hasattr(f, "save"):
        f.save(ckpt_dir / "final.ckpt")
    return f, history
