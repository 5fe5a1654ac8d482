"""Finite-difference self-checks on a miniature network.

The mini configuration (two 4-channel conv layers, 8x8 patches, 8 hidden
units) is small enough to probe every parameter entry.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .dataset import TrainingTriplet
from .net import NetConfig, ErrorNet
from .tensor import GradCheckReport, Parameter, grad_check
from .train import batch_loss

MINI_CONFIG = NetConfig(conv_widths=(4, 4), hidden_units=8, patch_size=8,
                        patches_train=4, patches_eval=16)


def mini_triplets(n: int = 3, size: int = 12, channels: int = 3, seed: int = 0) -> list[TrainingTriplet]:
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        ref = rng.uniform(0.1, 0.9, (channels, size, size))
        a = np.clip(ref + rng.normal(0, 0.1, ref.shape), 0, 1)
        b = np.clip(ref + rng.normal(0, 0.2, ref.shape), 0, 1)
        out.append(TrainingTriplet(a, b, ref, float(rng.uniform(0.05, 0.95))))
    return out


def mini_gradcheck(seed: int = 0, tolerance: float = 1e-4, step: float = 1e-6) -> GradCheckReport:
    """Reverse-mode gradient of ``batch_loss`` vs central differences for
    every parameter entry of the mini network."""
    net = ErrorNet(MINI_CONFIG, seed=seed)
    # non-zero biases so no unit sits exactly on a ReLU kink at the probe point
    rng = np.random.default_rng(seed + 1)
    for name, p in net.params.items():
        if name.endswith(".b"):
            p.data[...] = rng.normal(0, 0.05, p.data.shape)
    net.recalibrate()
    triplets = mini_triplets(seed=seed)
    return grad_check(lambda: batch_loss(triplets, net, 4, rng=seed), net.parameters(),
                      step=step, tolerance=tolerance)


def layer_gradchecks(seed: int = 0, tolerance: float = 1e-5, step: float = 1e-6) -> dict[str, GradCheckReport]:
    """Each differentiable primitive checked in isolation through a random
    linear read-out."""
    rng = np.random.default_rng(seed)

    def readout(shape):
        return rng.normal(size=shape)

    def check(build, params):
        out = build()
        r = readout(out.shape)
        return grad_check(lambda: T.sum(T.mul(build(), r)), params, step=step, tolerance=tolerance)

    x = Parameter(rng.normal(size=(2, 6, 6)), "x")
    k = Parameter(rng.normal(size=(3, 2, 3, 3)), "kernel")
    b = Parameter(rng.normal(size=3), "bias")
    xb = Parameter(rng.normal(size=(2, 3, 6, 6)), "x_batched")
    v = Parameter(rng.normal(size=(5, 7)), "v")
    w = Parameter(rng.normal(size=(4, 7)), "fc.w")
    c = Parameter(rng.normal(size=4), "fc.b")
    # keep ReLU inputs away from the kink
    r_in = Parameter(np.where(rng.random(20) < 0.5, -1, 1) * rng.uniform(0.1, 1, 20), "relu.x")
    # distinct values so the max location is unique
    m_in = Parameter(rng.permutation(64).reshape(1, 8, 8).astype(float) / 10, "pool.x")
    s_in = Parameter(rng.normal(size=10) * 3, "z")
    parts = [Parameter(rng.normal(size=(3, 4)), "a"), Parameter(rng.normal(size=(3, 2, 2)), "b")]
    return {
        "conv2d": check(lambda: T.conv2d(x, k, b), [x, k, b]),
        "conv2d_batched": check(lambda: T.conv2d(xb, k, b), [xb, k, b]),
        "relu": check(lambda: T.relu(r_in), [r_in]),
        "maxpool2": check(lambda: T.maxpool2(m_in), [m_in]),
        "fully_connected": check(lambda: T.fully_connected(v, w, c), [v, w, c]),
        "concat": check(lambda: T.concat(parts, batch_axis=0), parts),
        "sigmoid": check(lambda: T.sigmoid(s_in), [s_in]),
        "softplus": check(lambda: T.softplus(s_in), [s_in]),
    }
