"""Small reverse-mode differentiation engine over float64 numpy arrays.

Only the operations the error-estimation network needs are provided:
3x3 same-padded convolution, ReLU, 2x2 max-pooling, affine layers,
concatenation, and the elementwise glue (add/sub/mul/div, sum, sigmoid,
softplus).  Every op accepts a leading batch axis so a stack of patches
goes through one call.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class Tensor:
    """A float64 array that remembers how it was computed."""

    __slots__ = ("data", "grad", "_parents", "_backward", "name", "_leaf_grad")

    def __init__(self, data, parents: tuple = (), backward: Callable | None = None,
                 name: str | None = None, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self._parents = parents
        self._backward = backward
        self.name = name
        self._leaf_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def requires_grad(self) -> bool:
        return self._leaf_grad or bool(self._parents) or isinstance(self, Parameter)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | float | None = None) -> None:
        """Propagate gradients from this tensor to every ancestor."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar output, "
                                 f"got shape {self.data.shape}")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        # intermediate grads are transient; parameter grads accumulate across calls
        for node in order:
            if not isinstance(node, Parameter):
                node.grad = None
        self._accumulate(np.broadcast_to(np.asarray(grad, dtype=DTYPE), self.data.shape))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, idx):
        return take(self, idx)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{label})"


class Parameter(Tensor):
    """Trainable leaf.  ``grad`` accumulates until :meth:`zero_grad`."""

    __slots__ = ()

    def __init__(self, value, name: str = ""):
        super().__init__(value, name=name)
        self.grad = np.zeros_like(self.data)

    @property
    def value(self) -> np.ndarray:
        return self.data

    @value.setter
    def value(self, v) -> None:
        v = np.asarray(v, dtype=DTYPE)
        if v.shape != self.data.shape:
            raise ValueError(f"{self.name}: shape {v.shape} != {self.data.shape}")
        self.data = v

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.data.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    return Tensor(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(-g, b.shape))

    return Tensor(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        a._accumulate(_unbroadcast(g * b.data, a.shape))
        b._accumulate(_unbroadcast(g * a.data, b.shape))

    return Tensor(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        a._accumulate(_unbroadcast(g / b.data, a.shape))
        b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return Tensor(a.data / b.data, (a, b), backward)


def square(x) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        x._accumulate(2.0 * x.data * g)

    return Tensor(x.data * x.data, (x,), backward)


def relu(x) -> Tensor:
    """max(0, x); the subgradient at exactly 0 is taken as 0."""
    x = as_tensor(x)
    mask = x.data > 0

    def backward(g):
        x._accumulate(g * mask)

    return Tensor(x.data * mask, (x,), backward)


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _stable_sigmoid(np.atleast_1d(x.data)).reshape(x.shape)

    def backward(g):
        x._accumulate(g * s * (1.0 - s))

    return Tensor(s, (x,), backward)


def softplus(x) -> Tensor:
    x = as_tensor(x)
    z = x.data
    out = np.logaddexp(0.0, z)

    def backward(g):
        x._accumulate(g * _stable_sigmoid(np.atleast_1d(z)).reshape(z.shape))

    return Tensor(out, (x,), backward)


# reductions and reshaping ----------------------------------------------------

def sum(x, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    x = as_tensor(x)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, x.shape))

    return Tensor(x.data.sum(axis=axis), (x,), backward)


def mean(x) -> Tensor:
    x = as_tensor(x)
    n = x.data.size

    def backward(g):
        x._accumulate(np.broadcast_to(g / n, x.shape))

    return Tensor(x.data.mean(), (x,), backward)


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        x._accumulate(g.reshape(x.shape))

    return Tensor(x.data.reshape(shape), (x,), backward)


def take(x, idx) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        x._accumulate(full)

    return Tensor(x.data[idx], (x,), backward)


def concat(inputs: Sequence[Tensor], batch_axis: int | None = None) -> Tensor:
    """Flatten each input and join them end to end.

    With ``batch_axis`` set, that axis of every input is treated as the
    sample index: the result is [batch, total_features], one concatenated
    vector per sample.
    """
    if not inputs:
        raise ValueError("concat needs at least one input")
    inputs = [as_tensor(t) for t in inputs]
    if batch_axis is None:
        flat = [t.data.reshape(-1) for t in inputs]
    else:
        n = inputs[0].shape[batch_axis]
        for t in inputs:
            if t.shape[batch_axis] != n:
                raise ValueError(f"concat batch sizes differ: {t.shape[batch_axis]} vs {n}")
        flat = [np.moveaxis(t.data, batch_axis, 0).reshape(n, -1) for t in inputs]
    sizes = [a.shape[-1] for a in flat]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(inputs, bounds[:-1], bounds[1:]):
            part = g[..., lo:hi]
            if batch_axis is None:
                t._accumulate(part.reshape(t.shape))
            else:
                moved = np.moveaxis(t.data, batch_axis, 0).shape
                t._accumulate(np.moveaxis(part.reshape(moved), 0, batch_axis))

    return Tensor(np.concatenate(flat, axis=-1), tuple(inputs), backward)


# layers --------------------------------------------------------------------

def fully_connected(x, weights: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``W @ x + b`` for x of shape [N] or [batch, N]; W is [M, N]."""
    x = as_tensor(x)
    if weights.data.ndim != 2 or bias.data.shape != (weights.shape[0],):
        raise ValueError(f"fully_connected: weights {weights.shape} / bias {bias.shape} mismatch")
    if x.shape[-1] != weights.shape[1]:
        raise ValueError(f"fully_connected: input length {x.shape[-1]} != weights "
                         f"columns {weights.shape[1]}")
    out = x.data @ weights.data.T + bias.data

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = x.data.reshape(-1, x.shape[-1])
        weights._accumulate(g2.T @ x2)
        bias._accumulate(g2.sum(axis=0))
        x._accumulate(g @ weights.data)

    return Tensor(out, (x, weights, bias), backward)


_OFFSETS = [(i, j) for i in range(3) for j in range(3)]


def conv2d(x, kernel: Tensor, bias: Tensor) -> Tensor:
    """3x3 convolution, stride 1, zero same-padding.

    ``x`` is [C, H, W], or channel-major [C, batch, H, W] for a stack of
    patches (this layout turns the whole stack into one 2-D matrix product
    with no transposes).  ``kernel`` is [F, C, 3, 3]; the output is
    [F, H, W] or [F, batch, H, W].
    """
    x = as_tensor(x)
    if x.data.ndim == 3:
        data, squeeze = x.data[:, None], True
    elif x.data.ndim == 4:
        data, squeeze = x.data, False
    else:
        raise ValueError(f"conv2d: expected [C, H, W] or [C, batch, H, W], got {x.shape}")
    c, n, h, w = data.shape
    if kernel.data.ndim != 4 or kernel.shape[2:] != (3, 3):
        raise ValueError(f"conv2d: kernel must be [F, C, 3, 3], got {kernel.shape}")
    f = kernel.shape[0]
    if kernel.shape[1] != c:
        raise ValueError(f"conv2d: input has {c} channels, kernel expects {kernel.shape[1]}")
    if bias.data.shape != (f,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({f},)")

    padded = np.pad(data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    # row c*9 + k of cols pairs with column c*9 + k of kernel.reshape(F, C*9)
    cols = np.stack([padded[:, :, i:i + h, j:j + w] for i, j in _OFFSETS], axis=1)
    cols = cols.reshape(c * 9, n * h * w)
    kmat = kernel.data.reshape(f, c * 9)
    out = kmat @ cols
    out += bias.data[:, None]
    out = out.reshape(f, n, h, w)

    def backward(g):
        g2 = g.reshape(f, n * h * w)
        kernel._accumulate((g2 @ cols.T).reshape(kernel.shape))
        bias._accumulate(g2.sum(axis=1))
        if not x.requires_grad:
            return
        dcols = (kmat.T @ g2).reshape(c, 9, n, h, w)
        dpad = np.zeros_like(padded)
        for k, (i, j) in enumerate(_OFFSETS):
            dpad[:, :, i:i + h, j:j + w] += dcols[:, k]
        dx = dpad[:, :, 1:-1, 1:-1]
        x._accumulate(dx[:, 0] if squeeze else dx)

    return Tensor(out[:, 0] if squeeze else out, (x, kernel, bias), backward)


def maxpool2(x) -> Tensor:
    """2x2 max-pooling over the last two axes.

    The gradient of each window goes to its first maximal cell in row-major
    order (top-left, top-right, bottom-left, bottom-right).
    """
    x = as_tensor(x)
    if x.data.ndim < 2:
        raise ValueError(f"maxpool2: need at least 2 axes, got shape {x.shape}")
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2: spatial size {h}x{w} must be even")
    d = x.data
    quads = [d[..., 0::2, 0::2], d[..., 0::2, 1::2], d[..., 1::2, 0::2], d[..., 1::2, 1::2]]
    out = np.maximum(np.maximum(quads[0], quads[1]), np.maximum(quads[2], quads[3]))
    masks = []
    taken = np.zeros(out.shape, dtype=bool)
    for q in quads:
        m = (q == out) & ~taken
        taken |= m
        masks.append(m)

    def backward(g):
        dx = np.zeros_like(d)
        dx[..., 0::2, 0::2] = g * masks[0]
        dx[..., 0::2, 1::2] = g * masks[1]
        dx[..., 1::2, 0::2] = g * masks[2]
        dx[..., 1::2, 1::2] = g * masks[3]
        x._accumulate(dx)

    return Tensor(out, (x,), backward)


# gradient checking ---------------------------------------------------------

@dataclass
class GradCheckReport:
    step: float
    tolerance: float
    max_rel_error: dict[str, float] = field(default_factory=dict)
    n_checked: dict[str, int] = field(default_factory=dict)

    @property
    def failures(self) -> dict[str, float]:
        return {k: v for k, v in self.max_rel_error.items() if v > self.tolerance}

    @property
    def passed(self) -> bool:
        return not self.failures

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    def lines(self) -> list[str]:
        out = []
        for name, err in self.max_rel_error.items():
            flag = "FAIL" if err > self.tolerance else "ok"
            out.append(f"{name:<24} n={self.n_checked[name]:<6d} max_rel_err={err:.3e}  {flag}")
        return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(fn: Callable[[], Tensor], params: Iterable[Tensor], step: float = 1e-6,
               tolerance: float = 1e-5, max_entries: int | None = None,
               rng: np.random.Generator | None = None, floor: float = 1e-8) -> GradCheckReport:
    """Compare reverse-mode gradients with central finite differences.

    ``fn`` re-evaluates the scalar loss from the current values of ``params``.
    With ``max_entries`` set, a random subset of each parameter's entries is
    probed (large layers would otherwise need millions of evaluations).
    ``floor`` bounds the relative-error denominator from below; central
    differences cannot resolve gradients much smaller than
    ``eps * |f| / step`` anyway.
    """
    params = list(params)
    out = fn()
    if out.data.size != 1:
        raise ValueError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    for p in params:
        p.grad = None if not isinstance(p, Parameter) else np.zeros_like(p.data)
    out.backward()
    analytic = {id(p): (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for p in params}

    rng = rng or np.random.default_rng(0)
    report = GradCheckReport(step=step, tolerance=tolerance)
    for k, p in enumerate(params):
        name = p.name or f"param{k}"
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        num = np.empty(idx.size)
        for t, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = float(fn().data)
            flat[i] = orig - step
            f_minus = float(fn().data)
            flat[i] = orig
            num[t] = (f_plus - f_minus) / (2.0 * step)
        ana = analytic[id(p)].reshape(-1)[idx]
        err = relative_error(ana, num, floor)
        report.max_rel_error[name] = float(err.max()) if err.size else 0.0
        report.n_checked[name] = int(idx.size)
    return report
