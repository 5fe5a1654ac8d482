"""Bradley-Terry preference model with a "lower score is preferred" axis.

``bt_probability(s_a, s_b)`` is the probability that A is picked as closer
to the reference, ``1 / (1 + exp(s_a - s_b))``.  Scores are perceptual
errors: the reference sits at 0 and larger means more visibly different.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats

DEFAULT_RIDGE = 1e-3


class DisconnectedGraphError(ValueError):
    """The pairs with data do not link every item to every other item."""

    def __init__(self, components: list[list[int]], where: str = ""):
        self.components = components
        self.where = where
        prefix = f"{where}: " if where else ""
        super().__init__(f"{prefix}comparison graph has {len(components)} components: {components}")


class ConvergenceError(RuntimeError):
    def __init__(self, iterations: int, grad_norm: float):
        self.iterations = iterations
        self.grad_norm = grad_norm
        super().__init__(f"ML estimation did not converge in {iterations} iterations "
                         f"(gradient inf-norm {grad_norm:.3e})")


def _sigmoid(z):
    z = np.asarray(z, dtype=float)
    return np.exp(-np.logaddexp(0.0, -z))


def bt_probability(s_a, s_b):
    """Probability of preferring A over B given perceptual errors ``s_a``, ``s_b``."""
    out = _sigmoid(np.subtract(s_b, s_a))
    return float(out) if out.ndim == 0 else out


def bt_log_odds(p: float) -> float:
    """Score gap ``s_b - s_a`` that yields preference probability ``p``."""
    return math.log(p / (1.0 - p))


@dataclass(frozen=True)
class PreferenceLabel:
    p: float
    n_responses: int

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"preference probability {self.p} outside [0, 1]")


def estimate_preference(votes: Sequence[int]) -> PreferenceLabel:
    """Sample mean of 0/1 votes, where 1 means A was preferred."""
    votes = np.asarray(votes)
    if votes.size == 0:
        raise ValueError("cannot estimate a preference from zero votes")
    if not np.isin(votes, (0, 1)).all():
        raise ValueError("votes must be 0 or 1")
    return PreferenceLabel(p=float(votes.mean()), n_responses=int(votes.size))


# sample size -----------------------------------------------------------------

def normal_coverage(n: int, eta: float) -> float:
    """Worst-case (p = 1/2) normal approximation of P(|p_hat - p| <= eta)."""
    return 2.0 * stats.norm.cdf(eta * math.sqrt(4.0 * n)) - 1.0


def binomial_coverage(n: int, eta: float, p: float = 0.5) -> float:
    """Exact P(|k/n - p| <= eta) for k ~ Binomial(n, p)."""
    k = np.arange(n + 1)
    inside = np.abs(k - n * p) <= eta * n + 1e-9
    return float(stats.binom.pmf(k[inside], n, p).sum())


def min_responses(eta: float, p_target: float) -> int:
    """Smallest n whose worst-case normal coverage reaches ``p_target``."""
    if not 0.0 < eta < 0.5:
        raise ValueError(f"eta must lie in (0, 0.5), got {eta}")
    if not 0.0 < p_target < 1.0:
        raise ValueError(f"p_target must lie in (0, 1), got {p_target}")
    z = stats.norm.ppf((1.0 + p_target) / 2.0)
    n = max(1, math.ceil((z / (2.0 * eta)) ** 2) - 2)
    while normal_coverage(n, eta) < p_target:
        n += 1
    while n > 1 and normal_coverage(n - 1, eta) >= p_target:
        n -= 1
    return n


# count matrices ----------------------------------------------------------------

def validate_counts(counts) -> np.ndarray:
    c = np.asarray(counts)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ValueError(f"count matrix must be square, got shape {c.shape}")
    if (c < 0).any():
        raise ValueError("count matrix has negative entries")
    if np.diag(c).any():
        raise ValueError("count matrix diagonal must be zero")
    return c


def connected_components(adjacency: np.ndarray) -> list[list[int]]:
    n = adjacency.shape[0]
    label = -np.ones(n, dtype=int)
    comps = []
    for start in range(n):
        if label[start] >= 0:
            continue
        stack, members = [start], []
        label[start] = len(comps)
        while stack:
            i = stack.pop()
            members.append(i)
            for j in np.flatnonzero(adjacency[i]):
                if label[j] < 0:
                    label[j] = len(comps)
                    stack.append(j)
        comps.append(sorted(members))
    return comps


@dataclass
class ScoreVector:
    scores: np.ndarray
    gauge_mean_zero: bool = True
    iterations: int = 0
    grad_norm: float = 0.0
    log_likelihood: float = float("nan")

    def probabilities(self) -> np.ndarray:
        """Matrix P[i, j] = probability that item i is preferred over item j."""
        s = self.scores
        p = bt_probability(s[:, None], s[None, :])
        np.fill_diagonal(p, 0.5)
        return p


def _objective(s, c, ridge):
    # c[i, j] wins of i over j, each with likelihood sigma(s_j - s_i)
    diff = s[None, :] - s[:, None]
    ll = -(c * np.logaddexp(0.0, -diff)).sum()
    return ll - ridge * float(s @ s)


def _gradient(s, c, ridge):
    lose = _sigmoid(s[:, None] - s[None, :])  # sigma(s_i - s_j)
    w = c * lose
    return -w.sum(axis=1) + w.sum(axis=0) - 2.0 * ridge * s


def _neg_hessian(s, c, ridge):
    sig = _sigmoid(s[:, None] - s[None, :])
    w = (c + c.T) * sig * (1.0 - sig)
    a = -w
    np.fill_diagonal(a, w.sum(axis=1) - np.diag(w))
    return a + 2.0 * ridge * np.eye(len(s))


def mle_scores(counts, ridge: float = DEFAULT_RIDGE, max_iters: int = 10_000,
               tol: float = 1e-8) -> ScoreVector:
    """Maximum-likelihood BT scores by damped Newton ascent.

    Returns mean-zero scores.  Raises :class:`DisconnectedGraphError` when
    some items are never compared (directly or transitively) to the others,
    and :class:`ConvergenceError` when ``max_iters`` is exhausted.
    """
    c = validate_counts(counts).astype(float)
    if ridge < 0:
        raise ValueError("ridge must be non-negative")
    n = c.shape[0]
    comps = connected_components((c + c.T) > 0)
    if len(comps) > 1:
        raise DisconnectedGraphError(comps)

    s = np.zeros(n)
    if n == 1:
        return ScoreVector(s, iterations=0, grad_norm=0.0, log_likelihood=0.0)
    # the all-ones direction is the gauge; pinning it makes the system regular
    gauge = np.full((n, n), 1.0 / n)
    f = _objective(s, c, ridge)
    g = _gradient(s, c, ridge)
    gnorm = float(np.abs(g).max())
    it = 0
    while gnorm > tol:
        if it >= max_iters:
            raise ConvergenceError(it, gnorm)
        it += 1
        d = np.linalg.solve(_neg_hessian(s, c, ridge) + gauge, g)
        d -= d.mean()
        slope = float(g @ d)
        t = 1.0
        while True:
            s_new = s + t * d
            f_new = _objective(s_new, c, ridge)
            if f_new >= f + 1e-4 * t * slope:
                break
            if t < 1e-10:
                break
            t *= 0.5
        g_new = _gradient(s_new, c, ridge)
        if f_new <= f and float(np.abs(g_new).max()) >= gnorm:
            # no measurable progress left at float precision
            break
        s, f, g = s_new, f_new, g_new
        gnorm = float(np.abs(g).max())
    s = s - s.mean()
    return ScoreVector(s, iterations=it, grad_norm=gnorm, log_likelihood=_objective(s, c, 0.0))


@dataclass
class FilledProbabilities:
    """Complete preference matrix for one comparison group.

    ``estimated`` holds BT probabilities from the fitted scores for every
    pair; ``empirical`` holds measured vote fractions (NaN where a pair was
    never queried) and ``measured`` marks which is which.
    """

    scores: ScoreVector
    estimated: np.ndarray
    empirical: np.ndarray
    measured: np.ndarray
    n_responses: np.ndarray

    @property
    def labels(self) -> np.ndarray:
        """Measured fraction where available, ML estimate elsewhere."""
        return np.where(self.measured, self.empirical, self.estimated)

    def label(self, i: int, j: int) -> PreferenceLabel:
        return PreferenceLabel(float(self.labels[i, j]), int(self.n_responses[i, j]))


def fill_missing_probabilities(counts, ridge: float = DEFAULT_RIDGE, max_iters: int = 10_000,
                               tol: float = 1e-8) -> FilledProbabilities:
    c = validate_counts(counts)
    sv = mle_scores(c, ridge=ridge, max_iters=max_iters, tol=tol)
    n = c + c.T
    measured = n > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        empirical = np.where(measured, c / np.where(measured, n, 1), np.nan)
    return FilledProbabilities(sv, sv.probabilities(), empirical, measured, n)


@dataclass
class BTFitReport:
    slope: float
    intercept: float
    # (bin_lo, bin_hi, count, 25th pct of est, 75th pct of est)
    bins: list[tuple[float, float, int, float, float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "slope": self.slope,
            "intercept": self.intercept,
            "bins": [{"lo": lo, "hi": hi, "n": n, "q25": q25, "q75": q75}
                     for lo, hi, n, q25, q75 in self.bins],
        }


def validate_bt_fit(gt, est, bin_width: float = 0.1) -> BTFitReport:
    """Least-squares line of estimated vs ground-truth probabilities, plus
    quartile bands of the estimates inside each ground-truth bin."""
    gt = np.asarray(gt, dtype=float)
    est = np.asarray(est, dtype=float)
    if gt.shape != est.shape:
        raise ValueError(f"length mismatch: {gt.shape} vs {est.shape}")
    if gt.size < 2:
        raise ValueError("need at least two points for a line fit")
    slope, intercept = np.polyfit(gt, est, 1)
    edges = np.round(np.arange(0.0, 1.0 + bin_width / 2, bin_width), 10)
    bins = []
    for k, (lo, hi) in enumerate(zip(edges[:-1], edges[1:])):
        last = k == len(edges) - 2
        sel = (gt >= lo) & ((gt <= hi) if last else (gt < hi))
        if sel.any():
            q25, q75 = np.percentile(est[sel], [25, 75])
            bins.append((float(lo), float(hi), int(sel.sum()), float(q25), float(q75)))
    return BTFitReport(float(slope), float(intercept), bins)


# serialization ---------------------------------------------------------------

def write_count_matrix(path: str | Path, counts, items: Sequence[str] | None = None) -> None:
    """One JSON header line naming the items, then integer CSV rows."""
    c = validate_counts(counts)
    items = list(items) if items is not None else [str(i) for i in range(c.shape[0])]
    if len(items) != c.shape[0]:
        raise ValueError("item names do not match matrix size")
    buf = io.StringIO()
    buf.write(json.dumps({"items": items}) + "\n")
    csv.writer(buf, lineterminator="\n").writerows(c.astype(int).tolist())
    Path(path).write_text(buf.getvalue())


def read_count_matrix(path: str | Path) -> tuple[np.ndarray, list[str]]:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty count file")
    header = json.loads(lines[0])
    rows = [list(map(int, r)) for r in csv.reader(lines[1:]) if r]
    c = validate_counts(np.array(rows, dtype=np.int64).reshape(len(rows), -1))
    items = header["items"]
    if len(items) != c.shape[0]:
        raise ValueError(f"{path}: header names {len(items)} items, matrix has {c.shape[0]}")
    return c, items
