"""Correlation metrics, binary error rate and pixel baselines for
evaluating an error estimator against pairwise ground truth."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import least_squares
from scipy.stats import rankdata

from .bt import DEFAULT_RIDGE, mle_scores
from .design import ComparisonPlan, ResponseRecord, group_counts, records_by_group

CONFIDENT_BAND = (0.35, 0.65)


class UndefinedMetricError(ValueError):
    """A correlation whose inputs have zero variance."""


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    x = x - x.mean()
    y = y - y.mean()
    sx, sy = float(np.sqrt(x @ x)), float(np.sqrt(y @ y))
    if sx == 0.0 or sy == 0.0:
        raise UndefinedMetricError("zero variance")
    return float(np.clip((x @ y) / (sx * sy), -1.0, 1.0))


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=float).ravel()
    gt = np.asarray(gt, dtype=float).ravel()
    if pred.shape != gt.shape:
        raise ValueError(f"length mismatch: {pred.size} predictions, {gt.size} ground truth")
    if pred.size < 3:
        raise ValueError("need at least 3 values")
    return pred, gt


def logistic5(x, b1, b2, b3, b4, b5):
    """b1 * (1/2 - 1/(1 + exp(b2 (x - b3)))) + b4 x + b5"""
    return b1 * (0.5 - 1.0 / (1.0 + np.exp(np.clip(b2 * (x - b3), -500, 500)))) + b4 * x + b5


def fit_logistic5(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares 5-parameter logistic map from standardized predictions
    to ground truth.  Returns (params, mapped predictions).

    Predictions are standardized first so any increasing affine change of
    them gives the same fit.  Start point: amplitude = range of gt, unit
    slope, centre 0, no linear term, offset = mean of gt; refined with
    Levenberg-Marquardt.
    """
    pred, gt = _pair(pred, gt)
    sd = pred.std()
    if sd == 0:
        raise UndefinedMetricError("predictions have zero variance")
    z = (pred - pred.mean()) / sd
    x0 = np.array([np.ptp(gt) or 1.0, 1.0, 0.0, 0.0, gt.mean()])
    res = least_squares(lambda b: logistic5(z, *b) - gt, x0, method="lm", max_nfev=5000)
    return res.x, logistic5(z, *res.x)


def plcc(pred, gt, fit: bool = False) -> float:
    pred, gt = _pair(pred, gt)
    if fit:
        _, pred = fit_logistic5(pred, gt)
    return _pearson(pred, gt)


def srcc(pred, gt) -> float:
    """Spearman correlation with average ranks for ties."""
    pred, gt = _pair(pred, gt)
    return _pearson(rankdata(pred), rankdata(gt))


@dataclass(frozen=True)
class EvalPair:
    id_a: str
    id_b: str
    gt_label: float  # fraction preferring A
    pred_a: float  # predicted error of A
    pred_b: float

    def __post_init__(self):
        if not 0.0 <= self.gt_label <= 1.0:
            raise ValueError(f"gt_label {self.gt_label} outside [0, 1]")


@dataclass(frozen=True)
class PairAgreement:
    """Counts behind KRCC and BER.  Predicted ties score half a match."""

    n_pairs: int
    n_correct: int
    n_wrong: int
    n_tied: int
    n_excluded: int

    @property
    def ber(self) -> float:
        return (self.n_wrong + 0.5 * self.n_tied) / self.n_pairs

    @property
    def krcc(self) -> float:
        return (self.n_correct - self.n_wrong) / self.n_pairs


def pair_agreement(pairs: Sequence[EvalPair],
                   range_filter: tuple[float, float] | None = None) -> PairAgreement:
    """Tally whether sign(pred_b - pred_a) matches sign(gt - 1/2).

    ``range_filter=(lo, hi)`` drops pairs with lo <= gt <= hi.  Pairs whose
    label is exactly 1/2 are always dropped.
    """
    correct = wrong = tied = excluded = 0
    for p in pairs:
        g = p.gt_label
        if g == 0.5 or (range_filter and range_filter[0] <= g <= range_filter[1]):
            excluded += 1
            continue
        d = np.sign(p.pred_b - p.pred_a)
        if d == 0:
            tied += 1
        elif d == np.sign(g - 0.5):
            correct += 1
        else:
            wrong += 1
    n = correct + wrong + tied
    if n == 0:
        raise ValueError("no pairs left after filtering")
    return PairAgreement(n, correct, wrong, tied, excluded)


def krcc(pairs: Sequence[EvalPair], range_filter: tuple[float, float] | None = None) -> float:
    return pair_agreement(pairs, range_filter).krcc


def ber(pairs: Sequence[EvalPair], range_filter: tuple[float, float] | None = None) -> float:
    return pair_agreement(pairs, range_filter).ber


def _same_shape(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def baseline_mae(dist_image, ref_image) -> float:
    """Mean absolute pixel difference on the 0-255 scale."""
    a, b = _same_shape(dist_image, ref_image)
    return float(np.abs(a - b).mean())


def baseline_rmse(dist_image, ref_image) -> float:
    a, b = _same_shape(dist_image, ref_image)
    return float(np.sqrt(((a - b) ** 2).mean()))


# full evaluation -------------------------------------------------------------

Scorer = Callable[[np.ndarray, np.ndarray], float]


@dataclass
class EvalReport:
    PLCC: float
    SRCC: float
    KRCC_full: float
    KRCC_confident: float
    BER: float
    BER_confident: float
    n_groups: int
    n_pairs: int
    n_confident: int
    flags: list[str] = field(default_factory=list)
    per_group: list[dict] = field(default_factory=list)
    note: str = "PLCC and SRCC computed within each group, then averaged"

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def table(self) -> str:
        rows = [("PLCC", self.PLCC), ("SRCC", self.SRCC), ("KRCC_full", self.KRCC_full),
                ("KRCC_confident", self.KRCC_confident), ("BER", self.BER),
                ("BER_confident", self.BER_confident)]
        lines = [f"{'metric':<16}{'value':>10}"]
        lines += [f"{k:<16}{v:>10.4f}" for k, v in rows]
        lines.append(f"{'groups':<16}{self.n_groups:>10d}")
        lines.append(f"{'pairs':<16}{self.n_pairs:>10d}")
        lines.append(f"{'confident pairs':<16}{self.n_confident:>10d}")
        if self.flags:
            lines.append("flags: " + ", ".join(self.flags))
        return "\n".join(lines) + "\n"


class IncompleteResponsesError(ValueError):
    pass


def _safe(metric, flags: list[str], name: str) -> float:
    try:
        return metric()
    except UndefinedMetricError:
        flag = f"{name}_undefined"
        if flag not in flags:
            flags.append(flag)
        return 0.0


def ground_truth(plan: ComparisonPlan, responses: Sequence[ResponseRecord],
                 ridge: float = DEFAULT_RIDGE):
    """Per group: (counts, ML scores).  Every pair must have responses."""
    out = []
    for gi, (g, recs) in enumerate(zip(plan.groups, records_by_group(plan, responses))):
        c = group_counts(g, recs)
        tot = c + c.T
        missing = [(i, j) for i, j in g.all_pairs() if tot[i, j] == 0]
        if missing:
            i, j = missing[0]
            raise IncompleteResponsesError(
                f"group {gi} ({g.reference_id}): {len(missing)} pairs without responses, "
                f"e.g. {g.items[i].id} vs {g.items[j].id}")
        out.append((c, mle_scores(c, ridge=ridge).scores))
    return out


def evaluate_predictions(plan: ComparisonPlan, responses: Sequence[ResponseRecord],
                         predictions: dict[str, float], ridge: float = DEFAULT_RIDGE) -> EvalReport:
    """Score a table of predicted errors (item id -> error) against the
    responses of an exhaustively compared test plan."""
    flags: list[str] = []
    pairs: list[EvalPair] = []
    per_group = []
    pl, sr = [], []
    for gi, (g, (c, gt)) in enumerate(zip(plan.groups, ground_truth(plan, responses, ridge))):
        pred = np.array([predictions[it.id] for it in g.items])
        p = _safe(lambda: plcc(pred, gt, fit=True), flags, "PLCC")
        s = _safe(lambda: srcc(pred, gt), flags, "SRCC")
        pl.append(p)
        sr.append(s)
        per_group.append({"group": gi, "reference": g.reference_id, "PLCC": p, "SRCC": s})
        for i, j in g.all_pairs():
            pairs.append(EvalPair(g.items[i].id, g.items[j].id,
                                  float(c[i, j] / (c[i, j] + c[j, i])), float(pred[i]), float(pred[j])))
    full = pair_agreement(pairs)
    conf = pair_agreement(pairs, CONFIDENT_BAND)
    return EvalReport(
        PLCC=float(np.mean(pl)), SRCC=float(np.mean(sr)),
        KRCC_full=full.krcc, KRCC_confident=conf.krcc,
        BER=full.ber, BER_confident=conf.ber,
        n_groups=len(plan.groups), n_pairs=full.n_pairs, n_confident=conf.n_pairs,
        flags=flags, per_group=per_group,
    )


def evaluate_model(scorer: Scorer, plan: ComparisonPlan, responses: Sequence[ResponseRecord],
                   bank, ridge: float = DEFAULT_RIDGE) -> EvalReport:
    """``scorer(distorted_uint8, reference_uint8) -> error``; ``bank`` holds
    the images of ``plan``."""
    preds = {it.id: float(scorer(bank.distorted[it.id], bank.references[g.reference_id]))
             for g, it in plan.items()}
    return evaluate_predictions(plan, responses, preds, ridge)
