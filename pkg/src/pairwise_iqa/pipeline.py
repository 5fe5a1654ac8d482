"""End-to-end workflows shared by the command line and the acceptance suite:
the synthetic BT-recovery study and the desk-scale learning experiment."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .bt import (BTFitReport, bt_probability, fill_missing_probabilities, validate_bt_fit)
from .dataset import (DesignConfig, ImageBank, build_triplets, oracle_scores, render_plan)
from .design import (SEED_EVAL, SEED_NET_INIT, SEED_RESPONSES, SEED_SYNTHETIC, SEED_TRAINING,
                     ComparisonPlan, ResponseRecord, build_test_plan, build_training_plan,
                     derive_seed, simulate_responses, sparse_pair_selection, sparsify_plan)
from .distortions import oracle_score
from .images import to_unit
from .metrics import EvalReport, baseline_mae, baseline_rmse, evaluate_model
from .net import NetConfig, ErrorNet, sample_locations
from .train import TrainConfig, TrainingLog, train

# BT-recovery study -----------------------------------------------------------

RECOVERY_SETTINGS = {"a": (None, 100), "b": (10, 100), "c": (10, 40)}


@dataclass
class RecoveryPanel:
    setting: str
    k: int | None
    n_responses: int
    fit: BTFitReport
    gt: np.ndarray
    estimated: np.ndarray
    heldout_gt: np.ndarray
    heldout_est: np.ndarray

    def heldout_ber(self, margin: float = 0.15) -> tuple[float, int]:
        """Disagreement of binarized estimates with the true majority on
        unqueried pairs whose true probability is at least ``margin`` from 1/2."""
        sel = np.abs(self.heldout_gt - 0.5) > margin
        n = int(sel.sum())
        if n == 0:
            return 0.0, 0
        wrong = (self.heldout_est[sel] > 0.5) != (self.heldout_gt[sel] > 0.5)
        return float(wrong.mean()), n

    def to_dict(self) -> dict:
        ber, n = self.heldout_ber()
        return {"setting": self.setting, "k": self.k, "n_responses": self.n_responses,
                "fit": self.fit.to_dict(), "n_pairs": int(self.gt.size),
                "heldout_pairs": int(self.heldout_gt.size),
                "heldout_ber_margin_0.15": ber, "heldout_confident_pairs": n}


def synthetic_counts(true_scores: np.ndarray, pairs, n: int, rng: np.random.Generator) -> np.ndarray:
    m = len(true_scores)
    c = np.zeros((m, m), dtype=np.int64)
    for i, j in pairs:
        k = int(rng.binomial(n, bt_probability(true_scores[i], true_scores[j])))
        c[i, j] += k
        c[j, i] += n - k
    return c


def bt_recovery(seed: int = 0, n_groups: int = 6, n_items: int = 15,
                score_range: tuple[float, float] = (0.0, 3.0),
                settings: dict = RECOVERY_SETTINGS) -> list[RecoveryPanel]:
    """Simulate groups with known scores, query them under each setting
    (sparse degree k or exhaustive, responses per pair), fit BT and compare
    every estimated pair probability against the true one."""
    rng = np.random.default_rng(derive_seed(seed, SEED_SYNTHETIC, 0))
    truth = [rng.uniform(*score_range, size=n_items) for _ in range(n_groups)]
    iu = np.triu_indices(n_items, 1)
    panels = []
    for si, (name, (k, n)) in enumerate(sorted(settings.items())):
        gts, ests, hg, he = [], [], [], []
        for gi, s in enumerate(truth):
            if k is None or k >= n_items - 1:
                pairs = list(zip(*map(list, iu)))
            else:
                pairs = sparse_pair_selection(n_items, k, derive_seed(seed, SEED_SYNTHETIC, 1, gi))
            vrng = np.random.default_rng(derive_seed(seed, SEED_RESPONSES, 1000 + si, gi))
            filled = fill_missing_probabilities(synthetic_counts(s, pairs, n, vrng))
            p_true = bt_probability(s[:, None], s[None, :])
            gts.append(p_true[iu])
            ests.append(filled.estimated[iu])
            held = ~filled.measured[iu]
            hg.append(p_true[iu][held])
            he.append(filled.estimated[iu][held])
        gt, est = np.concatenate(gts), np.concatenate(ests)
        panels.append(RecoveryPanel(name, k, n, validate_bt_fit(gt, est), gt, est,
                                    np.concatenate(hg), np.concatenate(he)))
    return panels


def recovery_report(panels: list[RecoveryPanel]) -> str:
    return json.dumps([p.to_dict() for p in panels], indent=2, sort_keys=True) + "\n"


# desk-scale learning experiment ---------------------------------------------

@dataclass
class DeskData:
    train_full: ComparisonPlan
    train_plan: ComparisonPlan  # sparse, what observers actually saw
    test_plan: ComparisonPlan
    train_bank: ImageBank
    test_bank: ImageBank
    train_scores: dict[str, float]
    test_scores: dict[str, float]
    train_responses: list[ResponseRecord]
    test_responses: list[ResponseRecord]


def make_plans(design: DesignConfig, seed: int) -> tuple[ComparisonPlan, ComparisonPlan, ComparisonPlan]:
    full = build_training_plan(design.n_train_refs, seed, design.train_families,
                               design.strength_levels, design.responses_per_pair)
    sparse = sparsify_plan(full, design.sparse_k) if design.sparse_k else full
    test = build_test_plan(design.n_test_refs, seed, design.test_families,
                           design.strength_levels, design.responses_per_pair)
    return full, sparse, test


def make_desk_data(design: DesignConfig, seed: int = 0) -> DeskData:
    full, sparse, test = make_plans(design, seed)
    tb = render_plan(sparse, design.image_size, design.channels)
    eb = render_plan(test, design.image_size, design.channels)
    ts = oracle_scores(sparse, tb, design.score_scale)
    es = oracle_scores(test, eb, design.score_scale)
    n = design.responses_per_pair
    tr = simulate_responses(sparse, ts, n, derive_seed(seed, SEED_RESPONSES, 0))
    er = simulate_responses(test, es, n, derive_seed(seed, SEED_RESPONSES, 1))
    return DeskData(full, sparse, test, tb, eb, ts, es, tr, er)


def net_scorer(net: ErrorNet, n_patches: int, seed: int = 0) -> Callable[[np.ndarray, np.ndarray], float]:
    """Scorer using one fixed set of patch locations for every image of a
    given size, processed in chunks to bound memory."""
    cache: dict[tuple, np.ndarray] = {}

    def score(dist: np.ndarray, ref: np.ndarray) -> float:
        d, r = to_unit(dist), to_unit(ref)
        key = r.shape[1:]
        if key not in cache:
            cache[key] = sample_locations(key, net.config.patch_size, n_patches,
                                          np.random.default_rng(derive_seed(seed, SEED_EVAL, 0)))
        return net.score_patches(d, r, cache[key])

    return score


BASELINES: dict[str, Callable[[np.ndarray, np.ndarray], float]] = {
    "mae": baseline_mae,
    "rmse": baseline_rmse,
    "oracle": oracle_score,
}


# Settings for the desk-scale run: a larger step and fewer patches than the
# defaults converge within the time budget on a single core.
DESK_TRAINING = TrainConfig(iterations=1500, batch_size=4, patches_per_image=9, step_size=1e-3)
DESK_EVAL_PATCHES = 64


@dataclass
class DeskResult:
    net: ErrorNet
    log: TrainingLog
    reports: dict[str, EvalReport] = field(default_factory=dict)

    def report_json(self) -> str:
        return json.dumps({k: v.to_dict() for k, v in sorted(self.reports.items())},
                          indent=2, sort_keys=True) + "\n"


def desk_experiment(design: DesignConfig, train_cfg: TrainConfig, seed: int = 0,
                    net_cfg: NetConfig | None = None, eval_patches: int = DESK_EVAL_PATCHES,
                    baselines: tuple[str, ...] = ("mae",), data: DeskData | None = None) -> DeskResult:
    """Design, label, train and evaluate; returns the trained net and one
    report per scorer (``net`` plus each requested baseline)."""
    data = data or make_desk_data(design, seed)
    triplets = build_triplets(data.train_plan, data.train_bank, data.train_responses)
    net = ErrorNet(net_cfg, seed=derive_seed(seed, SEED_NET_INIT))
    cfg = TrainConfig(**{**train_cfg.__dict__, "seed": derive_seed(seed, SEED_TRAINING)})
    net, log = train(triplets, cfg, net)
    reports = {"net": evaluate_model(net_scorer(net, eval_patches, seed), data.test_plan,
                                     data.test_responses, data.test_bank)}
    for name in baselines:
        reports[name] = evaluate_model(BASELINES[name], data.test_plan, data.test_responses,
                                       data.test_bank)
    return DeskResult(net, log, reports)
