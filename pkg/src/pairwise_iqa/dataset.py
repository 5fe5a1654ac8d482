"""Materialize comparison plans into images, ground-truth scores and
training triplets."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .bt import DisconnectedGraphError, fill_missing_probabilities
from .design import (DEFAULT_TEST_FAMILIES, DEFAULT_TRAIN_FAMILIES, ComparisonPlan,
                     ResponseRecord, group_counts, records_by_group)
from .distortions import apply_distortion, oracle_score
from .images import read_pnm, synthetic_reference, to_unit, write_pnm


@dataclass
class DesignConfig:
    image_size: int = 64
    channels: int = 3
    n_train_refs: int = 16
    n_test_refs: int = 8
    train_families: tuple[str, ...] = DEFAULT_TRAIN_FAMILIES
    test_families: tuple[str, ...] = DEFAULT_TEST_FAMILIES
    strength_levels: int | None = None
    responses_per_pair: int = 40
    sparse_k: int = 10
    # oracle_score is an RMSE on [0, 1]; this stretches it onto a BT axis
    # where distortions are distinguishable by simulated observers
    score_scale: float = 20.0


@dataclass
class ImageBank:
    references: dict[str, np.ndarray] = field(default_factory=dict)
    distorted: dict[str, np.ndarray] = field(default_factory=dict)

    def write(self, directory: str | Path) -> list[Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        ext = lambda img: ".pgm" if img.ndim == 2 else ".ppm"  # noqa: E731
        paths = []
        for name, img in [*self.references.items(), *self.distorted.items()]:
            p = directory / f"{name}{ext(img)}"
            write_pnm(p, img)
            paths.append(p)
        return paths

    @classmethod
    def read(cls, directory: str | Path, plan: ComparisonPlan) -> "ImageBank":
        directory = Path(directory)

        def load(name: str) -> np.ndarray:
            for ext in (".ppm", ".pgm"):
                if (directory / f"{name}{ext}").exists():
                    return read_pnm(directory / f"{name}{ext}")
            raise FileNotFoundError(f"no image for {name} in {directory}")

        bank = cls()
        for ref_id in plan.references:
            bank.references[ref_id] = load(ref_id)
        for _, it in plan.items():
            bank.distorted[it.id] = load(it.id)
        return bank


def render_plan(plan: ComparisonPlan, image_size: int = 64, channels: int = 3) -> ImageBank:
    bank = ImageBank()
    for ref_id, seed in plan.references.items():
        bank.references[ref_id] = synthetic_reference(image_size, seed, channels)
    for g, it in plan.items():
        bank.distorted[it.id] = apply_distortion(bank.references[g.reference_id], it.spec, it.seed)
    return bank


def oracle_scores(plan: ComparisonPlan, bank: ImageBank, scale: float = 1.0) -> dict[str, float]:
    return {it.id: scale * oracle_score(bank.distorted[it.id], bank.references[g.reference_id])
            for g, it in plan.items()}


@dataclass
class TrainingTriplet:
    """Images as float [C, H, W] in [0, 1]; ``label`` = P(A preferred over B)."""

    image_a: np.ndarray
    image_b: np.ndarray
    image_ref: np.ndarray
    label: float
    measured: bool = True
    kind: str = ""

    def __post_init__(self):
        if not self.image_a.shape == self.image_b.shape == self.image_ref.shape:
            raise ValueError("triplet images must share dimensions")
        if not 0.0 <= self.label <= 1.0:
            raise ValueError(f"label {self.label} outside [0, 1]")

    def swapped(self) -> "TrainingTriplet":
        return TrainingTriplet(self.image_b, self.image_a, self.image_ref, 1.0 - self.label,
                               self.measured, self.kind)


class MissingResponsesError(ValueError):
    pass


def group_labels(plan: ComparisonPlan, records: Sequence[ResponseRecord], ridge: float = 1e-3):
    """Per group: (FilledProbabilities, counts).  Groups with every pair
    queried still go through the fit so estimates exist for every pair."""
    out = []
    for gi, (g, recs) in enumerate(zip(plan.groups, records_by_group(plan, records))):
        if not recs:
            raise MissingResponsesError(f"group {gi} ({g.reference_id}) has no responses")
        c = group_counts(g, recs)
        try:
            out.append((fill_missing_probabilities(c, ridge=ridge), c))
        except DisconnectedGraphError as exc:
            raise DisconnectedGraphError(exc.components, f"group {gi} ({g.reference_id})") from exc
    return out


def build_triplets(plan: ComparisonPlan, bank: ImageBank, records: Sequence[ResponseRecord],
                   ridge: float = 1e-3) -> list[TrainingTriplet]:
    """Every pair of every group, labelled with the measured vote fraction
    where it was queried and the ML estimate where it was not."""
    units = {k: to_unit(v) for k, v in bank.references.items()}
    units.update({k: to_unit(v) for k, v in bank.distorted.items()})
    triplets = []
    for g, (filled, _) in zip(plan.groups, group_labels(plan, records, ridge)):
        labels = filled.labels
        ref = units[g.reference_id]
        for i, j in g.all_pairs():
            triplets.append(TrainingTriplet(units[g.items[i].id], units[g.items[j].id], ref,
                                            float(labels[i, j]), bool(filled.measured[i, j]), g.kind))
    return triplets
