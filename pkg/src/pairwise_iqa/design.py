"""Comparison-group construction, sparse pair designs and simulated observers.

Training references get 4 inter-type groups of 15 distorted images and 21
intra-type groups of 3 (one family, three strengths); test references get
one group of 15.  Observers are simulated as exact Bradley-Terry voters on
a known score axis.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .bt import bt_probability
from .distortions import FAMILIES, DistortionSpec

INTER_GROUPS = 4
INTER_SIZE = 15
INTRA_GROUPS = 21
INTRA_SIZE = 3
TEST_SIZE = 15

DEFAULT_TRAIN_FAMILIES = ("box_blur", "quantize", "pixelate")
DEFAULT_TEST_FAMILIES = ("gaussian_noise", "contrast_scale")

# seed-derivation component codes
SEED_REFERENCE = 1
SEED_PLAN = 2
SEED_DISTORTION = 3
SEED_RESPONSES = 4
SEED_SPARSE = 5
SEED_NET_INIT = 6
SEED_TRAINING = 7
SEED_EVAL = 8
SEED_SYNTHETIC = 9


def derive_seed(root: int, *keys: int) -> int:
    """Stable child seed for (root, component, index, ...)."""
    return int(np.random.SeedSequence([int(root), *map(int, keys)]).generate_state(1)[0])


@dataclass(frozen=True)
class Item:
    id: str
    spec: DistortionSpec
    seed: int

    def to_dict(self) -> dict:
        return {"id": self.id, **self.spec.to_dict(), "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "Item":
        return cls(d["id"], DistortionSpec(d["family"], float(d["strength"])), int(d["seed"]))


@dataclass
class ComparisonGroup:
    kind: str  # "inter" or "intra"
    reference_id: str
    items: list[Item]
    pairs: list[tuple[int, int]]  # queried pairs, as indices into items

    def __post_init__(self):
        if self.kind not in ("inter", "intra"):
            raise ValueError(f"group kind must be inter or intra, got {self.kind!r}")
        n = len(self.items)
        for i, j in self.pairs:
            if not (0 <= i < n and 0 <= j < n and i != j):
                raise ValueError(f"pair ({i}, {j}) not within group of {n}")

    @property
    def size(self) -> int:
        return len(self.items)

    @property
    def distorted_ids(self) -> list[str]:
        return [it.id for it in self.items]

    @property
    def pair_ids(self) -> list[tuple[str, str]]:
        return [(self.items[i].id, self.items[j].id) for i, j in self.pairs]

    def all_pairs(self) -> list[tuple[int, int]]:
        return list(itertools.combinations(range(self.size), 2))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "reference_id": self.reference_id,
                "items": [it.to_dict() for it in self.items],
                "pairs": [list(p) for p in self.pairs]}

    @classmethod
    def from_dict(cls, d: dict) -> "ComparisonGroup":
        return cls(d["kind"], d["reference_id"], [Item.from_dict(x) for x in d["items"]],
                   [tuple(p) for p in d["pairs"]])


@dataclass
class ComparisonPlan:
    split: str
    groups: list[ComparisonGroup]
    references: dict[str, int]  # reference id -> synthesis seed
    responses_per_pair: int = 40
    seed: int = 0

    @property
    def n_pairs(self) -> int:
        return sum(len(g.pairs) for g in self.groups)

    def pair_counts(self) -> dict[str, int]:
        out = {"inter": 0, "intra": 0}
        for g in self.groups:
            out[g.kind] += len(g.pairs)
        out["total"] = out["inter"] + out["intra"]
        return out

    def items(self) -> Iterable[tuple[ComparisonGroup, Item]]:
        for g in self.groups:
            for it in g.items:
                yield g, it

    def to_jsonl(self, path: str | Path) -> None:
        head = {"type": "plan", "split": self.split, "seed": self.seed,
                "responses_per_pair": self.responses_per_pair, "references": self.references}
        lines = [json.dumps(head)]
        lines += [json.dumps({"type": "group", "index": k, **g.to_dict()})
                  for k, g in enumerate(self.groups)]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def from_jsonl(cls, path: str | Path) -> "ComparisonPlan":
        recs = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
        if not recs or recs[0].get("type") != "plan":
            raise ValueError(f"{path}: missing plan header line")
        head = recs[0]
        groups = [ComparisonGroup.from_dict(r) for r in recs[1:]]
        return cls(head["split"], groups, dict(head["references"]),
                   int(head["responses_per_pair"]), int(head["seed"]))


def _sample_settings(rng: np.random.Generator, families: Sequence[str], count: int,
                     strength_levels: int | None) -> list[DistortionSpec]:
    if not families:
        raise ValueError("no distortion families configured")
    if strength_levels is not None:
        grid = [(f, k / strength_levels) for f in families for k in range(1, strength_levels + 1)]
        if len(grid) < count:
            raise ValueError(f"{len(grid)} distortion settings available "
                             f"({len(families)} families x {strength_levels} levels), need {count}")
        pick = rng.choice(len(grid), size=count, replace=False)
        chosen = [grid[i] for i in pick]
    else:
        chosen, seen = [], set()
        while len(chosen) < count:
            f = families[rng.integers(len(families))]
            u = round(float(rng.uniform(0.15, 1.0)), 6)
            if (f, u) not in seen:
                seen.add((f, u))
                chosen.append((f, u))
    return [DistortionSpec(f, u * FAMILIES[f].max_strength) for f, u in chosen]


def _make_items(prefix: str, specs: list[DistortionSpec], seed: int, gidx: int) -> list[Item]:
    return [Item(f"{prefix}_i{k:02d}", s, derive_seed(seed, SEED_DISTORTION, gidx, k))
            for k, s in enumerate(specs)]


def build_training_plan(n_refs: int, seed: int = 0,
                        families: Sequence[str] = DEFAULT_TRAIN_FAMILIES,
                        strength_levels: int | None = None,
                        responses_per_pair: int = 40) -> ComparisonPlan:
    """Per reference: 4 inter groups of 15 (all 105 pairs each) and 21 intra
    groups of 3 (all 3 pairs each)."""
    if n_refs < 0:
        raise ValueError("n_refs must be non-negative")
    groups: list[ComparisonGroup] = []
    refs: dict[str, int] = {}
    for r in range(n_refs):
        ref_id = f"train{r:04d}"
        refs[ref_id] = derive_seed(seed, SEED_REFERENCE, 0, r)
        rng = np.random.default_rng(derive_seed(seed, SEED_PLAN, 0, r))
        for g in range(INTER_GROUPS):
            specs = _sample_settings(rng, families, INTER_SIZE, strength_levels)
            items = _make_items(f"{ref_id}_e{g}", specs, seed, len(groups))
            groups.append(ComparisonGroup("inter", ref_id, items,
                                          list(itertools.combinations(range(INTER_SIZE), 2))))
        for g in range(INTRA_GROUPS):
            fam = families[rng.integers(len(families))]
            top = float(rng.uniform(0.45, 1.0))
            specs = [DistortionSpec(fam, top * k / INTRA_SIZE * FAMILIES[fam].max_strength)
                     for k in range(1, INTRA_SIZE + 1)]
            items = _make_items(f"{ref_id}_a{g:02d}", specs, seed, len(groups))
            groups.append(ComparisonGroup("intra", ref_id, items,
                                          list(itertools.combinations(range(INTRA_SIZE), 2))))
    return ComparisonPlan("train", groups, refs, responses_per_pair, seed)


def build_test_plan(n_refs: int, seed: int = 0,
                    families: Sequence[str] = DEFAULT_TEST_FAMILIES,
                    strength_levels: int | None = None,
                    responses_per_pair: int = 40) -> ComparisonPlan:
    """One exhaustively compared group of 15 distorted images per reference."""
    if n_refs < 0:
        raise ValueError("n_refs must be non-negative")
    groups: list[ComparisonGroup] = []
    refs: dict[str, int] = {}
    for r in range(n_refs):
        ref_id = f"test{r:04d}"
        refs[ref_id] = derive_seed(seed, SEED_REFERENCE, 1, r)
        rng = np.random.default_rng(derive_seed(seed, SEED_PLAN, 1, r))
        specs = _sample_settings(rng, families, TEST_SIZE, strength_levels)
        items = _make_items(f"{ref_id}_t", specs, seed, 100_000 + r)
        groups.append(ComparisonGroup("inter", ref_id, items,
                                      list(itertools.combinations(range(TEST_SIZE), 2))))
    return ComparisonPlan("test", groups, refs, responses_per_pair, seed)


# sparse designs --------------------------------------------------------------

def sparse_pair_selection(group: ComparisonGroup | int, k: int, seed: int = 0) -> list[tuple[int, int]]:
    """Connected pair subset in which every item appears in at least ``k`` pairs.

    Built as a circulant graph over a seeded random relabelling of the items:
    offsets 1..k/2 (plus the diameter for odd k when N is even).  For N=15,
    k=10 this is a 10-regular graph with 75 edges.
    """
    n = group if isinstance(group, int) else group.size
    if k > n - 1:
        raise ValueError(f"k={k} exceeds N-1={n - 1}")
    if k < 0:
        raise ValueError("k must be non-negative")
    if n <= 1:
        return []
    if k == n - 1:
        return list(itertools.combinations(range(n), 2))
    offsets = list(range(1, max(1, k // 2) + 1))
    use_diameter = k % 2 == 1 and k > 1
    if use_diameter and n % 2 == 1:
        # odd N has no diameter; the next offset gives degree k+1
        offsets.append(offsets[-1] + 1)
        use_diameter = False
    perm = np.random.default_rng(seed).permutation(n)
    edges = set()
    for i in range(n):
        for d in offsets:
            edges.add(tuple(sorted((int(perm[i]), int(perm[(i + d) % n])))))
        if use_diameter:
            edges.add(tuple(sorted((int(perm[i]), int(perm[(i + n // 2) % n])))))
    return sorted(edges)


def sparsify_plan(plan: ComparisonPlan, k: int = 10, seed: int | None = None) -> ComparisonPlan:
    """Copy of ``plan`` whose inter groups only query a k-design; intra
    groups (3 items) stay exhaustive."""
    seed = plan.seed if seed is None else seed
    groups = []
    for gi, g in enumerate(plan.groups):
        pairs = g.pairs
        if g.kind == "inter" and g.size - 1 > k:
            pairs = sparse_pair_selection(g, k, derive_seed(seed, SEED_SPARSE, gi))
        groups.append(ComparisonGroup(g.kind, g.reference_id, g.items, pairs))
    return ComparisonPlan(plan.split, groups, plan.references, plan.responses_per_pair, plan.seed)


def plan_budget(n_train_refs: int = 160, n_test_refs: int = 40, k: int = 10) -> dict:
    """Pair counts of the exhaustive and sparse designs, by arithmetic."""
    inter_full = INTER_GROUPS * math.comb(INTER_SIZE, 2)
    intra = INTRA_GROUPS * math.comb(INTRA_SIZE, 2)
    test = math.comb(TEST_SIZE, 2)
    inter_sparse = INTER_GROUPS * len(sparse_pair_selection(INTER_SIZE, k))
    full = n_train_refs * (inter_full + intra) + n_test_refs * test
    sparse = n_train_refs * (inter_sparse + intra) + n_test_refs * test
    return {
        "train_inter": n_train_refs * inter_full,
        "train_intra": n_train_refs * intra,
        "train_total": n_train_refs * (inter_full + intra),
        "test_total": n_test_refs * test,
        "exhaustive_total": full,
        "sparse_total": sparse,
        "reduction": 1.0 - sparse / full if full else 0.0,
    }


# simulated observers ---------------------------------------------------------

@dataclass(frozen=True)
class ResponseRecord:
    ref_id: str
    id_a: str
    id_b: str
    n_responses: int
    n_prefer_a: int
    group: int = -1
    kind: str = ""

    def __post_init__(self):
        if not 0 <= self.n_prefer_a <= self.n_responses:
            raise ValueError(f"n_prefer_a={self.n_prefer_a} outside [0, {self.n_responses}]")

    @property
    def p(self) -> float:
        return self.n_prefer_a / self.n_responses if self.n_responses else float("nan")


def simulate_responses(plan: ComparisonPlan, scores: Mapping[str, float], n: int,
                       seed: int = 0) -> list[ResponseRecord]:
    """Binomial(n, bt_probability(s_a, s_b)) votes for every queried pair."""
    missing = [it.id for _, it in plan.items() if it.id not in scores]
    if missing:
        raise KeyError(f"no score for {len(missing)} items, e.g. {missing[:3]}")
    out = []
    for gi, g in enumerate(plan.groups):
        rng = np.random.default_rng(derive_seed(seed, SEED_RESPONSES, gi))
        for i, j in g.pairs:
            a, b = g.items[i].id, g.items[j].id
            p = bt_probability(scores[a], scores[b])
            k = int(rng.binomial(n, p)) if n > 0 else 0
            out.append(ResponseRecord(g.reference_id, a, b, n, k, gi, g.kind))
    return out


def write_responses(path: str | Path, records: Sequence[ResponseRecord]) -> None:
    Path(path).write_text("".join(json.dumps(r.__dict__) + "\n" for r in records))


def read_responses(path: str | Path) -> list[ResponseRecord]:
    return [ResponseRecord(**json.loads(line))
            for line in Path(path).read_text().splitlines() if line.strip()]


def group_counts(group: ComparisonGroup, records: Iterable[ResponseRecord]) -> np.ndarray:
    """Count matrix c[i, j] (i preferred over j) for one group."""
    index = {it.id: k for k, it in enumerate(group.items)}
    c = np.zeros((group.size, group.size), dtype=np.int64)
    for r in records:
        if r.id_a in index and r.id_b in index:
            i, j = index[r.id_a], index[r.id_b]
            c[i, j] += r.n_prefer_a
            c[j, i] += r.n_responses - r.n_prefer_a
    return c


def records_by_group(plan: ComparisonPlan, records: Iterable[ResponseRecord]) -> list[list[ResponseRecord]]:
    owner = {}
    for gi, g in enumerate(plan.groups):
        for it in g.items:
            owner[it.id] = gi
    out: list[list[ResponseRecord]] = [[] for _ in plan.groups]
    for r in records:
        gi = r.group if 0 <= r.group < len(plan.groups) else owner.get(r.id_a, -1)
        if gi < 0:
            raise KeyError(f"response for unknown item {r.id_a}")
        out[gi].append(r)
    return out


# patch coverage ----------------------------------------------------------------

@dataclass
class CoverageReport:
    min: float
    mean: float
    center: float
    corner: float
    grid: np.ndarray | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {"min": self.min, "mean": self.mean, "center": self.center, "corner": self.corner}


def coverage_probability(image_size: int, patch_size: int, n_patches: int,
                         mode: str = "analytic_interior", trials: int = 2000, seed: int = 0,
                         keep_grid: bool = False) -> CoverageReport:
    """Probability that each pixel lies in at least one of ``n_patches``
    patches whose top-left corners are uniform over valid positions."""
    if not 0 < patch_size <= image_size:
        raise ValueError(f"patch size {patch_size} must be in (0, {image_size}]")
    if n_patches < 0:
        raise ValueError("n_patches must be non-negative")
    positions = image_size - patch_size + 1
    if mode == "analytic_interior":
        u = np.arange(image_size)
        hits = np.minimum(u, positions - 1) - np.maximum(0, u - patch_size + 1) + 1
        q = hits / positions
        single = q[:, None] * q[None, :]
        grid = 1.0 - (1.0 - single) ** n_patches
    elif mode == "monte_carlo_all":
        rng = np.random.default_rng(seed)
        covered = np.zeros((image_size, image_size))
        for _ in range(trials):
            mask = np.zeros((image_size, image_size), dtype=bool)
            ys = rng.integers(0, positions, n_patches)
            xs = rng.integers(0, positions, n_patches)
            for y, x in zip(ys, xs):
                mask[y:y + patch_size, x:x + patch_size] = True
            covered += mask
        grid = covered / trials
    else:
        raise ValueError(f"unknown coverage mode {mode!r}")
    c = image_size // 2
    return CoverageReport(float(grid.min()), float(grid.mean()), float(grid[c, c]),
                          float(grid[0, 0]), grid if keep_grid else None)
