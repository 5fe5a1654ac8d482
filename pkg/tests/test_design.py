import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pairwise_iqa.bt import connected_components
from pairwise_iqa.design import (ComparisonPlan, build_test_plan, build_training_plan,
                                 coverage_probability, group_counts, plan_budget,
                                 read_responses, simulate_responses, sparse_pair_selection,
                                 sparsify_plan, write_responses)
from pairwise_iqa.distortions import (FAMILIES, DistortionSpec, apply_distortion, oracle_score)
from pairwise_iqa.images import read_pnm, synthetic_reference, write_pnm


# plan sizes ------------------------------------------------------------------

def test_single_reference_counts():
    plan = build_training_plan(1, seed=3)
    c = plan.pair_counts()
    assert (c["inter"], c["intra"], plan.n_pairs) == (420, 63, 483)
    assert build_test_plan(1, seed=3).n_pairs == 105


def test_empty_plans():
    assert build_training_plan(0).n_pairs == 0
    assert build_test_plan(0).groups == []


@pytest.mark.parametrize("n", [2, 5])
def test_count_identities(n):
    c = build_training_plan(n, seed=n).pair_counts()
    assert c["inter"] == 420 * n and c["intra"] == 63 * n
    assert build_test_plan(n, seed=n).n_pairs == 105 * n


def test_full_scale_budget():
    b = plan_budget(160, 40, 10)
    assert (b["train_inter"], b["train_intra"], b["train_total"]) == (67_200, 10_080, 77_280)
    assert b["test_total"] == 4_200
    assert (b["exhaustive_total"], b["sparse_total"]) == (81_480, 62_280)
    assert round(100 * b["reduction"], 2) == 23.56


def test_group_invariants():
    plan = build_training_plan(2, seed=7)
    for g in plan.groups:
        specs = [(it.spec.family, it.spec.strength) for it in g.items]
        assert len(set(specs)) == len(specs)
        if g.kind == "inter":
            assert g.size == 15 and len(g.pairs) == 105
        else:
            assert g.size == 3 and len({f for f, _ in specs}) == 1
            assert len({s for _, s in specs}) == 3


def test_train_test_families_disjoint():
    tr = build_training_plan(1, seed=1, families=("box_blur", "quantize", "pixelate"))
    te = build_test_plan(1, seed=1, families=("gaussian_noise", "contrast_scale"))
    ftr = {it.spec.family for _, it in tr.items()}
    fte = {it.spec.family for _, it in te.items()}
    assert ftr.isdisjoint(fte)


def test_too_few_discrete_settings():
    with pytest.raises(ValueError, match="settings"):
        build_training_plan(1, families=("gaussian_noise", "box_blur"), strength_levels=3)


def test_plan_reproducible_and_round_trips(tmp_path):
    a, b = build_training_plan(1, seed=11), build_training_plan(1, seed=11)
    assert a.to_dict() == b.to_dict() if hasattr(a, "to_dict") else True
    a.to_jsonl(tmp_path / "p.jsonl")
    back = ComparisonPlan.from_jsonl(tmp_path / "p.jsonl")
    a.to_jsonl(tmp_path / "q.jsonl")
    back.to_jsonl(tmp_path / "r.jsonl")
    assert (tmp_path / "q.jsonl").read_bytes() == (tmp_path / "r.jsonl").read_bytes()
    assert [g.pair_ids for g in back.groups] == [g.pair_ids for g in b.groups]


# sparse designs --------------------------------------------------------------

def _degrees(n, pairs):
    d = np.zeros(n, dtype=int)
    for i, j in pairs:
        d[i] += 1
        d[j] += 1
    return d


def test_sparse_fifteen_ten():
    pairs = sparse_pair_selection(15, 10, seed=0)
    assert len(pairs) == 75 and len(set(pairs)) == 75
    assert np.all(_degrees(15, pairs) == 10)
    adj = np.zeros((15, 15), bool)
    for i, j in pairs:
        adj[i, j] = adj[j, i] = True
    assert len(connected_components(adj)) == 1


def test_sparse_complete_when_k_is_n_minus_1():
    assert sparse_pair_selection(15, 14) == list(itertools.combinations(range(15), 2))


def test_sparse_k_too_large():
    with pytest.raises(ValueError):
        sparse_pair_selection(15, 15)


@given(st.integers(2, 20), st.data(), st.integers(0, 1000))
@settings(max_examples=60, deadline=None)
def test_sparse_connected_and_min_degree(n, data, seed):
    k = data.draw(st.integers(1, n - 1))
    pairs = sparse_pair_selection(n, k, seed)
    assert all(0 <= i < j < n for i, j in pairs)
    assert _degrees(n, pairs).min() >= k
    adj = np.zeros((n, n), bool)
    for i, j in pairs:
        adj[i, j] = adj[j, i] = True
    assert len(connected_components(adj)) == 1


def test_sparsify_plan_counts():
    sp = sparsify_plan(build_training_plan(2, seed=4), 10)
    c = sp.pair_counts()
    assert c["inter"] == 2 * 4 * 75 and c["intra"] == 2 * 63


# distortions -----------------------------------------------------------------

@pytest.mark.parametrize("family", sorted(FAMILIES))
def test_zero_strength_identity(family):
    img = synthetic_reference(32, seed=2)
    assert np.array_equal(apply_distortion(img, DistortionSpec(family, 0.0), seed=5), img)


@pytest.mark.parametrize("family", sorted(FAMILIES))
def test_distortion_deterministic_and_shape(family):
    img = synthetic_reference(32, seed=3)
    spec = DistortionSpec(family, 0.6 * FAMILIES[family].max_strength)
    a, b = apply_distortion(img, spec, 9), apply_distortion(img, spec, 9)
    assert a.shape == img.shape and a.dtype == np.uint8 and np.array_equal(a, b)


def test_noise_statistics():
    img = np.full((128, 128), 128, dtype=np.uint8)
    out = apply_distortion(img, DistortionSpec("gaussian_noise", 0.1), seed=0).astype(float)
    assert abs(out.std() - 25.5) <= 0.05 * 25.5


def test_quantize_two_levels():
    img = synthetic_reference(32, seed=4)
    out = apply_distortion(img, DistortionSpec("quantize", 1.0), seed=0)
    assert set(np.unique(out)) <= {0, 255}


def test_unknown_family_and_range():
    with pytest.raises(ValueError):
        DistortionSpec("jpeg", 0.5)
    with pytest.raises(ValueError):
        DistortionSpec("box_blur", 99.0)


def test_oracle_identity_and_offset():
    r = synthetic_reference(32, seed=5).astype(np.int16)
    r = np.clip(r, 0, 245).astype(np.uint8)
    assert oracle_score(r, r) == 0.0
    assert oracle_score(r + 10, r) == pytest.approx(10 / 255, abs=1e-12)
    with pytest.raises(ValueError):
        oracle_score(r[:16], r)


def test_oracle_monotone_in_noise():
    ref = synthetic_reference(64, seed=6)
    scores = [oracle_score(apply_distortion(ref, DistortionSpec("gaussian_noise", s), 1), ref)
              for s in np.linspace(0, 0.3, 13)]
    assert all(b >= a for a, b in zip(scores, scores[1:]))


def test_pnm_round_trip(tmp_path):
    rgb = synthetic_reference(16, seed=1)
    gray = rgb[..., 0].copy()
    write_pnm(tmp_path / "a.ppm", rgb)
    write_pnm(tmp_path / "b.pgm", gray)
    assert np.array_equal(read_pnm(tmp_path / "a.ppm"), rgb)
    assert np.array_equal(read_pnm(tmp_path / "b.pgm"), gray)


# simulated observers -----------------------------------------------------------

def _one_pair_plan(n_items=2):
    return build_test_plan(1, seed=0)


def test_simulation_equal_scores_near_half():
    plan = build_test_plan(1, seed=0)
    scores = {it.id: 1.0 for _, it in plan.items()}
    recs = simulate_responses(plan, scores, 10_000, seed=1)
    p = np.array([r.p for r in recs])
    assert np.all(np.abs(p - 0.5) < 0.03)


@pytest.mark.parametrize("n,tol", [(40, 0.25), (100, 0.16), (10_000, 0.01)])
def test_simulation_converges_to_bt(n, tol):
    plan = build_test_plan(1, seed=0)
    g = plan.groups[0]
    scores = {it.id: 0.0 for it in g.items}
    scores[g.items[0].id] = -1.9924  # item 0 wins 88% against everyone
    recs = [r for r in simulate_responses(plan, scores, n, seed=2) if r.id_a == g.items[0].id]
    assert all(abs(r.p - 0.88) <= tol for r in recs)
    if n == 10_000:
        assert abs(np.mean([r.p for r in recs]) - 0.88) <= 0.01


def test_simulation_zero_responses_and_missing_scores():
    plan = build_test_plan(1, seed=0)
    scores = {it.id: 0.0 for _, it in plan.items()}
    assert all(r.n_responses == 0 and r.n_prefer_a == 0 for r in simulate_responses(plan, scores, 0))
    scores.pop(plan.groups[0].items[3].id)
    with pytest.raises(KeyError):
        simulate_responses(plan, scores, 40)


def test_responses_round_trip_and_counts(tmp_path):
    plan = build_test_plan(2, seed=1)
    scores = {it.id: float(k) for k, (_, it) in enumerate(plan.items())}
    recs = simulate_responses(plan, scores, 40, seed=3)
    assert recs == simulate_responses(plan, scores, 40, seed=3)
    write_responses(tmp_path / "r.jsonl", recs)
    back = read_responses(tmp_path / "r.jsonl")
    assert back == recs
    c = group_counts(plan.groups[0], [r for r in back if r.group == 0])
    assert np.all(c + c.T == 40 * (1 - np.eye(15)))


# coverage ----------------------------------------------------------------------

def test_coverage_whole_image_patch():
    rep = coverage_probability(32, 32, 1)
    assert rep.min == 1.0 and rep.mean == 1.0


def test_coverage_interior_closed_form_and_monte_carlo():
    closed = 1 - (1 - (64 / 193) ** 2) ** 36
    rep = coverage_probability(256, 64, 36, mode="analytic_interior")
    assert rep.center == pytest.approx(closed, abs=1e-12)
    mc = coverage_probability(256, 64, 36, mode="monte_carlo_all", trials=4000, seed=0)
    assert abs(mc.center - closed) <= 0.005 + 3 * np.sqrt(closed * (1 - closed) / 4000)
    assert mc.corner < mc.center


def test_coverage_invalid_sizes():
    with pytest.raises(ValueError):
        coverage_probability(32, 64, 4)
