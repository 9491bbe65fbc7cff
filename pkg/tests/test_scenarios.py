from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mia_bench.errors import DegenerateSetError, EmptyBatchError, InfeasibleDistributionError, PartitionError, PoolExhaustedError
from mia_bench.mmd import MmdConfig, NormMode, mmd_brute_oracle
from mia_bench.models import ground_truth
from mia_bench.presets import MATRIX_PRESETS, PRESETS
from mia_bench.scenarios import (
    CV2_TOLERANCE,
    CV3_TOLERANCE,
    Bernoulli,
    EvaluationScenario,
    GroupStructure,
    Normal,
    Uniform,
    abstain_count,
    apply_cv4,
    average_differential_distances,
    build_scenario_matrix,
    construct_subset,
    differential_distance,
    differential_distances,
    generate_nonmembers,
    ks_pvalue,
    materialize_scenario,
    measure_cv2,
    read_matrix,
    select_for_cv2,
    split_by_confidence,
    write_matrix,
)

from .helpers import prob_batch

GOLDEN = Path(__file__).parent / "fixtures" / "cifar100_scenarios.csv"


# ---------------------------------------------------------------- matrix


def test_cifar100_matrix_matches_golden_fixture():
    got = build_scenario_matrix(PRESETS["CIFAR100"])
    assert got == read_matrix(GOLDEN)
    assert (got[0].cv1, got[0].cv2, got[0].cv3, got[0].cv4) == ("Normal", 2.893, 0.085, 0.20)
    assert (got[-1].cv1, got[-1].cv2, got[-1].cv3, got[-1].cv4) == ("Bernoulli", 4.325, 0.157, 0.49)


def test_matrix_sizes_and_ids():
    total = 0
    for name in MATRIX_PRESETS:
        m = build_scenario_matrix(PRESETS[name])
        assert len(m) == 84
        assert len({s.scenario_id for s in m}) == 84
        assert {s.cv4 for s in m} <= set(PRESETS[name].cv4_ratios)
        total += len(m)
    assert total == 588


def test_matrix_round_trip(tmp_path):
    m = build_scenario_matrix(PRESETS["Texas100"])
    write_matrix(m, tmp_path / "m.csv")
    assert read_matrix(tmp_path / "m.csv") == m
    assert (tmp_path / "m.csv").read_bytes().splitlines()[0] == b"scenario_id,dataset_id,cv1,cv2,cv3,cv4"


def test_scenario_validation():
    with pytest.raises(ValueError):
        EvaluationScenario("X", "CIFAR10", "Poisson", 1.0, 0.1, 0.2)
    with pytest.raises(ValueError):
        EvaluationScenario("X", "CIFAR10", "Normal", 1.0, 0.1, 0.5)


# ---------------------------------------------------------------- CV1


def test_split_by_confidence_examples():
    out = np.array([[0.9, 0.1], [0.2, 0.8], [0.8, 0.2], [0.3, 0.7]])
    # max-probs 0.9, 0.8, 0.8, 0.7: ties keep index order
    high, low = split_by_confidence(out)
    assert set(high) == {0, 1} and set(low) == {2, 3}
    flat = np.full((6, 3), 1 / 3)
    high, low = split_by_confidence(flat)
    assert list(high) == [0, 1, 2]
    with pytest.raises(PartitionError):
        split_by_confidence(flat[:5])


def test_split_by_confidence_listed_case():
    maxp = np.array([0.9, 0.2, 0.8, 0.3])
    out = np.tile(((1 - maxp) / 9)[:, None], (1, 10))
    out[:, 0] = maxp
    high, low = split_by_confidence(out)
    assert set(high) == {0, 2} and set(low) == {1, 3}


def test_overfit_members_are_confident(overfit_world):
    high, _ = split_by_confidence(overfit_world.target.outputs)
    assert ground_truth(overfit_world.target)[high].mean() >= 0.70


def test_bernoulli_cifar100_threshold():
    assert PRESETS["CIFAR100"].bernoulli_threshold(0.5) == 3.778
    rng = np.random.default_rng(0)
    pool = np.sort(rng.normal(3.778, 0.6, 200))
    picked = construct_subset(pool, Bernoulli(3.778, 0.5), 40, seed=1)
    assert np.mean(pool[picked] > 3.778) == 0.5


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 0.95), st.integers(4, 60))
def test_bernoulli_fraction_property(seed, p, count):
    pool = np.random.default_rng(seed).gamma(4.0, size=200)
    eps = float(np.median(pool))
    picked = construct_subset(pool, Bernoulli(eps, p), count, seed)
    assert picked.size == count == np.unique(picked).size
    assert abs(np.mean(pool[picked] > eps) - p) <= 1 / count


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 5), st.integers(1, 6))
def test_uniform_equal_bins_property(seed, gamma, per):
    pool = np.random.default_rng(seed).uniform(0, 10, 400)
    kind = Uniform(2.0, 8.0, gamma)
    picked = construct_subset(pool, kind, gamma * per, seed)
    counts, _ = np.histogram(pool[picked], bins=np.linspace(2.0, 8.0, gamma + 1))
    assert np.all(counts == per)


def test_uniform_single_bin_is_range_filter():
    pool = np.linspace(0, 1, 101)
    picked = construct_subset(pool, Uniform(0.2, 0.4, 1), 10, seed=3)
    assert np.all((pool[picked] >= 0.2) & (pool[picked] <= 0.4))


def test_normal_selection_passes_ks():
    pool = np.random.default_rng(4).normal(3.0, 1.0, 1000)
    kind = Normal(3.0, 0.25)
    picked = construct_subset(pool, kind, 100, seed=5)
    assert ks_pvalue(pool[picked], kind) > 0.01


def test_construction_infeasible_regions():
    pool = np.linspace(0, 1, 50)
    with pytest.raises(InfeasibleDistributionError) as err:
        construct_subset(pool, Bernoulli(0.9, 0.8), 20, seed=0)
    assert err.value.region == "> 0.9"
    with pytest.raises(InfeasibleDistributionError):
        construct_subset(pool, Uniform(0.0, 0.05, 1), 10, seed=0)
    with pytest.raises(InfeasibleDistributionError):
        construct_subset(pool, Normal(5.0, 0.01), 20, seed=0)
    with pytest.raises(InfeasibleDistributionError):
        construct_subset(pool, Normal(0.5, 0.01), 51, seed=0)


def test_kind_invariants():
    with pytest.raises(ValueError):
        Normal(0, 0)
    with pytest.raises(ValueError):
        Uniform(2, 1)
    with pytest.raises(ValueError):
        Uniform(0, 1, 0)
    with pytest.raises(ValueError):
        Bernoulli(1.0, 1.0)


# ---------------------------------------------------------------- CV2


def _groups(rng, n=80, dim=4, eta=10):
    out = prob_batch(rng, n, dim)
    high, low = split_by_confidence(out)
    return out, GroupStructure(out, high, low, eta, MmdConfig(0.4))


def test_measure_cv2_identical_sides_and_oracle():
    rng = np.random.default_rng(6)
    a = prob_batch(rng, 12, 5)
    cfg = MmdConfig(0.3)
    assert measure_cv2(a, a.copy(), cfg) == pytest.approx(0, abs=1e-9)
    b = prob_batch(rng, 12, 5)
    assert measure_cv2(a, b, cfg) == pytest.approx(mmd_brute_oracle(a, b, cfg), abs=1e-12)
    with pytest.raises(EmptyBatchError):
        measure_cv2(np.empty((0, 5)), b, cfg)


def test_pooled_group_mmd_matches_oracle():
    rng = np.random.default_rng(7)
    out, groups = _groups(rng)
    sel = np.array([0, 2, 3])
    hi, lo = groups.members(sel)
    assert groups.pooled(sel) == pytest.approx(mmd_brute_oracle(out[hi], out[lo], groups.cfg), abs=1e-9)
    for g in range(groups.count):
        hi, lo = groups.members([g])
        assert groups.group_mmds[g] == pytest.approx(mmd_brute_oracle(out[hi], out[lo], groups.cfg), abs=1e-9)


def test_select_for_cv2():
    rng = np.random.default_rng(8)
    _, groups = _groups(rng)
    full = groups.pooled(range(groups.count))
    assert list(select_for_cv2(groups, full, 1e-12)) == list(range(groups.count))
    with pytest.raises(InfeasibleDistributionError):
        select_for_cv2(groups, 100 * full, 0.0)
    picked = select_for_cv2(groups, 0.9 * full, 0.05 * full)
    assert abs(groups.pooled(picked) - 0.9 * full) <= 0.05 * full


def test_cifar10_levels_realizable():
    # every CV1 kind hits every CV2 level of CIFAR10 within tolerance
    from mia_bench.world import build_world

    world = build_world(PRESETS["CIFAR10"], 0, 2024)
    for level in PRESETS["CIFAR10"].cv2_levels:
        for kind in ("Normal", "Uniform", "Bernoulli"):
            s = EvaluationScenario("T", "CIFAR10", kind, level, PRESETS["CIFAR10"].cv3_levels[1], 0.2)
            inst = materialize_scenario(s, world, world.seed("construct"))
            assert abs(inst.realized_cv2 - level) <= 0.05


# ---------------------------------------------------------------- CV3


def test_generate_nonmembers(overfit_world):
    w = overfit_world
    held = generate_nonmembers(w.model, w.pool, "HeldOut", 100, seed=1)
    assert not set(held.source_idx) & set(w.pool.train_idx)
    same = generate_nonmembers(w.model, w.pool, "Transform", 50, seed=1, base_features=w.target.features, noise_scale=0.0)
    base = w.target.features
    rows = [np.flatnonzero((base == f).all(axis=1))[0] for f in same.features]
    np.testing.assert_allclose(same.outputs, w.target.outputs[rows], atol=1e-12)
    moved = generate_nonmembers(w.model, w.pool, "Transform", 200, seed=2, base_features=base)
    members = w.target.outputs[ground_truth(w.target)]
    assert mmd_brute_oracle(moved.outputs[:40], members[:40], MmdConfig(0.5)) > 0
    with pytest.raises(PoolExhaustedError):
        generate_nonmembers(w.model, w.pool, "HeldOut", len(w.pool.reserve_idx) + 1, seed=1)
    with pytest.raises(ValueError):
        generate_nonmembers(w.model, w.pool, "HeldOut", 0, seed=1)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(list(NormMode)))
def test_differential_distance_matches_two_oracle_calls(seed, mode):
    rng = np.random.default_rng(seed)
    t, n = prob_batch(rng, int(rng.integers(2, 9)), 3), prob_batch(rng, int(rng.integers(1, 9)), 3)
    cfg = MmdConfig(float(rng.uniform(0.2, 2.0)), mode)
    i = int(rng.integers(t.shape[0]))
    want = mmd_brute_oracle(np.delete(t, i, 0), np.vstack([n, t[i:i + 1]]), cfg) - mmd_brute_oracle(t, n, cfg)
    assert differential_distance(t, n, i, cfg) == pytest.approx(want, abs=1e-9)
    assert differential_distances(t, n, cfg)[i] == pytest.approx(want, abs=1e-9)


def test_differential_distance_edge_cases():
    rng = np.random.default_rng(12)
    big = prob_batch(rng, 400, 3)
    dup = np.vstack([big, big[:1]])
    assert abs(differential_distance(dup, big, 400, MmdConfig(0.5))) <= 1e-6
    with pytest.raises(DegenerateSetError):
        differential_distance(big[:1], big, 0, MmdConfig(0.5))


def test_average_differential_distances():
    rng = np.random.default_rng(13)
    t, n = prob_batch(rng, 10, 3), prob_batch(rng, 10, 3)
    cfg = MmdConfig(0.5)
    mask = np.zeros(10, bool)
    mask[4] = True
    d = differential_distances(t, n, cfg)
    hi, lo = average_differential_distances(t, n, cfg, mask)
    assert hi == d[4]
    assert lo == pytest.approx(np.delete(d, 4).mean())
    same = np.full((6, 3), 1 / 3)
    assert np.allclose(average_differential_distances(same, same, cfg), 0, atol=1e-9)
    with pytest.raises(EmptyBatchError):
        average_differential_distances(t, n, cfg, np.ones(10, bool))


def test_overfit_high_and_low_differ(overfit_world):
    w = overfit_world
    ref = w.reserve_random.outputs[:200]
    hi, lo = average_differential_distances(w.target.outputs, ref, w.mmd_config, w.high_mask)
    assert hi != lo


# ---------------------------------------------------------------- CV4


def test_apply_cv4_examples():
    assert apply_cv4(np.arange(10.0), 0.0).size == 0
    assert apply_cv4(np.random.default_rng(0).normal(size=800), 0.20).size == 160
    with pytest.raises(ValueError):
        apply_cv4([1.0], 1.0)


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=300), st.floats(0, 0.99), st.floats(-10, 10))
def test_apply_cv4_property(scores, ratio, threshold):
    s = np.array(scores)
    idx = apply_cv4(s, ratio, threshold)
    assert idx.size == abstain_count(ratio, s.size)
    if 0 < idx.size < s.size:
        margin = np.abs(s - threshold)
        kept = np.setdiff1d(np.arange(s.size), idx)
        assert margin[idx].max() <= margin[kept].min()


def test_abstain_count_is_floor():
    for ratio in (0.02, 0.04, 0.10, 0.12, 0.20, 0.40, 0.45, 0.49):
        for n in (1, 99, 100, 400, 777):
            assert abstain_count(ratio, n) == (round(ratio * 100) * n) // 100


# ---------------------------------------------------------------- materialization


def test_materialize_is_deterministic_and_within_tolerance(overfit_world):
    w = overfit_world
    m = build_scenario_matrix(PRESETS["overfit"])
    for s in (m[0], m[40], m[83]):
        a = materialize_scenario(s, w, 17)
        b = materialize_scenario(s, w, 17)
        assert np.array_equal(a.subset_index, b.subset_index)
        assert np.array_equal(a.nonmember_reference.outputs, b.nonmember_reference.outputs)
        assert abs(a.realized_cv2 - s.cv2) <= CV2_TOLERANCE
        assert abs(a.realized_cv3 - s.cv3) <= CV3_TOLERANCE
        truth = ground_truth(a.target_subset)
        assert set(a.nonmember_reference.source_idx).isdisjoint(w.pool.train_idx)
        assert 0 < truth.mean() < 1


def test_realized_cv2_equals_oracle_on_split(overfit_world):
    w = overfit_world
    s = build_scenario_matrix(PRESETS["overfit"])[0]
    inst = materialize_scenario(s, w, 3)
    out = inst.target_subset.outputs
    raw = mmd_brute_oracle(out[inst.high_mask], out[~inst.high_mask], w.mmd_config)
    assert inst.realized_cv2 == pytest.approx(raw * w.units.cv2, abs=1e-9)


def test_materialize_rejects_foreign_world(overfit_world):
    s = build_scenario_matrix(PRESETS["CIFAR10"])[0]
    with pytest.raises(ValueError):
        materialize_scenario(s, overfit_world, 1)
