import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mia_bench.errors import DimensionError, EmptyBatchError, PartitionError
from mia_bench.mmd import (
    MmdConfig,
    NormMode,
    as_prob_vector,
    gaussian_kernel,
    group_mmds,
    median_heuristic,
    mmd,
    mmd_brute_oracle,
)

from .helpers import prob_batch, prob_batches

MODES = list(NormMode)


def test_kernel_identical_inputs_is_one():
    p = np.array([0.2, 0.3, 0.5])
    for sigma in (0.1, 1.0, 7.0):
        for mode in MODES:
            assert gaussian_kernel(p, p, MmdConfig(sigma, mode)) == 1.0


def test_kernel_orthogonal_corners():
    # closed form: ||p - q|| = sqrt(2)
    got = gaussian_kernel([1, 0], [0, 1], MmdConfig(1.0, NormMode.UNSQUARED))
    assert got == pytest.approx(math.exp(-math.sqrt(2) / 2), abs=1e-15)
    assert got == pytest.approx(0.49307, abs=5e-6)
    squared = gaussian_kernel([1, 0], [0, 1], MmdConfig(1.0, NormMode.SQUARED))
    assert squared == pytest.approx(math.exp(-1.0), abs=1e-15)


def test_kernel_symmetric():
    rng = np.random.default_rng(3)
    for _ in range(100):
        dim = int(rng.integers(2, 10))
        p, q = prob_batch(rng, 2, dim)
        cfg = MmdConfig(float(rng.uniform(0.1, 3)), MODES[int(rng.integers(2))])
        assert gaussian_kernel(p, q, cfg) == gaussian_kernel(q, p, cfg)


def test_kernel_dimension_mismatch():
    with pytest.raises(DimensionError):
        gaussian_kernel([0.5, 0.5], [0.2, 0.3, 0.5])


@given(prob_batches(max_size=6, max_dim=5), st.floats(0.05, 5.0), st.sampled_from(MODES))
def test_kernel_range(pair, sigma, mode):
    a, b = pair
    k = gaussian_kernel(a[0], b[0], MmdConfig(sigma, mode))
    assert 0.0 < k <= 1.0
    if k == 1.0:
        assert np.allclose(a[0], b[0], atol=1e-7)


def test_mmd_matches_brute_oracle_on_random_pairs():
    rng = np.random.default_rng(11)
    for i in range(200):
        dim = int(rng.integers(2, 11))
        a = prob_batch(rng, int(rng.integers(1, 21)), dim)
        b = prob_batch(rng, int(rng.integers(1, 21)), dim)
        sigma = None if i % 3 == 0 else float(rng.uniform(0.05, 3.0))
        cfg = MmdConfig(sigma, MODES[i % 2])
        assert abs(mmd(a, b, cfg) - mmd_brute_oracle(a, b, cfg)) <= 1e-9


@settings(max_examples=60)
@given(prob_batches(), st.sampled_from(MODES))
def test_mmd_metric_properties(pair, mode):
    a, b = pair
    cfg = MmdConfig(None, mode)
    assert mmd(a, a, cfg) <= 1e-9
    assert mmd(a, b, cfg) >= 0.0
    assert mmd(a, b, cfg) == pytest.approx(mmd(b, a, cfg), abs=1e-12)


def test_single_element_closed_form():
    p, q = [0.7, 0.2, 0.1], [0.1, 0.1, 0.8]
    cfg = MmdConfig(0.8, NormMode.UNSQUARED)
    k = gaussian_kernel(p, q, cfg)
    assert mmd_brute_oracle([p], [q], cfg) == pytest.approx(math.sqrt(2 - 2 * k), abs=1e-12)
    assert mmd_brute_oracle([p, q], [p, q], cfg) == 0.0


def test_mmd_errors():
    with pytest.raises(DimensionError):
        mmd([[0.5, 0.5]], [[0.2, 0.3, 0.5]])
    with pytest.raises(EmptyBatchError):
        mmd(np.empty((0, 3)), [[0.2, 0.3, 0.5]])
    with pytest.raises(ValueError):
        MmdConfig(sigma=0.0)


def test_prob_vector_validation():
    assert as_prob_vector([0.25, 0.75]).sum() == 1.0
    with pytest.raises(ValueError):
        as_prob_vector([0.6, 0.6])
    with pytest.raises(ValueError):
        as_prob_vector([1.5, -0.5])


def test_median_heuristic_falls_back_on_degenerate_union():
    assert median_heuristic(np.array([[0.5, 0.5]])) == 1.0
    assert median_heuristic(np.array([[0.5, 0.5]] * 3)) == 1.0


def test_group_count_and_zero_groups():
    rng = np.random.default_rng(5)
    high = prob_batch(rng, 20, 4)
    low = prob_batch(rng, 20, 4)
    assert group_mmds(high, low, 10).shape == (2,)
    assert np.all(group_mmds(high, high.copy(), 10) <= 1e-9)
    with pytest.raises(PartitionError):
        group_mmds(high, low, 3)
    with pytest.raises(PartitionError):
        group_mmds(high, low[:10], 10)


def test_group_mmds_on_trained_model_match_oracle(overfit_world):
    outputs = overfit_world.target.outputs
    order = np.argsort(-outputs.max(axis=1), kind="stable")
    half = outputs.shape[0] // 2
    high, low = outputs[order[:half]], outputs[order[half:]]
    cfg = MmdConfig(0.5)
    values = group_mmds(high, low, 10, cfg)
    assert values.shape == (half // 10,)
    assert np.all(values >= 0)
    for g in range(0, values.size, 7):
        sl = slice(10 * g, 10 * g + 10)
        assert values[g] == pytest.approx(mmd_brute_oracle(high[sl], low[sl], cfg), abs=1e-9)


def test_group_mmds_deterministic():
    rng = np.random.default_rng(8)
    high, low = prob_batch(rng, 30, 5), prob_batch(rng, 30, 5)
    assert np.array_equal(group_mmds(high, low, 10), group_mmds(high, low, 10))
