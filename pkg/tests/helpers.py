"""Shared builders for the test suite."""

import numpy as np
from hypothesis import strategies as st


def prob_batch(rng, n, dim):
    raw = rng.gamma(0.5, size=(n, dim)) + 1e-9
    return raw / raw.sum(axis=1, keepdims=True)


@st.composite
def prob_batches(draw, max_size=12, max_dim=8):
    """A pair of same-width probability batches."""
    dim = draw(st.integers(2, max_dim))
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    return prob_batch(rng, draw(st.integers(1, max_size)), dim), prob_batch(rng, draw(st.integers(1, max_size)), dim)


def balanced_truth(n, rng=None):
    truth = np.r_[np.ones(n // 2, int), np.zeros(n - n // 2, int)]
    return truth if rng is None else rng.permutation(truth)


ACCEPTANCE = []


def verdict(number, ok, detail):
    """Record and print one acceptance line."""
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE.append((number, line))
    print(line)
    return ok
