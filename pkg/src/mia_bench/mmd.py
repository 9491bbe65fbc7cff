"""Gaussian-kernel maximum mean discrepancy between batches of probability vectors.

Everything goes through kernel evaluations; the RKHS feature map is never
built. Batches are ``(n, classes)`` float arrays whose rows are probability
vectors.
"""

from __future__ import annotations

import enum
import math
import statistics
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .errors import DimensionError, EmptyBatchError, PartitionError

PROB_ATOL = 1e-6
RADICAND_FLOOR = -1e-12


class NormMode(str, enum.Enum):
    UNSQUARED = "unsquared"  # exp(-||p - q|| / (2 sigma^2))
    SQUARED = "squared"  # exp(-||p - q||^2 / (2 sigma^2))


class Estimator(str, enum.Enum):
    BIASED_V = "biased_v"


@dataclass(frozen=True)
class MmdConfig:
    """Kernel settings. ``sigma=None`` selects the median heuristic per call."""

    sigma: Optional[float] = None
    norm_mode: NormMode = NormMode.UNSQUARED
    estimator: Estimator = Estimator.BIASED_V

    def __post_init__(self):
        if self.sigma is not None and not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        object.__setattr__(self, "norm_mode", NormMode(self.norm_mode))
        object.__setattr__(self, "estimator", Estimator(self.estimator))

    def with_sigma(self, sigma: float) -> "MmdConfig":
        return MmdConfig(sigma=sigma, norm_mode=self.norm_mode, estimator=self.estimator)


def as_prob_vector(p, atol: float = PROB_ATOL) -> np.ndarray:
    """Validate one probability vector and return it as a float array."""
    v = np.asarray(p, dtype=float)
    if v.ndim != 1 or v.size == 0:
        raise DimensionError(f"probability vector must be 1-D and nonempty, got shape {v.shape}")
    if np.any(v < -atol) or np.any(v > 1 + atol):
        raise ValueError("probability entries must lie in [0, 1]")
    if abs(v.sum() - 1.0) > atol:
        raise ValueError(f"probability vector sums to {v.sum():.9f}, not 1")
    return v


def as_batch(vectors) -> np.ndarray:
    b = np.asarray(vectors, dtype=float)
    if b.ndim == 1:
        b = b[None, :]
    if b.ndim != 2:
        raise DimensionError(f"batch must be 2-D, got shape {b.shape}")
    if b.shape[0] == 0:
        raise EmptyBatchError("batch is empty")
    return b


def _check_pair(a: np.ndarray, b: np.ndarray):
    if a.shape[1] != b.shape[1]:
        raise DimensionError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")


def median_heuristic(*batches: np.ndarray) -> float:
    """Median pairwise Euclidean distance over the union of ``batches``.

    Falls back to 1.0 when the union has fewer than two points or all points
    coincide.
    """
    union = np.concatenate([as_batch(b) for b in batches], axis=0)
    if union.shape[0] < 2:
        return 1.0
    med = float(np.median(pdist(union)))
    return med if med > 0 else 1.0


def _kernel_from_distance(d, sigma: float, norm_mode: NormMode):
    if norm_mode is NormMode.SQUARED:
        d = d * d
    return np.exp(-d / (2.0 * sigma * sigma))


def kernel_matrix(a, b, sigma: float, norm_mode: NormMode = NormMode.UNSQUARED) -> np.ndarray:
    a, b = as_batch(a), as_batch(b)
    _check_pair(a, b)
    return _kernel_from_distance(cdist(a, b), sigma, NormMode(norm_mode))


def gaussian_kernel(p, q, cfg: MmdConfig = MmdConfig()) -> float:
    p, q = np.asarray(p, dtype=float), np.asarray(q, dtype=float)
    if p.shape != q.shape or p.ndim != 1:
        raise DimensionError(f"dimension mismatch: {p.shape} vs {q.shape}")
    sigma = cfg.sigma if cfg.sigma is not None else 1.0
    d = float(np.sqrt(np.sum((p - q) ** 2)))
    return float(_kernel_from_distance(d, sigma, cfg.norm_mode))


def _finish(radicand: float) -> float:
    if radicand < 0:
        if radicand < RADICAND_FLOOR:
            raise ArithmeticError(f"MMD radicand {radicand!r} is negative beyond rounding")
        radicand = 0.0
    return math.sqrt(radicand)


def resolve_sigma(cfg: MmdConfig, a, b) -> float:
    return cfg.sigma if cfg.sigma is not None else median_heuristic(a, b)


def mmd(a, b, cfg: MmdConfig = MmdConfig()) -> float:
    """Biased V-statistic MMD (diagonal terms included) between two batches."""
    a, b = as_batch(a), as_batch(b)
    _check_pair(a, b)
    sigma = resolve_sigma(cfg, a, b)
    kaa = _kernel_from_distance(cdist(a, a), sigma, cfg.norm_mode).mean()
    kbb = _kernel_from_distance(cdist(b, b), sigma, cfg.norm_mode).mean()
    kab = _kernel_from_distance(cdist(a, b), sigma, cfg.norm_mode).mean()
    return _finish(float(kaa + kbb - 2.0 * kab))


def mmd_brute_oracle(a, b, cfg: MmdConfig = MmdConfig()) -> float:
    """Reference MMD with explicit loops and no vectorized shortcuts.

    Kept deliberately naive so it can cross-check :func:`mmd`.
    """
    a = [list(map(float, row)) for row in as_batch(a)]
    b = [list(map(float, row)) for row in as_batch(b)]
    if len(a[0]) != len(b[0]):
        raise DimensionError(f"dimension mismatch: {len(a[0])} vs {len(b[0])}")

    def dist(x, y):
        return math.sqrt(sum((xi - yi) ** 2 for xi, yi in zip(x, y)))

    if cfg.sigma is not None:
        sigma = cfg.sigma
    else:
        union = a + b
        pairs = [dist(union[i], union[j]) for i in range(len(union)) for j in range(i + 1, len(union))]
        sigma = statistics.median(pairs) if pairs else 1.0
        if sigma <= 0:
            sigma = 1.0

    def k(x, y):
        d = dist(x, y)
        if cfg.norm_mode is NormMode.SQUARED:
            d = d * d
        return math.exp(-d / (2.0 * sigma * sigma))

    saa = sum(k(x, y) for x in a for y in a) / (len(a) * len(a))
    sbb = sum(k(x, y) for x in b for y in b) / (len(b) * len(b))
    sab = sum(k(x, y) for x in a for y in b) / (len(a) * len(b))
    return _finish(saa + sbb - 2.0 * sab)


def group_mmds(high, low, eta: int, cfg: MmdConfig = MmdConfig()) -> np.ndarray:
    """MMD of each block pair after cutting ``high`` and ``low`` into blocks of ``eta``.

    Block ``i`` of ``high`` is compared with block ``i`` of ``low``; values
    come back in input order.
    """
    high, low = as_batch(high), as_batch(low)
    _check_pair(high, low)
    if high.shape[0] != low.shape[0]:
        raise PartitionError(f"high and low halves differ in size: {high.shape[0]} vs {low.shape[0]}")
    if eta < 1 or high.shape[0] % eta:
        raise PartitionError(f"eta={eta} does not divide half size {high.shape[0]}")
    out = np.empty(high.shape[0] // eta)
    for g in range(out.size):
        sl = slice(g * eta, (g + 1) * eta)
        out[g] = mmd(high[sl], low[sl], cfg)
    return out

