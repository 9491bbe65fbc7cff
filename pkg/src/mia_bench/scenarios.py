"""Control-variable machinery: confidence split, group MMDs, CV1 distribution
construction, CV2 targeting, CV3 differential distances, CV4 abstention, and
the 84-scenario matrix.

Distances reported by this module are in *preset distance units*. A bounded
kernel keeps raw MMD at or below sqrt(2), so raw values are multiplied by
per-world scale factors (see :class:`DistanceUnits`) that pin one reference
quantity per control variable to a tabulated preset level.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import stats

from .errors import (
    DegenerateSetError,
    EmptyBatchError,
    InfeasibleDistributionError,
    PartitionError,
    PoolExhaustedError,
)
from .mmd import MmdConfig, as_batch, kernel_matrix, median_heuristic, mmd
from .models import Pool, SoftmaxClassifier, TargetDataset

ETA = 10
SUBSET_GROUPS = 20
REFERENCE_SIZE = 400
CV2_TOLERANCE = 0.05
CV3_TOLERANCE = 0.02
KS_ALPHA = 0.01
UNIFORM_BINS = 4
TRANSFORM_NOISE = 0.5
CV1_KINDS = ("Normal", "Uniform", "Bernoulli")


# --------------------------------------------------------------------------
# Distribution kinds


@dataclass(frozen=True)
class Normal:
    mu: float
    sigma2: float

    def __post_init__(self):
        if not self.sigma2 > 0:
            raise ValueError("Normal requires sigma2 > 0")

    tag = "Normal"


@dataclass(frozen=True)
class Uniform:
    a: float
    b: float
    gamma: int = 1

    def __post_init__(self):
        if self.a > self.b:
            raise ValueError("Uniform requires a <= b")
        if self.gamma < 1:
            raise ValueError("Uniform requires gamma >= 1")

    tag = "Uniform"


@dataclass(frozen=True)
class Bernoulli:
    epsilon: float
    p: float
    position: Optional[float] = None  # 0..1 slide along each side; None = seeded random pick

    def __post_init__(self):
        if not 0 < self.p < 1:
            raise ValueError("Bernoulli requires 0 < p < 1")

    tag = "Bernoulli"


DistributionKind = Union[Normal, Uniform, Bernoulli]


# --------------------------------------------------------------------------
# Scenario records


@dataclass(frozen=True)
class EvaluationScenario:
    scenario_id: str
    dataset_id: str
    cv1: str
    cv2: float
    cv3: float
    cv4: float

    def __post_init__(self):
        if self.cv1 not in CV1_KINDS:
            raise ValueError(f"unknown CV1 kind {self.cv1!r}")
        if not 0 <= self.cv4 < 0.5:
            raise ValueError("cv4 must lie in [0, 0.5)")

    def cv(self, which: str):
        return {"CV1": self.cv1, "CV2": self.cv2, "CV3": self.cv3, "CV4": self.cv4}[which]


# Matrix layout: for each CV1 block, (cv2 level, cv3 level, cv4 ratio) indices.
SCENARIO_TEMPLATE: Tuple[Tuple[int, int, int], ...] = tuple(
    (int(t[0]), int(t[1]), int(t[2]))
    for t in (
        "000 001 002 011 012 013 022 023 100 101 102 103 110 111 "
        "112 113 120 121 122 123 200 201 202 211 212 213 222 223"
    ).split()
)


def build_scenario_matrix(preset) -> List[EvaluationScenario]:
    """The 84 scenarios of one preset, ids ES01..ES84."""
    out = []
    for kind in CV1_KINDS:
        for i2, i3, i4 in SCENARIO_TEMPLATE:
            out.append(
                EvaluationScenario(
                    scenario_id=f"ES{len(out) + 1:02d}",
                    dataset_id=preset.name,
                    cv1=kind,
                    cv2=preset.cv2_levels[i2],
                    cv3=preset.cv3_levels[i3],
                    cv4=preset.cv4_ratios[i4],
                )
            )
    return out


MATRIX_HEADER = ("scenario_id", "dataset_id", "cv1", "cv2", "cv3", "cv4")


def write_matrix(scenarios: Sequence[EvaluationScenario], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MATRIX_HEADER)
        for s in scenarios:
            w.writerow([s.scenario_id, s.dataset_id, s.cv1, repr(s.cv2), repr(s.cv3), repr(s.cv4)])


def read_matrix(path) -> List[EvaluationScenario]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        EvaluationScenario(r["scenario_id"], r["dataset_id"], r["cv1"], float(r["cv2"]), float(r["cv3"]), float(r["cv4"]))
        for r in rows
    ]


# --------------------------------------------------------------------------
# CV1: confidence split and group MMDs


def split_by_confidence(outputs) -> Tuple[np.ndarray, np.ndarray]:
    """Median split on max-probability.

    ``high`` comes back most-confident first and ``low`` least-confident
    first, so pairing them block by block matches ranks from the outside in.
    Ties keep input order (lower index is treated as more confident).
    """
    out = as_batch(outputs)
    n = out.shape[0]
    if n % 2:
        raise PartitionError(f"confidence split needs an even count, got {n}")
    order = np.argsort(-out.max(axis=1), kind="stable")
    return order[: n // 2], order[n // 2:][::-1]


class GroupStructure:
    """Kernel block sums for the rank-matched high/low groups of one target set.

    Block sums let the pooled MMD of any union of groups be evaluated without
    touching the underlying vectors again.
    """

    def __init__(self, outputs, high: np.ndarray, low: np.ndarray, eta: int, cfg: MmdConfig):
        if len(high) != len(low):
            raise PartitionError("high and low halves differ in size")
        if eta < 1 or len(high) % eta:
            raise PartitionError(f"eta={eta} does not divide half size {len(high)}")
        if cfg.sigma is None:
            raise ValueError("GroupStructure needs a fixed sigma")
        self.high, self.low, self.eta, self.cfg = np.asarray(high), np.asarray(low), eta, cfg
        self.count = len(high) // eta
        out = np.asarray(outputs, dtype=float)
        h, l = out[self.high], out[self.low]

        def blocks(k):
            g = self.count
            return k.reshape(g, eta, g, eta).sum(axis=(1, 3))

        self.bhh = blocks(kernel_matrix(h, h, cfg.sigma, cfg.norm_mode))
        self.bll = blocks(kernel_matrix(l, l, cfg.sigma, cfg.norm_mode))
        self.bhl = blocks(kernel_matrix(h, l, cfg.sigma, cfg.norm_mode))
        diag = np.diag(self.bhh) + np.diag(self.bll) - 2 * np.diag(self.bhl)
        self.group_mmds = np.sqrt(np.clip(diag, 0, None)) / eta

    def pooled(self, groups) -> float:
        """Raw MMD between the high halves and low halves of ``groups``."""
        g = np.asarray(groups)
        if g.size == 0:
            raise EmptyBatchError("no groups selected")
        m = (self.eta * g.size) ** 2
        rad = (self.bhh[np.ix_(g, g)].sum() + self.bll[np.ix_(g, g)].sum() - 2 * self.bhl[np.ix_(g, g)].sum()) / m
        return math.sqrt(max(rad, 0.0))

    def members(self, groups) -> Tuple[np.ndarray, np.ndarray]:
        """Target-set indices of the high and low samples in ``groups``."""
        g = np.sort(np.asarray(groups))
        hi = self.high.reshape(self.count, self.eta)[g].ravel()
        lo = self.low.reshape(self.count, self.eta)[g].ravel()
        return hi, lo


# --------------------------------------------------------------------------
# CV1: distribution construction


def _as_sorted(values):
    v = np.asarray(values, dtype=float)
    order = np.argsort(v, kind="stable")
    return v, order


def construct_subset(group_mmds, kind: DistributionKind, count: int, seed: int) -> np.ndarray:
    """Pick ``count`` group indices whose MMD values follow ``kind``.

    Returns indices into ``group_mmds``, sorted ascending by index.
    """
    v, order = _as_sorted(group_mmds)
    if count < 1 or count > v.size:
        raise InfeasibleDistributionError(f"need {count} groups, have {v.size}", region="all")
    rng = np.random.default_rng(seed)
    if isinstance(kind, Uniform):
        chosen = _uniform_pick(v, order, kind, count, rng)
    elif isinstance(kind, Bernoulli):
        chosen = _bernoulli_pick(v, order, kind, count, rng)
    elif isinstance(kind, Normal):
        chosen = _normal_pick(v, kind, count, rng)
    else:
        raise TypeError(f"unknown distribution kind {kind!r}")
    return np.sort(np.asarray(chosen, dtype=np.int64))


def _uniform_pick(v, order, kind: Uniform, count, rng):
    if count % kind.gamma:
        raise PartitionError(f"count {count} is not a multiple of gamma {kind.gamma}")
    per = count // kind.gamma
    edges = np.linspace(kind.a, kind.b, kind.gamma + 1)
    chosen = []
    for i in range(kind.gamma):
        lo, hi = edges[i], edges[i + 1]
        last = i == kind.gamma - 1
        inside = order[(v[order] >= lo) & ((v[order] <= hi) if last else (v[order] < hi))]
        if inside.size < per:
            raise InfeasibleDistributionError(
                f"bin [{lo:.4g}, {hi:.4g}] holds {inside.size} groups, needs {per}", region=(float(lo), float(hi))
            )
        chosen.extend(rng.choice(inside, size=per, replace=False))
    return chosen


def _bernoulli_pick(v, order, kind: Bernoulli, count, rng):
    n_above = int(round(kind.p * count))
    above = order[v[order] > kind.epsilon]
    below = order[v[order] <= kind.epsilon]
    picks = []
    for side, need, name in ((above, n_above, f"> {kind.epsilon}"), (below, count - n_above, f"<= {kind.epsilon}")):
        if side.size < need:
            raise InfeasibleDistributionError(f"{side.size} groups {name}, need {need}", region=name)
        if kind.position is None:
            picks.extend(rng.choice(side, size=need, replace=False))
        else:
            start = int(round(kind.position * (side.size - need)))
            picks.extend(side[start:start + need])
    return picks


def _normal_pick(v, kind: Normal, count, rng):
    sd = math.sqrt(kind.sigma2)
    targets = kind.mu + sd * stats.norm.ppf((np.arange(count) + rng.uniform(0.05, 0.95, count)) / count)
    # Fill the centre first so the tails take whatever is closest that is left.
    free = np.ones(v.size, bool)
    chosen = []
    for t in targets[np.argsort(np.abs(targets - kind.mu), kind="stable")]:
        cand = np.flatnonzero(free)
        j = cand[np.argmin(np.abs(v[cand] - t))]
        free[j] = False
        chosen.append(j)
    ks = stats.kstest(v[chosen], "norm", args=(kind.mu, sd))
    if ks.pvalue <= KS_ALPHA:
        side = "upper tail" if np.mean(v[chosen]) < kind.mu else "lower tail"
        raise InfeasibleDistributionError(
            f"selected groups fail KS against N({kind.mu:.4g}, {kind.sigma2:.4g}) (p={ks.pvalue:.3g})", region=side
        )
    return chosen


def ks_pvalue(values, kind: Normal) -> float:
    return float(stats.kstest(np.asarray(values, float), "norm", args=(kind.mu, math.sqrt(kind.sigma2))).pvalue)


# --------------------------------------------------------------------------
# CV2


def measure_cv2(high_outputs, low_outputs, cfg: MmdConfig) -> float:
    """Raw MMD between the high-confidence and low-confidence outputs of a subset."""
    return mmd(high_outputs, low_outputs, cfg)


def select_for_cv2(groups: GroupStructure, target: float, tolerance: float, scale: float = 1.0) -> np.ndarray:
    """Greedily drop groups until the pooled (scaled) MMD is within ``tolerance`` of ``target``.

    Starts from every group; each step removes the group whose removal moves
    the pooled value closest to the target. Fails when no single removal
    improves the gap.
    """
    if not target > 0:
        raise ValueError("target distance must be positive")
    chosen = list(range(groups.count))
    gap = abs(groups.pooled(chosen) * scale - target)
    while gap > tolerance:
        if len(chosen) == 1:
            break
        trials = [(abs(groups.pooled(chosen[:i] + chosen[i + 1:]) * scale - target), i) for i in range(len(chosen))]
        best_gap, i = min(trials)
        if best_gap >= gap:
            break
        gap = best_gap
        del chosen[i]
    if gap > tolerance:
        raise InfeasibleDistributionError(
            f"closest pooled distance misses target {target} by {gap:.4g} (tolerance {tolerance})", region="cv2"
        )
    return np.array(chosen, dtype=np.int64)


# --------------------------------------------------------------------------
# CV3


@dataclass(frozen=True, eq=False)
class NonmemberSet:
    features: np.ndarray
    labels: np.ndarray
    outputs: np.ndarray
    source_idx: Optional[np.ndarray] = None  # pool indices for held-out draws

    def __len__(self):
        return self.labels.shape[0]


def generate_nonmembers(model: SoftmaxClassifier, pool: Pool, mode: str, count: int, seed: int,
                        base_features=None, base_labels=None, noise_scale: float = TRANSFORM_NOISE) -> NonmemberSet:
    """Nonmember examples for differential comparisons.

    ``HeldOut`` draws ``count`` reserve examples the model never trained on.
    ``Transform`` perturbs ``base_features`` with seeded Gaussian noise whose
    standard deviation is ``noise_scale`` times each feature's spread across
    the base set.
    """
    if count < 1:
        raise ValueError("count must be positive")
    rng = np.random.default_rng(seed)
    if mode == "HeldOut":
        reserve = pool.reserve_idx if pool.reserve_idx is not None else np.array([], dtype=np.int64)
        if reserve.size < count:
            raise PoolExhaustedError(f"need {count} reserve examples, have {reserve.size}")
        idx = np.sort(rng.choice(reserve, size=count, replace=False))
        feats = pool.features[idx]
        return NonmemberSet(feats, pool.labels[idx], model.predict_proba(feats), idx)
    if mode == "Transform":
        if base_features is None:
            raise ValueError("Transform mode needs base features")
        base = np.asarray(base_features, dtype=float)
        if base.shape[0] < count:
            raise PoolExhaustedError(f"need {count} base examples, have {base.shape[0]}")
        pick = np.sort(rng.choice(base.shape[0], size=count, replace=False)) if base.shape[0] > count else np.arange(count)
        spread = base.std(axis=0) if base.shape[0] > 1 else np.ones(base.shape[1])
        feats = base[pick] + rng.normal(size=base[pick].shape) * noise_scale * spread
        labels = np.asarray(base_labels)[pick] if base_labels is not None else np.full(count, -1)
        return NonmemberSet(feats, labels, model.predict_proba(feats), None)
    raise ValueError(f"unknown nonmember mode {mode!r}")


def _mmd_from_sums(stt, snn, stn, n, m):
    rad = stt / (n * n) + snn / (m * m) - 2 * stn / (n * m)
    return np.sqrt(np.clip(rad, 0, None))


def differential_distance(target_set, nonmember_set, sample_index: int, cfg: MmdConfig) -> float:
    """MMD change when ``target_set[sample_index]`` moves into the nonmember set.

    Positive values mean the move pushed the two sets further apart.
    """
    t, n = as_batch(target_set), as_batch(nonmember_set)
    if t.shape[0] < 2:
        raise DegenerateSetError("target set must keep at least one sample after the move")
    if not 0 <= sample_index < t.shape[0]:
        raise IndexError(f"sample index {sample_index} out of range")
    before = mmd(t, n, cfg)
    x = t[sample_index:sample_index + 1]
    after = mmd(np.delete(t, sample_index, axis=0), np.vstack([n, x]), cfg)
    return after - before


def differential_distances(target_set, nonmember_set, cfg: MmdConfig) -> np.ndarray:
    """:func:`differential_distance` for every target sample, via kernel row sums."""
    t, n = as_batch(target_set), as_batch(nonmember_set)
    if t.shape[0] < 2:
        raise DegenerateSetError("target set must keep at least one sample after the move")
    sigma = cfg.sigma if cfg.sigma is not None else median_heuristic(t, n)
    ktt = kernel_matrix(t, t, sigma, cfg.norm_mode)
    knn = kernel_matrix(n, n, sigma, cfg.norm_mode)
    ktn = kernel_matrix(t, n, sigma, cfg.norm_mode)
    return _deltas(ktt.sum(axis=1), ktn.sum(axis=1), np.diag(ktt), ktt.sum(), knn.sum(), ktn.sum(), t.shape[0], n.shape[0])


def _deltas(row_t, row_n, self_k, stt, snn, stn, nt, nn):
    before = _mmd_from_sums(stt, snn, stn, nt, nn)
    after = _mmd_from_sums(
        stt - 2 * row_t + self_k,
        snn + 2 * row_n + self_k,
        stn - row_n + row_t - self_k,
        nt - 1,
        nn + 1,
    )
    return after - before


def average_differential_distances(target_set, nonmember_set, cfg: MmdConfig, high_mask=None) -> Tuple[float, float]:
    """Mean differential distance over the high- and low-confidence target samples.

    ``high_mask`` defaults to the median confidence split of ``target_set``.
    """
    t = as_batch(target_set)
    if high_mask is None:
        if t.shape[0] % 2:
            raise PartitionError("cannot split an odd-sized target set by confidence")
        high, _ = split_by_confidence(t)
        high_mask = np.zeros(t.shape[0], bool)
        high_mask[high] = True
    high_mask = np.asarray(high_mask, bool)
    if not high_mask.any() or high_mask.all():
        raise EmptyBatchError("both confidence classes must be nonempty")
    d = differential_distances(t, nonmember_set, cfg)
    return float(d[high_mask].mean()), float(d[~high_mask].mean())


def raw_cv3(avg_high: float, avg_low: float) -> float:
    """Spread between the two confidence classes' differential distances."""
    return avg_low - avg_high


# --------------------------------------------------------------------------
# CV4


def abstain_count(ratio: float, n: int) -> int:
    # The epsilon guards ratios like 0.29 * 100 = 28.999999999999996.
    return int(math.floor(ratio * n + 1e-9))


def apply_cv4(scores, ratio: float, threshold: float = 0.0) -> np.ndarray:
    """Indices of the ``floor(ratio * n)`` samples with the smallest ``|score - threshold|``.

    Ties go to the lower index. Returned sorted ascending.
    """
    if not 0 <= ratio < 1:
        raise ValueError("ratio must lie in [0, 1)")
    s = np.asarray(scores, dtype=float)
    k = abstain_count(ratio, s.size)
    if k == 0:
        return np.array([], dtype=np.int64)
    margin = np.abs(s - threshold)
    margin = np.where(np.isnan(margin), -np.inf, margin)
    return np.sort(np.argsort(margin, kind="stable")[:k])


# --------------------------------------------------------------------------
# Scenario realization

LEVER_GRID = 41
CONSTRUCT_SEEDS = 4
REFERENCE_MIN = 50
REFERENCE_STEP = 10


@dataclass(eq=False)
class ScenarioInstance:
    scenario: EvaluationScenario
    target_subset: TargetDataset
    nonmember_reference: NonmemberSet
    realized_cv2: float
    realized_cv3: float
    cv1_kind: DistributionKind
    group_indices: np.ndarray
    group_values: np.ndarray  # selected group MMDs in preset units
    high_mask: np.ndarray  # over target_subset
    reference_order: str  # "random" or "confidence"
    reference_start: int
    reference_size: int
    mmd_config: MmdConfig
    subset_index: np.ndarray = field(repr=False)  # positions in the world's target set

    @property
    def instance_key(self):
        s = self.scenario
        return (s.dataset_id, s.cv1, s.cv2, s.cv3)


UNIFORM_VARIANTS = ((UNIFORM_BINS, 1.0), (UNIFORM_BINS, 0.75), (UNIFORM_BINS, 0.5), (UNIFORM_BINS, 0.25), (2, 0.5), (2, 0.25))


def cv1_variants(tag: str, preset) -> list:
    """Shape variants tried in order of preference when searching for a CV2 level.

    The first entry is the default shape. Bernoulli variants walk outward
    from p = 0.5 through the preset's tabulated (p, epsilon) pairs.
    """
    if tag == "Normal":
        return [None]
    if tag == "Uniform":
        return list(UNIFORM_VARIANTS)
    if tag == "Bernoulli":
        from .presets import BERNOULLI_P

        ps = sorted(BERNOULLI_P, key=lambda q: (abs(q - 0.5), q))
        return [(q, preset.bernoulli_threshold(q)) for q in ps]
    raise ValueError(f"unknown CV1 kind {tag!r}")


def cv1_kind_at(tag: str, lever: float, values: np.ndarray, variant=None) -> DistributionKind:
    """Map a lever position in [0, 1] to concrete CV1 parameters over ``values``.

    The lever slides the distribution's location from the low end of the
    group-MMD pool to the high end; ``variant`` fixes the shape (see
    :func:`cv1_variants`).
    """
    v = np.sort(np.asarray(values, float))
    if tag == "Normal":
        sd = 0.5 * float(np.std(v))
        lo, hi = np.quantile(v, [0.1, 0.9])
        return Normal(mu=float(lo + lever * (hi - lo)), sigma2=sd * sd)
    if tag == "Uniform":
        bins, frac = variant if variant is not None else UNIFORM_VARIANTS[0]
        width = frac * float(np.quantile(v, 0.85) - np.quantile(v, 0.15))
        a = float(v[0] + lever * max(v[-1] - width - v[0], 0.0))
        return Uniform(a=a, b=a + width, gamma=bins)
    if tag == "Bernoulli":
        p, eps = variant
        return Bernoulli(epsilon=eps, p=p, position=float(lever))
    raise ValueError(f"unknown CV1 kind {tag!r}")


def _lever_search(evaluate, target: float, tolerance: float):
    """Grid over [0, 1] then bisection inside every bracketing pair.

    ``evaluate(lever)`` returns a CV2 value or None when infeasible.
    Returns the best (cv2, lever) seen.
    """
    best = None

    def probe(t):
        nonlocal best
        val = evaluate(t)
        if val is not None and (best is None or abs(val - target) < abs(best[0] - target)):
            best = (val, t)
        return val

    grid = np.linspace(0.0, 1.0, LEVER_GRID)
    vals = [probe(t) for t in grid]
    if best is not None and abs(best[0] - target) <= tolerance:
        return best
    for i in range(len(grid) - 1):
        a, b = vals[i], vals[i + 1]
        if a is None or b is None or (a - target) * (b - target) > 0:
            continue
        lo, hi, flo = grid[i], grid[i + 1], a
        for _ in range(12):
            mid = 0.5 * (lo + hi)
            fm = probe(mid)
            if fm is None or abs(fm - target) <= tolerance:
                break
            if (fm - target) * (flo - target) > 0:
                lo, flo = mid, fm
            else:
                hi = mid
        if abs(best[0] - target) <= tolerance:
            break
    return best


def cv2_reach(groups: GroupStructure, group_values: np.ndarray, tag: str, preset, seed: int) -> Tuple[float, float]:
    """Smallest and largest raw pooled distance a CV1 kind reaches on the lever grid."""
    reached = []
    for variant in cv1_variants(tag, preset):
        for t in np.linspace(0.0, 1.0, LEVER_GRID):
            try:
                sel = construct_subset(group_values, cv1_kind_at(tag, t, group_values, variant), SUBSET_GROUPS, seed)
            except InfeasibleDistributionError:
                continue
            reached.append(groups.pooled(sel))
    if not reached:
        raise InfeasibleDistributionError(f"no {tag} construction is feasible", region="cv1")
    return float(min(reached)), float(max(reached))


def cv2_levels_anchor(groups: GroupStructure, group_scale: float, preset, seed: int) -> Tuple[float, float]:
    """Raw pooled-distance interval that every CV1 kind can reach.

    Returns (lo, hi): the largest per-kind minimum and the smallest per-kind
    maximum. The CV2 scale then centres the preset's level range inside it
    on a log axis.
    """
    values = groups.group_mmds * group_scale
    reach = [cv2_reach(groups, values, tag, preset, seed) for tag in CV1_KINDS]
    return max(r[0] for r in reach), min(r[1] for r in reach)


def cv2_scale(levels, lo: float, hi: float) -> float:
    """Scale putting ``levels[0] * levels[-1]`` at the geometric centre of ``[lo, hi]``."""
    return math.sqrt(levels[0] * levels[-1] / (lo * hi))


def _search_cv2(world, tag: str, target: float, tolerance: float, seed: int):
    groups, units = world.groups, world.units
    values = groups.group_mmds * units.group
    overall = None
    for variant in cv1_variants(tag, world.preset):
        for cseed in [seed + i for i in range(CONSTRUCT_SEEDS if tag != "Bernoulli" else 1)]:
            def evaluate(t):
                try:
                    sel = construct_subset(values, cv1_kind_at(tag, t, values, variant), SUBSET_GROUPS, cseed)
                except InfeasibleDistributionError:
                    return None
                return groups.pooled(sel) * units.cv2

            found = _lever_search(evaluate, target, tolerance)
            if found is None:
                continue
            if overall is None or abs(found[0] - target) < abs(overall[0] - target):
                overall = found + (variant, cseed)
            if abs(found[0] - target) <= tolerance:
                cv2, lever, variant, cseed = overall
                kind = cv1_kind_at(tag, lever, values, variant)
                return cv2, kind, construct_subset(values, kind, SUBSET_GROUPS, cseed)
    if overall is None:
        raise InfeasibleDistributionError(f"no feasible {tag} construction", region="cv1")
    raise InfeasibleDistributionError(
        f"closest {tag} construction gives CV2 {overall[0]:.4f}, target {target} (tolerance {tolerance})", region="cv2"
    )


def _search_cv3(world, idx: np.ndarray, high_mask: np.ndarray, target: float, tolerance: float):
    """Pick a reference window whose differential spread hits ``target``.

    Tries nested prefixes of a seeded random reserve ordering first, then
    contiguous windows of the confidence-sorted reserve. Among hits, the
    size closest to :data:`REFERENCE_SIZE` wins.
    """
    scale = world.units.cv3
    r = len(world.reserve)
    best = None
    for order_name, kern in (("random", world.random_kernels), ("confidence", world.kernels)):
        sums = kern.target_sums(idx)
        hits = []
        starts = [0] if order_name == "random" else range(0, r - REFERENCE_MIN + 1, 50)
        for start in starts:
            sizes = np.arange(REFERENCE_MIN, r - start + 1, REFERENCE_STEP)
            vals = kern.cv3_sweep(idx, high_mask, start, sizes, sums) * scale
            errs = np.abs(vals - target)
            j = int(np.argmin(errs))
            if best is None or errs[j] < best[0]:
                best = (float(errs[j]), float(vals[j]))
            for k in np.flatnonzero(errs <= tolerance):
                hits.append((abs(int(sizes[k]) - REFERENCE_SIZE), start, float(vals[k]), int(sizes[k])))
        if hits:
            _, start, val, m = min(hits)
            return val, order_name, start, m
    raise InfeasibleDistributionError(
        f"closest reference gives CV3 {best[1]:.4f}, target {target} (tolerance {tolerance})", region="cv3"
    )


def materialize_scenario(scenario: EvaluationScenario, world, seed: int,
                         cv2_tolerance: float = CV2_TOLERANCE, cv3_tolerance: float = CV3_TOLERANCE) -> ScenarioInstance:
    """Realize ``scenario`` on ``world``: CV1 shape and CV2 via group selection,
    CV3 via the held-out reference. Deterministic in (world, scenario, seed).
    """
    if scenario.dataset_id != world.preset.name:
        raise ValueError(f"scenario {scenario.scenario_id} is for {scenario.dataset_id}, world is {world.preset.name}")
    try:
        key2 = ("cv2", scenario.cv1, scenario.cv2, seed)
        if key2 not in world.cache:
            world.cache[key2] = _search_cv2(world, scenario.cv1, scenario.cv2, cv2_tolerance, seed)
        cv2, kind, sel = world.cache[key2]
        hi, lo = world.groups.members(sel)
        idx = np.concatenate([hi, lo])
        high_mask = np.zeros(idx.size, bool)
        high_mask[: hi.size] = True
        key3 = ("cv3", scenario.cv1, scenario.cv2, scenario.cv3, seed)
        if key3 not in world.cache:
            world.cache[key3] = _search_cv3(world, idx, high_mask, scenario.cv3, cv3_tolerance)
        cv3, order_name, start, m = world.cache[key3]
    except InfeasibleDistributionError as exc:
        raise InfeasibleDistributionError(str(exc), region=exc.region, scenario_id=scenario.scenario_id) from None

    src = world.reserve if order_name == "confidence" else world.reserve_random
    ref = NonmemberSet(
        src.features[start:start + m], src.labels[start:start + m], src.outputs[start:start + m], src.source_idx[start:start + m]
    )
    return ScenarioInstance(
        scenario=scenario,
        target_subset=world.target.subset(idx),
        nonmember_reference=ref,
        realized_cv2=float(cv2),
        realized_cv3=float(cv3),
        cv1_kind=kind,
        group_indices=np.asarray(sel),
        group_values=world.groups.group_mmds[sel] * world.units.group,
        high_mask=high_mask,
        reference_order=order_name,
        reference_start=int(start),
        reference_size=int(m),
        mmd_config=world.mmd_config,
        subset_index=idx,
    )
