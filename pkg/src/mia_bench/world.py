"""One (preset, run) world: target model, target set, reserve, shadows, and the
kernel caches the scenario search needs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .mmd import MmdConfig, NormMode, kernel_matrix, median_heuristic
from .models import (
    Pool,
    ShadowBundle,
    SoftmaxClassifier,
    TargetDataset,
    assemble_target_dataset,
    generate_task,
    split_pool,
    train_classifier,
    train_shadow_ensemble,
)
from .presets import DatasetPreset
from .scenarios import (
    ETA,
    REFERENCE_SIZE,
    GroupStructure,
    NonmemberSet,
    _deltas,
    cv2_levels_anchor,
    cv2_scale,
    raw_cv3,
    split_by_confidence,
)
from .seeding import derive_seed


@dataclass(frozen=True)
class DistanceUnits:
    """Scale factors from raw MMD to preset distance units, one per control variable.

    * group: median group MMD maps to the preset's p=0.5 Bernoulli threshold
    * cv2: the preset's CV2 level range sits at the geometric centre of the
      pooled high/low MMD interval every CV1 kind can reach
    * cv3: differential spread of the whole target set against the first
      ``REFERENCE_SIZE`` examples of the randomly ordered reserve maps to the
      middle CV3 level
    """

    group: float
    cv2: float
    cv3: float
    raw_group_median: float
    raw_cv2_reach: tuple
    raw_cv3_anchor: float


class ReferenceKernels:
    """Kernel sums between the target set and contiguous windows of an ordered reserve.

    Prefix sums over the reserve axis turn each window into an O(n)
    evaluation, and a sweep over window sizes into one vectorized pass.
    """

    def __init__(self, k_tt: np.ndarray, target_outputs, reserve_outputs, cfg: MmdConfig):
        self.cfg = cfg
        self.k_tt = k_tt
        self.self_k = np.diag(k_tt).copy()
        k_tr = kernel_matrix(target_outputs, reserve_outputs, cfg.sigma, cfg.norm_mode)
        self.p_tr = np.zeros((k_tr.shape[0], k_tr.shape[1] + 1))
        np.cumsum(k_tr, axis=1, out=self.p_tr[:, 1:])
        del k_tr
        k_rr = kernel_matrix(reserve_outputs, reserve_outputs, cfg.sigma, cfg.norm_mode)
        self.p_rr = np.zeros((k_rr.shape[0] + 1, k_rr.shape[1] + 1))
        np.cumsum(np.cumsum(k_rr, axis=0), axis=1, out=self.p_rr[1:, 1:])

    def target_sums(self, idx):
        row_t = self.k_tt[np.ix_(idx, idx)].sum(axis=1)
        return row_t, row_t.sum()

    def cv3_sweep(self, idx, high_mask, start: int, sizes, sums=None) -> np.ndarray:
        """Raw CV3 of target subset ``idx`` against windows ``[start, start + m)`` for each ``m``."""
        sizes = np.asarray(sizes, dtype=np.int64)
        row_t, stt = sums if sums is not None else self.target_sums(idx)
        ends = start + sizes
        row_n = self.p_tr[np.ix_(idx, ends)] - self.p_tr[idx, start][:, None]
        p = self.p_rr
        snn = p[ends, ends] - p[start, ends] - p[ends, start] + p[start, start]
        d = _deltas(row_t[:, None], row_n, self.self_k[idx][:, None], stt, snn[None, :], row_n.sum(axis=0)[None, :],
                    len(idx), sizes[None, :])
        return raw_cv3(d[high_mask].mean(axis=0), d[~high_mask].mean(axis=0))

    def cv3_window(self, idx, high_mask, start: int, size: int) -> float:
        return float(self.cv3_sweep(idx, high_mask, start, [size])[0])


@dataclass(eq=False)
class World:
    preset: DatasetPreset
    run: int
    master_seed: int
    pool: Pool
    model: SoftmaxClassifier
    target: TargetDataset
    reserve: NonmemberSet  # sorted by target-model confidence, ascending
    shadow: ShadowBundle
    mmd_config: MmdConfig
    groups: GroupStructure
    high_mask: np.ndarray  # over target-set indices
    units: DistanceUnits
    kernels: ReferenceKernels  # over ``reserve`` (confidence order)
    reserve_random: NonmemberSet  # the same examples in a seeded random order
    random_kernels: ReferenceKernels
    cache: dict = field(default_factory=dict)

    @property
    def key(self):
        return (self.preset.name, self.run, self.master_seed)

    def seed(self, *parts) -> int:
        return derive_seed(self.master_seed, self.preset.name, self.run, *parts)


def world_seed(master_seed: int, preset_name: str, run: int, *parts) -> int:
    return derive_seed(master_seed, preset_name, run, *parts)


def build_target(preset: DatasetPreset, run: int, master_seed: int):
    """Pool split, target model and the half-member target set of one world."""
    s = lambda *p: world_seed(master_seed, preset.name, run, *p)  # noqa: E731
    task = preset.task()
    pool = split_pool(generate_task(task, sample_seed=s("pool")), preset.target_train, preset.target_heldout, s("split"))
    model = train_classifier(
        pool.features[pool.train_idx], pool.labels[pool.train_idx], preset.class_count, preset.hyper.with_seed(s("target"))
    )
    n = 2 * min(preset.target_train, preset.target_heldout)
    target = assemble_target_dataset(pool, model, n, s("assemble"), dataset_id=preset.name)
    return pool, model, target


def build_world(preset: DatasetPreset, run: int, master_seed: int, norm_mode: NormMode = NormMode.UNSQUARED,
                sigma: Optional[float] = None) -> World:
    s = lambda *p: world_seed(master_seed, preset.name, run, *p)  # noqa: E731
    pool, model, target = build_target(preset, run, master_seed)

    ridx = pool.reserve_idx
    r_out = model.predict_proba(pool.features[ridx])
    order = np.argsort(r_out.max(axis=1), kind="stable")
    ridx = ridx[order]
    reserve = NonmemberSet(pool.features[ridx], pool.labels[ridx], r_out[order], ridx)

    shadow = train_shadow_ensemble(preset.task(), preset.shadow_count, preset.hyper, preset.shadow_pool, s("shadow"))

    if sigma is None:
        sigma = median_heuristic(target.outputs)
    cfg = MmdConfig(sigma=sigma, norm_mode=norm_mode)
    high, low = split_by_confidence(target.outputs)
    groups = GroupStructure(target.outputs, high, low, ETA, cfg)
    high_mask = np.zeros(len(target), bool)
    high_mask[high] = True

    k_tt = kernel_matrix(target.outputs, target.outputs, cfg.sigma, cfg.norm_mode)
    kernels = ReferenceKernels(k_tt, target.outputs, reserve.outputs, cfg)
    perm = np.random.default_rng(s("reference-order")).permutation(len(reserve))
    reserve_random = NonmemberSet(
        reserve.features[perm], reserve.labels[perm], reserve.outputs[perm], reserve.source_idx[perm]
    )
    random_kernels = ReferenceKernels(k_tt, target.outputs, reserve_random.outputs, cfg)
    raw3 = random_kernels.cv3_window(np.arange(len(target)), high_mask, 0, REFERENCE_SIZE)
    med = float(np.median(groups.group_mmds))
    group_scale = preset.bernoulli_threshold(0.5) / med
    reach_lo, reach_hi = cv2_levels_anchor(groups, group_scale, preset, s("cv2-anchor"))
    units = DistanceUnits(
        group=group_scale,
        cv2=cv2_scale(preset.cv2_levels, reach_lo, reach_hi),
        cv3=preset.cv3_levels[1] / raw3,
        raw_group_median=med,
        raw_cv2_reach=(reach_lo, reach_hi),
        raw_cv3_anchor=raw3,
    )
    return World(
        preset, run, master_seed, pool, model, target, reserve, shadow, cfg, groups, high_mask, units, kernels,
        reserve_random, random_kernels,
    )
