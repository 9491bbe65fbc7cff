"""Indiscriminate attacks that cut one scalar score at one threshold."""

from __future__ import annotations

import numpy as np

from ..models import Hyper, train_classifier
from ..seeding import derive_seed
from .base import (
    AttackContext,
    AttackKind,
    AttackResult,
    calibration_split,
    finish,
    max_ma_threshold,
    register,
    sample_losses,
    shadow_key,
    shadow_labels,
)

REFERENCE_PERCENTILE = 95.0


@register(AttackKind.LOSS_THRESHOLD)
def loss_threshold(ctx: AttackContext) -> AttackResult:
    """Member iff the sample's loss is below the mean shadow training loss."""
    shadow = ctx.shadow
    tau = float(shadow.losses[shadow.in_masks].mean())
    return finish(AttackKind.LOSS_THRESHOLD, ctx, -sample_losses(ctx.outputs, ctx.true_labels), threshold=-tau)


@register(AttackKind.TOP1_THRESHOLD)
def top1_threshold(ctx: AttackContext, percentile: float = REFERENCE_PERCENTILE) -> AttackResult:
    tau = float(np.percentile(ctx.nonmember_reference.max(axis=1), percentile))
    return finish(AttackKind.TOP1_THRESHOLD, ctx, ctx.outputs.max(axis=1), threshold=tau)


# --------------------------------------------------------------------------
# Difficulty calibration


def _out_mean(values: np.ndarray, in_masks: np.ndarray) -> np.ndarray:
    """Per-example mean of ``values`` over the shadows that did not train on it."""
    out = ~in_masks
    counts = out.sum(axis=0)
    fallback = values[out].mean()
    with np.errstate(invalid="ignore", divide="ignore"):
        means = np.where(out, values, 0.0).sum(axis=0) / counts
    return np.where(counts > 0, means, fallback)


def _calibrated_threshold(shadow) -> float:
    t, refs = calibration_split(shadow)
    difficulty = _out_mean(shadow.losses[refs], shadow.in_masks[refs])
    return max_ma_threshold(difficulty - shadow.losses[t], shadow.in_masks[t])


@register(AttackKind.CALIBRATED)
def calibrated_score(ctx: AttackContext) -> AttackResult:
    """Mean loss under shadows that never saw the sample, minus the target's loss."""
    shadow = ctx.shadow
    tau = ctx.remember(shadow_key(shadow, "calibrated"), lambda: _calibrated_threshold(shadow))
    shadow_out = shadow.query(ctx.features)
    difficulty = np.mean([sample_losses(o, ctx.true_labels) for o in shadow_out], axis=0)
    scores = difficulty - sample_losses(ctx.outputs, ctx.true_labels)
    return finish(AttackKind.CALIBRATED, ctx, scores, threshold=tau)


# --------------------------------------------------------------------------
# Distillation


def _student_hyper(shadow, seed: int) -> Hyper:
    base = getattr(shadow.models[0], "hyper", None) or Hyper()
    return base.with_seed(seed)


def distill(features, teacher_outputs, class_count: int, hyper: Hyper):
    labels = np.asarray(teacher_outputs).argmax(axis=1)
    return train_classifier(features, labels, class_count, hyper, soft_targets=teacher_outputs)


def _distillation_threshold(shadow) -> float:
    """Cut learned with shadow 0 as teacher and half of its unseen examples as transfer set."""
    t, _ = calibration_split(shadow)
    pool, labels = shadow.pool, shadow_labels(shadow)
    rng = np.random.default_rng(derive_seed(shadow.seed, "distill-split"))
    outs = rng.permutation(np.flatnonzero(~shadow.in_masks[t]))
    transfer, held = np.sort(outs[: outs.size // 2]), np.sort(outs[outs.size // 2:])
    student = distill(pool.features[transfer], shadow.outputs[t, transfer], shadow.outputs.shape[2],
                      _student_hyper(shadow, derive_seed(shadow.seed, "distill-calibration")))
    ev = np.sort(np.concatenate([np.flatnonzero(shadow.in_masks[t]), held]))
    scores = sample_losses(student.predict_proba(pool.features[ev]), labels[ev]) - shadow.losses[t, ev]
    return max_ma_threshold(scores, shadow.in_masks[t, ev])


def _model_key(query):
    # Bound methods are recreated on each attribute access; key on their owner.
    return id(getattr(query, "__self__", query))


@register(AttackKind.DISTILLATION)
def distillation_threshold(ctx: AttackContext) -> AttackResult:
    """Loss under a student distilled from the target on shadow data, minus the target's loss."""
    shadow = ctx.shadow
    tau = ctx.remember(shadow_key(shadow, "distillation-threshold"), lambda: _distillation_threshold(shadow))

    def build():
        feats = shadow.pool.features
        return distill(feats, ctx.target_query(feats), ctx.class_count,
                       _student_hyper(shadow, derive_seed(shadow.seed, "distill-student")))

    student = ctx.remember(shadow_key(shadow, "distillation-student", _model_key(ctx.target_query)), build)
    scores = sample_losses(student.predict_proba(ctx.features), ctx.true_labels) - sample_losses(ctx.outputs, ctx.true_labels)
    flags = ("student-matches-target",) if np.allclose(scores, 0.0) else ()
    return finish(AttackKind.DISTILLATION, ctx, scores, threshold=tau, flags=flags)
