"""Attacks that learn a small in/out classifier from shadow outputs, plus label-only."""

from __future__ import annotations

import numpy as np

from ..errors import DimensionError
from ..models import Hyper, train_classifier
from ..seeding import derive_seed
from .base import AttackContext, AttackKind, AttackResult, finish, register, shadow_key, shadow_labels

ATTACK_HYPER = Hyper(hidden=(16,), epochs=150, lr=0.01)
PAIR_LIMIT = 4000  # shadow (output, in/out) pairs used to fit each attack model


def _full(outputs, labels):
    return outputs


def _top3(outputs, labels):
    return -np.sort(-outputs, axis=1)[:, :3]


def _top2_true(outputs, labels):
    top = -np.sort(-outputs, axis=1)[:, :2]
    correct = (outputs.argmax(axis=1) == labels).astype(float)
    return np.column_stack([top, correct])


def fit_attack_model(shadow, featurize, seed: int, limit: int = PAIR_LIMIT, hyper: Hyper = ATTACK_HYPER):
    """Perceptron separating shadow outputs on training examples from the rest."""
    k, n = shadow.in_masks.shape
    rng = np.random.default_rng(seed)
    flat = np.sort(rng.choice(k * n, size=min(limit, k * n), replace=False))
    s, j = np.divmod(flat, n)
    x = featurize(shadow.outputs[s, j], shadow_labels(shadow)[j])
    y = shadow.in_masks[s, j].astype(np.int64)
    return train_classifier(x, y, 2, hyper.with_seed(seed))


def _learned(kind: AttackKind, ctx: AttackContext, featurize) -> AttackResult:
    shadow = ctx.shadow
    model = ctx.remember(
        shadow_key(shadow, kind.key),
        lambda: fit_attack_model(shadow, featurize, derive_seed(shadow.seed, kind.key)),
    )
    labels = ctx.true_labels if ctx.true_labels is not None else np.zeros(len(ctx), np.int64)
    scores = model.predict_proba(featurize(ctx.outputs, labels))[:, 1]
    return finish(kind, ctx, scores, threshold=0.5)


@register(AttackKind.NN_ATTACK)
def nn_attack(ctx: AttackContext) -> AttackResult:
    """Member probability from a perceptron on full output vectors."""
    return _learned(AttackKind.NN_ATTACK, ctx, _full)


@register(AttackKind.TOP3_NN)
def top3_nn(ctx: AttackContext) -> AttackResult:
    if ctx.class_count < 3:
        raise DimensionError(f"top-3 features need at least 3 classes, got {ctx.class_count}")
    return _learned(AttackKind.TOP3_NN, ctx, _top3)


@register(AttackKind.TOP2_TRUE)
def top2_true(ctx: AttackContext) -> AttackResult:
    """Perceptron on (top-1 prob, top-2 prob, prediction-correct bit)."""
    return _learned(AttackKind.TOP2_TRUE, ctx, _top2_true)


@register(AttackKind.LABEL_ONLY)
def label_only(ctx: AttackContext) -> AttackResult:
    scores = (ctx.outputs.argmax(axis=1) == ctx.true_labels).astype(float)
    return finish(AttackKind.LABEL_ONLY, ctx, scores, threshold=0.5)
