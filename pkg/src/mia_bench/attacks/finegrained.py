"""Fine-grained attacks: they score every sample and abstain near their cut."""

from __future__ import annotations

import math

import numpy as np
from scipy.spatial.distance import cdist

from ..errors import MissingContextError
from ..seeding import derive_seed
from .base import (
    AttackContext,
    AttackKind,
    AttackResult,
    calibration_split,
    finish,
    max_ma_threshold,
    per_class_thresholds,
    register,
    sample_losses,
    shadow_key,
    shadow_labels,
    true_probs,
)

RISK_BINS = 10
SHAPLEY_K = 5
SHAPLEY_VALIDATION = 500
PPV_PRIOR = 0.5
PPV_GRID = 100
LOGIT_CLAMP = 1e-7


# --------------------------------------------------------------------------
# Privacy risk scores


class RiskTable:
    """P(member | class, loss bin) from shadow in/out counts; empty cells give 0.5."""

    def __init__(self, losses, labels, truth, class_count: int, bins: int = RISK_BINS):
        losses, labels, truth = np.ravel(losses), np.ravel(labels), np.ravel(truth).astype(bool)
        self.edges = np.unique(np.quantile(losses, np.linspace(0, 1, bins + 1)[1:-1]))
        b = self.bin(losses)
        shape = (class_count, self.edges.size + 1)
        self.n_in = np.zeros(shape)
        self.n_out = np.zeros(shape)
        np.add.at(self.n_in, (labels[truth], b[truth]), 1)
        np.add.at(self.n_out, (labels[~truth], b[~truth]), 1)
        total = self.n_in + self.n_out
        with np.errstate(invalid="ignore", divide="ignore"):
            self.risk = np.where(total > 0, self.n_in / total, 0.5)

    def bin(self, losses):
        return np.searchsorted(self.edges, losses, side="right")

    def score(self, losses, labels):
        return self.risk[np.asarray(labels, np.int64), self.bin(losses)]


def _risk_fit(shadow):
    k, n = shadow.in_masks.shape
    labels = np.broadcast_to(shadow_labels(shadow), (k, n))
    table = RiskTable(shadow.losses, labels, shadow.in_masks, shadow.outputs.shape[2])
    scores = table.score(shadow.losses.ravel(), labels.ravel())
    cuts = per_class_thresholds(scores, shadow.in_masks.ravel(), labels.ravel(), shadow.outputs.shape[2])
    return table, cuts


@register(AttackKind.PRIVACY_RISK)
def privacy_risk_scores(ctx: AttackContext) -> AttackResult:
    shadow = ctx.shadow
    table, cuts = ctx.remember(shadow_key(shadow, "risk"), lambda: _risk_fit(shadow))
    scores = table.score(sample_losses(ctx.outputs, ctx.true_labels), ctx.true_labels)
    return finish(AttackKind.PRIVACY_RISK, ctx, scores, sample_thresholds=cuts[ctx.true_labels])


# --------------------------------------------------------------------------
# KNN-Shapley


def knn_shapley(train_x, train_y, test_x, test_y, k: int = SHAPLEY_K) -> np.ndarray:
    """Exact Shapley values of each training point for a K-nearest-neighbour
    utility, averaged over the test points.

    The utility of a subset S for one test point is the fraction of its
    min(K, |S|) nearest members of S sharing the test label, divided by K.
    """
    train_y, test_y = np.asarray(train_y), np.asarray(test_y)
    n = train_y.size
    d = cdist(np.asarray(test_x, float), np.asarray(train_x, float))
    order = np.argsort(d, axis=1, kind="stable")
    match = (train_y[order] == test_y[:, None]).astype(float)  # (tests, n), nearest first
    rank = np.arange(1, n)  # 1-based rank i for the step from i+1 to i
    step = (match[:, :-1] - match[:, 1:]) / k * np.minimum(k, rank) / rank
    # s_i = s_{i+1} + step_i, from s_n = match_n / n
    tail = np.cumsum(step[:, ::-1], axis=1)[:, ::-1]
    ranked = np.empty_like(match)
    ranked[:, -1] = match[:, -1] / n
    ranked[:, :-1] = ranked[:, -1:] + tail
    values = np.empty_like(ranked)
    np.put_along_axis(values, order, ranked, axis=1)
    return values.mean(axis=0)


def _validation(shadow, shadows, count: int, seed: int, exclude=None):
    """Outputs of ``shadows`` on examples they trained on, with labels."""
    masks = shadow.in_masks[shadows].copy()
    if exclude is not None:
        masks[:, exclude] = False
    s, j = np.nonzero(masks)
    rng = np.random.default_rng(seed)
    pick = np.sort(rng.choice(s.size, size=min(count, s.size), replace=False))
    return shadow.outputs[shadows[s[pick]], j[pick]], shadow_labels(shadow)[j[pick]]


def _shapley_scores(outputs, labels, val_x, val_y):
    return knn_shapley(outputs, labels, val_x, val_y) * len(labels)


def _shapley_fit(shadow, n: int):
    t, refs = calibration_split(shadow)
    rng = np.random.default_rng(derive_seed(shadow.seed, "shapley-calibration", n))
    ins, outs = np.flatnonzero(shadow.in_masks[t]), np.flatnonzero(~shadow.in_masks[t])
    half = min(n // 2, ins.size, outs.size)
    j = np.sort(np.concatenate([rng.choice(ins, half, replace=False), rng.choice(outs, half, replace=False)]))
    labels = shadow_labels(shadow)
    val_x, val_y = _validation(shadow, refs, SHAPLEY_VALIDATION, derive_seed(shadow.seed, "shapley-val-cal"), exclude=j)
    scores = _shapley_scores(shadow.outputs[t, j], labels[j], val_x, val_y)
    return per_class_thresholds(scores, shadow.in_masks[t, j], labels[j], shadow.outputs.shape[2])


@register(AttackKind.SHAPLEY)
def shapley_values(ctx: AttackContext) -> AttackResult:
    """Data value of each sample against outputs the shadows gave their own training data."""
    shadow = ctx.shadow
    if len(ctx) < 2:
        raise MissingContextError("Shapley valuation needs at least two samples")
    cuts = ctx.remember(shadow_key(shadow, "shapley", len(ctx)), lambda: _shapley_fit(shadow, len(ctx)))
    val_x, val_y = ctx.remember(
        shadow_key(shadow, "shapley-validation"),
        lambda: _validation(shadow, np.arange(len(shadow)), SHAPLEY_VALIDATION, derive_seed(shadow.seed, "shapley-val")),
    )
    scores = _shapley_scores(ctx.outputs, ctx.true_labels, val_x, val_y)
    return finish(AttackKind.SHAPLEY, ctx, scores, sample_thresholds=cuts[ctx.true_labels])


# --------------------------------------------------------------------------
# Positive predictive value


def ppv_curve(scores, truth, grid, prior: float):
    """PPV of the rule ``score > tau`` for every ``tau`` in ``grid`` (nan when nothing is flagged)."""
    scores, truth = np.asarray(scores, float), np.asarray(truth, bool)
    grid = np.asarray(grid, float)
    s_in, s_out = np.sort(scores[truth]), np.sort(scores[~truth])
    tpr = 1 - np.searchsorted(s_in, grid, side="right") / max(s_in.size, 1)
    fpr = 1 - np.searchsorted(s_out, grid, side="right") / max(s_out.size, 1)
    num = prior * tpr
    den = num + (1 - prior) * fpr
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den > 0, num / den, np.nan)


def ppv_grid(scores, size: int = PPV_GRID) -> np.ndarray:
    return np.r_[-np.inf, np.quantile(scores, np.arange(size) / size)]


def best_ppv_threshold(scores, truth, prior: float = PPV_PRIOR, size: int = PPV_GRID) -> float:
    """Grid threshold with the highest PPV; ties go to the smaller threshold."""
    grid = ppv_grid(scores, size)
    ppv = ppv_curve(scores, truth, grid, prior)
    return float(grid[int(np.nanargmax(ppv))])


@register(AttackKind.PPV)
def ppv_attack(ctx: AttackContext, prior: float = PPV_PRIOR) -> AttackResult:
    """Low loss means member; the cut maximizes shadow PPV under ``prior``."""
    shadow = ctx.shadow
    tau = ctx.remember(
        shadow_key(shadow, "ppv", prior),
        lambda: best_ppv_threshold(-shadow.losses.ravel(), shadow.in_masks.ravel(), prior),
    )
    return finish(AttackKind.PPV, ctx, -sample_losses(ctx.outputs, ctx.true_labels), threshold=tau)


# --------------------------------------------------------------------------
# Likelihood ratio


def logit_confidence(p) -> np.ndarray:
    p = np.clip(np.asarray(p, float), LOGIT_CLAMP, 1 - LOGIT_CLAMP)
    return np.log(p) - np.log1p(-p)


def _log_normal(x, mu, var):
    return -0.5 * (np.log(2 * math.pi * var) + (x - mu) ** 2 / var)


class GaussianPair:
    """Global in/out Gaussians over logit confidences with a shared in-minus-out shift."""

    def __init__(self, phi, in_masks):
        phi, in_masks = np.asarray(phi), np.asarray(in_masks, bool)
        self.mu_in, self.mu_out = phi[in_masks].mean(), phi[~in_masks].mean()
        self.var_in = max(phi[in_masks].var(), 1e-12)
        self.var_out = max(phi[~in_masks].var(), 1e-12)

    @property
    def shift(self):
        return self.mu_in - self.mu_out

    def score(self, phi, mu_out=None):
        mu_out = self.mu_out if mu_out is None else mu_out
        return _log_normal(phi, mu_out + self.shift, self.var_in) - _log_normal(phi, mu_out, self.var_out)


def _shadow_phi(shadow):
    k, n = shadow.in_masks.shape
    labels = shadow_labels(shadow)
    return np.stack([logit_confidence(true_probs(shadow.outputs[s], labels)) for s in range(k)])


def _lira_fit(shadow):
    t, refs = calibration_split(shadow)
    phi = _shadow_phi(shadow)
    ref_pair = GaussianPair(phi[refs], shadow.in_masks[refs])
    out = ~shadow.in_masks[refs]
    counts = out.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        mu_out = np.where(counts > 0, np.where(out, phi[refs], 0).sum(axis=0) / counts, ref_pair.mu_out)
    tau = max_ma_threshold(ref_pair.score(phi[t], mu_out), shadow.in_masks[t])
    return GaussianPair(phi, shadow.in_masks), tau


@register(AttackKind.LIRA)
def lira(ctx: AttackContext) -> AttackResult:
    """Log-likelihood ratio of the sample's logit confidence under in vs out Gaussians.

    With sample features the out mean is per sample (every shadow is out
    for it); otherwise both Gaussians are global.
    """
    shadow = ctx.shadow
    if len(shadow) < 2:
        raise MissingContextError("LiRA needs at least two shadow models")
    pair, tau = ctx.remember(shadow_key(shadow, "lira"), lambda: _lira_fit(shadow))
    phi = logit_confidence(true_probs(ctx.outputs, ctx.true_labels))
    mu_out = None
    if ctx.features is not None:
        per_shadow = shadow.query(ctx.features)
        mu_out = np.mean([logit_confidence(true_probs(o, ctx.true_labels)) for o in per_shadow], axis=0)
    return finish(AttackKind.LIRA, ctx, pair.score(phi, mu_out), threshold=tau)
