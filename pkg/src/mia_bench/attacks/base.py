"""Shared attack types: kinds, the attack-facing context, results and calibration helpers."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Tuple

import numpy as np

from ..errors import MissingContextError
from ..metrics import Decision, threshold_at_max_ma
from ..models import LOSS_FLOOR, ShadowBundle
from ..scenarios import apply_cv4
from ..seeding import derive_seed

# Field names an attack may require from its context.
SHADOW = "shadow"
REFERENCE = "nonmember_reference"
LABELS = "true_labels"
FEATURES = "features"
QUERY = "target_query"


class AttackKind(enum.Enum):
    """The fifteen attacks, in canonical order.

    Each member carries (identifier, display label, class tag, fine-grained
    flag, required context fields).
    """

    NN_ATTACK = ("nn_attack", "NN_attack", "1.1.1", False, (SHADOW,))
    LOSS_THRESHOLD = ("loss_threshold", "Loss-Threshold", "2.1", False, (SHADOW, LABELS))
    LABEL_ONLY = ("label_only", "Label-only", "2.1", False, (LABELS,))
    TOP3_NN = ("top3_nn", "Top3-NN", "1.1.1", False, (SHADOW,))
    TOP1_THRESHOLD = ("top1_threshold", "Top1-Threshold", "2.1", False, (REFERENCE,))
    BLINDMI_DIFF_W = ("blindmi_diff_w", "BlindMI-Diff-w", "3.1.1", False, (REFERENCE,))
    BLINDMI_DIFF_WO = ("blindmi_diff_wo", "BlindMI-Diff-w/o", "3.1.2", False, ())
    BLINDMI_1CLASS = ("blindmi_1class", "BlindMI-1CLASS", "3.1.3", False, (REFERENCE,))
    TOP2_TRUE = ("top2_true", "Top2+True", "1.1.2", False, (SHADOW, LABELS))
    PRIVACY_RISK = ("privacy_risk_scores", "Privacy risk score", "2.2.1", True, (SHADOW, LABELS))
    SHAPLEY = ("shapley_values", "Shapley values", "2.2.1", True, (SHADOW, LABELS))
    PPV = ("ppv_attack", "PPV", "2.2.2", True, (SHADOW, LABELS))
    CALIBRATED = ("calibrated_score", "Calibrated score", "2.2.2", False, (SHADOW, LABELS, FEATURES))
    DISTILLATION = ("distillation_threshold", "Distillation-based threshold", "2.2.2", False,
                    (SHADOW, LABELS, FEATURES, QUERY))
    LIRA = ("lira", "LiRA", "2.2.2", True, (SHADOW, LABELS))

    def __init__(self, key, label, class_tag, fine_grained, required):
        self.key = key
        self.label = label
        self.class_tag = class_tag
        self.fine_grained = fine_grained
        self.required = required

    @property
    def position(self) -> int:
        return list(AttackKind).index(self)

    @classmethod
    def parse(cls, text: str) -> "AttackKind":
        for kind in cls:
            if text in (kind.key, kind.label, kind.name):
                return kind
        raise KeyError(f"unknown attack {text!r}; known: {[k.key for k in cls]}")


# Attacks that decide by comparing one scalar score against one learned cut.
THRESHOLD_FAMILY = (
    AttackKind.LOSS_THRESHOLD,
    AttackKind.TOP1_THRESHOLD,
    AttackKind.CALIBRATED,
    AttackKind.DISTILLATION,
    AttackKind.LIRA,
)


@dataclass(eq=False)
class AttackContext:
    """What an adversary sees: the samples, never their membership.

    ``target_query`` is black-box access to the target model (features to
    probability vectors). ``memo`` lets callers share shadow-level fits
    between contexts built on the same shadow bundle.
    """

    outputs: np.ndarray
    true_labels: Optional[np.ndarray] = None
    nonmember_reference: Optional[np.ndarray] = None
    shadow: Optional[ShadowBundle] = None
    abstention_ratio: float = 0.0
    seed: int = 0
    features: Optional[np.ndarray] = None
    target_query: Optional[Callable[[np.ndarray], np.ndarray]] = None
    memo: Optional[dict] = field(default=None, repr=False)

    def __post_init__(self):
        self.outputs = np.asarray(self.outputs, dtype=float)
        if self.outputs.ndim != 2:
            raise ValueError("outputs must be an (n, C) array")
        if self.true_labels is not None:
            self.true_labels = np.asarray(self.true_labels, dtype=np.int64)
        if self.nonmember_reference is not None:
            self.nonmember_reference = np.asarray(self.nonmember_reference, dtype=float)
        if self.features is not None:
            self.features = np.asarray(self.features, dtype=float)
        if not 0 <= self.abstention_ratio < 1:
            raise ValueError("abstention_ratio must lie in [0, 1)")

    def __len__(self):
        return self.outputs.shape[0]

    @property
    def class_count(self) -> int:
        return self.outputs.shape[1]

    def rng(self, kind: AttackKind) -> np.random.Generator:
        return np.random.default_rng(derive_seed(self.seed, kind.name))

    def remember(self, key, build):
        if self.memo is None:
            return build()
        if key not in self.memo:
            self.memo[key] = build()
        return self.memo[key]


def require(ctx: AttackContext, kind: AttackKind):
    missing = [name for name in kind.required if getattr(ctx, name) is None]
    if missing:
        raise MissingContextError(f"{kind.label} needs {', '.join(missing)}")
    if LABELS in kind.required and ctx.true_labels.shape != (len(ctx),):
        raise MissingContextError(f"{kind.label} needs one true label per sample")
    if FEATURES in kind.required and ctx.features.shape[0] != len(ctx):
        raise MissingContextError(f"{kind.label} needs one feature row per sample")


@dataclass(eq=False)
class AttackResult:
    """Per-sample scores (higher = more member-like) and decisions.

    When ``sample_thresholds`` is set, decided samples are Member iff their
    score strictly exceeds their own threshold; otherwise ``threshold_used``
    plays that role for every sample. Set-based attacks carry neither.
    """

    kind: AttackKind
    scores: np.ndarray
    decisions: np.ndarray
    threshold_used: Optional[float] = None
    sample_thresholds: Optional[np.ndarray] = None
    converged: bool = True
    flags: Tuple[str, ...] = ()

    def __len__(self):
        return self.scores.shape[0]

    @property
    def abstained(self) -> int:
        return int(np.sum(self.decisions == Decision.ABSTAIN))

    def cut(self) -> Optional[np.ndarray]:
        if self.sample_thresholds is not None:
            return self.sample_thresholds
        if self.threshold_used is not None:
            return np.full(self.scores.shape, self.threshold_used)
        return None


def finish(kind: AttackKind, ctx: AttackContext, scores, threshold=None, sample_thresholds=None, flags=(),
           members=None, converged: bool = True) -> AttackResult:
    """Apply the strict ``score > threshold`` rule, then abstention for fine-grained kinds.

    Set-based attacks pass their ``members`` mask instead of a threshold.
    """
    scores = np.asarray(scores, dtype=float)
    if members is not None:
        cut = None
        decisions = np.where(members, Decision.MEMBER, Decision.NONMEMBER).astype(np.int64)
    else:
        cut = np.asarray(sample_thresholds, dtype=float) if sample_thresholds is not None else np.full(scores.shape, threshold)
        decisions = np.where(scores > cut, Decision.MEMBER, Decision.NONMEMBER).astype(np.int64)
    if scores.size and np.ptp(scores) == 0:
        flags = tuple(flags) + ("constant-scores",)
    result = AttackResult(
        kind, scores, decisions,
        threshold_used=None if threshold is None else float(threshold),
        sample_thresholds=None if sample_thresholds is None else cut,
        converged=converged,
        flags=tuple(flags),
    )
    return with_abstention(result, ctx.abstention_ratio) if kind.fine_grained else result


def with_abstention(result: AttackResult, ratio: float) -> AttackResult:
    """Re-derive decisions of a fine-grained result for another abstention ratio.

    The abstained samples are the ``floor(ratio * n)`` whose scores sit
    closest to their decision threshold.
    """
    if not result.kind.fine_grained:
        raise ValueError(f"{result.kind.label} never abstains")
    cut = result.cut()
    decisions = np.where(result.scores > cut, Decision.MEMBER, Decision.NONMEMBER).astype(np.int64)
    decisions[apply_cv4(result.scores - cut, ratio)] = Decision.ABSTAIN
    return AttackResult(
        result.kind, result.scores, decisions, result.threshold_used, result.sample_thresholds,
        result.converged, result.flags,
    )


# --------------------------------------------------------------------------
# Helpers shared by several attacks


def true_probs(outputs, labels) -> np.ndarray:
    outputs = np.asarray(outputs, dtype=float)
    return outputs[np.arange(outputs.shape[0]), np.asarray(labels, dtype=np.int64)]


def sample_losses(outputs, labels) -> np.ndarray:
    return -np.log(true_probs(outputs, labels) + LOSS_FLOOR)


def shadow_labels(shadow: ShadowBundle) -> np.ndarray:
    return np.asarray(shadow.pool.labels, dtype=np.int64)


def shadow_key(shadow: ShadowBundle, *parts):
    # Shadow fits depend only on the bundle, so they are shared across contexts.
    return (id(shadow), shadow.seed, *parts)


def max_ma_threshold(scores, truth) -> float:
    scores, truth = np.asarray(scores, dtype=float), np.asarray(truth, dtype=bool)
    if truth.all() or not truth.any():
        return float(np.median(scores))
    return threshold_at_max_ma(scores, truth)[0]


def per_class_thresholds(scores, truth, labels, class_count: int) -> np.ndarray:
    """Max-MA threshold per class; classes without both outcomes use the global one."""
    scores, truth, labels = np.asarray(scores, float), np.asarray(truth, bool), np.asarray(labels, np.int64)
    fallback = max_ma_threshold(scores, truth)
    out = np.full(class_count, fallback)
    for c in np.unique(labels):
        m = labels == c
        if truth[m].any() and not truth[m].all():
            out[c] = threshold_at_max_ma(scores[m], truth[m])[0]
    return out


def calibration_split(shadow: ShadowBundle):
    """Shadow 0 plays the target; the rest are its references."""
    if len(shadow) < 2:
        raise MissingContextError("calibration needs at least two shadow models")
    return 0, np.arange(1, len(shadow))


ATTACKS: Dict[AttackKind, Callable[[AttackContext], AttackResult]] = {}


def register(kind: AttackKind):
    def wrap(fn):
        def run(ctx: AttackContext, **options) -> AttackResult:
            require(ctx, kind)
            return fn(ctx, **options)

        run.__name__ = fn.__name__
        run.__doc__ = fn.__doc__
        run.kind = kind
        ATTACKS[kind] = run
        return run

    return wrap


def run_attack(kind: AttackKind, ctx: AttackContext, **options) -> AttackResult:
    return ATTACKS[kind](ctx, **options)
