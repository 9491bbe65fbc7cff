"""Membership inference attacks behind one context/result interface."""

from .base import (
    ATTACKS,
    THRESHOLD_FAMILY,
    AttackContext,
    AttackKind,
    AttackResult,
    run_attack,
    with_abstention,
)
from .blindmi import blindmi_1class, blindmi_diff_w, blindmi_diff_wo, differential_split
from .finegrained import knn_shapley, lira, ppv_attack, privacy_risk_scores, shapley_values
from .learned import label_only, nn_attack, top2_true, top3_nn
from .thresholds import calibrated_score, distillation_threshold, loss_threshold, top1_threshold

__all__ = [
    "ATTACKS",
    "THRESHOLD_FAMILY",
    "AttackContext",
    "AttackKind",
    "AttackResult",
    "blindmi_1class",
    "blindmi_diff_w",
    "blindmi_diff_wo",
    "calibrated_score",
    "differential_split",
    "distillation_threshold",
    "knn_shapley",
    "label_only",
    "lira",
    "loss_threshold",
    "nn_attack",
    "ppv_attack",
    "privacy_risk_scores",
    "run_attack",
    "shapley_values",
    "top1_threshold",
    "top2_true",
    "top3_nn",
    "with_abstention",
]
