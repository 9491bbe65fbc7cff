"""Evaluation metrics for membership decisions and scores.

Abstained samples are excluded from every rate, including the ROC curve:
an attack is only judged on the samples it chose to decide.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional, Sequence, Tuple

import numpy as np

from .errors import DegenerateTruthError, LengthError, NoDecisionsError

FPR_FLOOR = 1e-4
TPR_LEVELS = (1e-2, 1e-3)


class Decision(enum.IntEnum):
    NONMEMBER = 0
    MEMBER = 1
    ABSTAIN = -1


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int
    abstained: int = 0

    @property
    def decided(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def n(self) -> int:
        return self.decided + self.abstained


def confusion(decisions, truth) -> ConfusionCounts:
    d = np.asarray(decisions, dtype=np.int64)
    t = np.asarray(truth, dtype=bool)
    if d.shape != t.shape:
        raise LengthError(f"{d.size} decisions for {t.size} ground-truth flags")
    member, nonmember = d == Decision.MEMBER, d == Decision.NONMEMBER
    return ConfusionCounts(
        tp=int(np.sum(member & t)),
        fp=int(np.sum(member & ~t)),
        tn=int(np.sum(nonmember & ~t)),
        fn=int(np.sum(nonmember & t)),
        abstained=int(np.sum(d == Decision.ABSTAIN)),
    )


def _ratio(num, den, name, flags):
    if den == 0:
        flags.append(name)
        return 0.0
    return num / den


@dataclass(frozen=True)
class BasicMetrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    fnr: float
    fpr: float
    ma: float
    degenerate: Tuple[str, ...] = ()


def basic_metrics(c: ConfusionCounts) -> BasicMetrics:
    if c.decided == 0:
        raise NoDecisionsError("every sample abstained")
    flags = []
    precision = _ratio(c.tp, c.tp + c.fp, "precision", flags)
    recall = _ratio(c.tp, c.tp + c.fn, "recall", flags)
    fpr = _ratio(c.fp, c.fp + c.tn, "fpr", flags)
    f1 = _ratio(2 * precision * recall, precision + recall, "f1", flags)
    return BasicMetrics(
        accuracy=(c.tp + c.tn) / c.decided,
        precision=precision,
        recall=recall,
        f1=f1,
        fnr=1.0 - recall,
        fpr=fpr,
        ma=recall - fpr,
        degenerate=tuple(flags),
    )


def rates_from_percent(tpr_percent: float, fpr_percent: float, scale: int = 10_000) -> BasicMetrics:
    """Metrics of a balanced confusion table that realizes the given percentages."""
    pos = neg = scale
    tp = round(tpr_percent / 100 * pos)
    fp = round(fpr_percent / 100 * neg)
    return basic_metrics(ConfusionCounts(tp=tp, fp=fp, tn=neg - fp, fn=pos - tp))


@dataclass(frozen=True, eq=False)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray  # point i predicts member for score >= thresholds[i]; first is +inf


def _check_truth(scores, truth):
    s = np.asarray(scores, dtype=float)
    t = np.asarray(truth, dtype=bool)
    if s.shape != t.shape:
        raise LengthError(f"{s.size} scores for {t.size} ground-truth flags")
    if t.all() or not t.any():
        raise DegenerateTruthError("ground truth holds a single class")
    return s, t


def roc(scores, truth) -> RocCurve:
    """Step ROC from sweeping every distinct score, highest first.

    Samples sharing a score enter the positive set together.
    """
    s, t = _check_truth(scores, truth)
    order = np.argsort(-s, kind="stable")
    s, t = s[order], t[order]
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tps = np.cumsum(t)[last]
    fps = np.cumsum(~t)[last]
    return RocCurve(
        fpr=np.r_[0.0, fps / (~t).sum()],
        tpr=np.r_[0.0, tps / t.sum()],
        thresholds=np.r_[np.inf, s[last]],
    )


def auc(curve: RocCurve) -> float:
    return float(np.trapezoid(curve.tpr, curve.fpr))


def auc_log(curve: RocCurve, fpr_floor: float = FPR_FLOOR) -> float:
    """Area under TPR against log10(FPR) on [fpr_floor, 1], divided by the domain width.

    The curve is linear between its points in FPR space; the value at the
    floor is interpolated there, the rest is trapezoidal in log space.
    """
    fpr, tpr = curve.fpr, curve.tpr
    k = int(np.searchsorted(fpr, fpr_floor, side="left"))
    # The segment [k-1, k] straddles the floor.
    if k == 0:
        start = tpr[0]
    elif k == fpr.size:
        start = tpr[-1]
    else:
        x0, x1, y0, y1 = fpr[k - 1], fpr[k], tpr[k - 1], tpr[k]
        start = y1 if x1 == x0 else y0 + (y1 - y0) * (fpr_floor - x0) / (x1 - x0)
    xs = np.r_[math.log10(fpr_floor), np.log10(fpr[k:])]
    ys = np.r_[start, tpr[k:]]
    width = -math.log10(fpr_floor)
    return float(np.trapezoid(ys, xs) / width)


def tpr_at_fpr(curve: RocCurve, fpr_level: float) -> float:
    """TPR of the last curve point whose FPR does not exceed ``fpr_level``."""
    if not 0 < fpr_level <= 1:
        raise ValueError("fpr_level must lie in (0, 1]")
    k = int(np.searchsorted(curve.fpr, fpr_level, side="right")) - 1
    return float(curve.tpr[k])


def threshold_at_max_ma(scores, truth) -> Tuple[float, float]:
    """Threshold ``tau`` maximizing TPR - FPR for the rule ``score > tau``.

    Candidates are the distinct scores; ties go to the smaller threshold.
    """
    s, t = _check_truth(scores, truth)
    uniq = np.unique(s)
    order = np.argsort(s, kind="stable")
    ss, tt = s[order], t[order]
    # Members above uniq[j] are everything right of the last occurrence of uniq[j].
    right = np.searchsorted(ss, uniq, side="right")
    pos_above = t.sum() - np.r_[0, np.cumsum(tt)][right]
    neg_above = (~t).sum() - np.r_[0, np.cumsum(~tt)][right]
    ma = pos_above / t.sum() - neg_above / (~t).sum()
    j = int(np.argmax(ma))  # first maximum = smallest threshold
    return float(uniq[j]), float(ma[j])


@dataclass(frozen=True)
class MetricReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    fnr: float
    fpr: float
    ma: float
    auc: float
    auc_log: float
    tpr_at_fpr: Dict[float, float]
    threshold_at_max_ma: Optional[float]
    abstained: int
    decided: int
    degenerate: Tuple[str, ...] = field(default=())


def evaluate(scores, decisions, truth, tpr_levels: Sequence[float] = TPR_LEVELS) -> MetricReport:
    """Full report over the decided samples of one attack result."""
    s = np.asarray(scores, dtype=float)
    d = np.asarray(decisions, dtype=np.int64)
    t = np.asarray(truth, dtype=bool)
    c = confusion(d, t)
    b = basic_metrics(c)
    keep = d != Decision.ABSTAIN
    flags = list(b.degenerate)
    try:
        if not np.all(np.isfinite(s[keep])):
            raise DegenerateTruthError("non-finite scores")
        curve = roc(s[keep], t[keep])
        lin, logv = auc(curve), auc_log(curve)
        tprs = {lvl: tpr_at_fpr(curve, lvl) for lvl in tpr_levels}
        thr, _ = threshold_at_max_ma(s[keep], t[keep])
    except DegenerateTruthError:
        flags.append("roc")
        lin = logv = float("nan")
        tprs = {lvl: float("nan") for lvl in tpr_levels}
        thr = None
    return MetricReport(
        accuracy=b.accuracy, precision=b.precision, recall=b.recall, f1=b.f1, fnr=b.fnr, fpr=b.fpr, ma=b.ma,
        auc=lin, auc_log=logv, tpr_at_fpr=tprs, threshold_at_max_ma=thr,
        abstained=c.abstained, decided=c.decided, degenerate=tuple(flags),
    )


def mean_and_stderr(values: Iterable[float]) -> Tuple[float, float]:
    v = np.asarray([x for x in values if not (isinstance(x, float) and math.isnan(x))], dtype=float)
    if v.size == 0:
        return float("nan"), float("nan")
    if v.size == 1:
        return float(v[0]), 0.0
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size))
