"""Set-comparison attacks against a nonmember reference."""

from __future__ import annotations

import numpy as np

from ..mmd import NormMode, kernel_matrix, median_heuristic
from ..scenarios import TRANSFORM_NOISE, _deltas, generate_nonmembers
from ..models import softmax
from .base import AttackContext, AttackKind, AttackResult, finish, register

MAX_ITERS = 20
ONE_CLASS_PERCENTILE = 95.0
TOP = 3


def ranked_outputs(outputs, top: int = TOP) -> np.ndarray:
    """Largest ``top`` probabilities, descending: a class-agnostic view of each output."""
    return -np.sort(-np.asarray(outputs, float), axis=1)[:, :top]


def differential_split(samples, reference, max_iters: int = MAX_ITERS, norm_mode: NormMode = NormMode.UNSQUARED):
    """Move samples whose departure widens the MMD gap into the nonmember set.

    Each pass computes the differential distance of every sample still in the
    target set against the current nonmember set and moves all with a
    positive value at once. Returns (still-in-target mask, last differential
    distance per sample, converged).
    """
    samples, reference = np.asarray(samples, float), np.asarray(reference, float)
    n = samples.shape[0]
    both = np.vstack([samples, reference])
    k = kernel_matrix(both, both, median_heuristic(samples, reference), norm_mode)
    diag = np.diag(k)
    in_target = np.r_[np.ones(n, bool), np.zeros(reference.shape[0], bool)]
    delta = np.zeros(n)
    converged = False

    def current():
        t, o = np.flatnonzero(in_target), np.flatnonzero(~in_target)
        row_t = k[np.ix_(t, t)].sum(axis=1)
        row_n = k[np.ix_(t, o)].sum(axis=1)
        d = _deltas(row_t, row_n, diag[t], row_t.sum(), k[np.ix_(o, o)].sum(), row_n.sum(), t.size, o.size)
        return t, d

    for _ in range(max_iters):
        if in_target[:n].sum() < 2:
            converged = True
            break
        t, d = current()
        delta[t] = d
        move = d > 0
        if not move.any():
            converged = True
            break
        if move.all():
            move[int(np.argmin(d))] = False  # the target set never empties
        in_target[t[move]] = False
    else:
        if in_target[:n].sum() >= 2:
            t, d = current()
            delta[t] = d
            converged = not (d > 0).any()
    return in_target[:n].copy(), delta, converged


def _blindmi(kind: AttackKind, ctx: AttackContext, reference, max_iters: int, flags=()) -> AttackResult:
    member, delta, converged = differential_split(ranked_outputs(ctx.outputs), ranked_outputs(reference), max_iters)
    flags = tuple(flags)
    if member.all() or member.sum() <= 1:  # the split never empties the target side
        flags += ("trivial-split",)
    return finish(kind, ctx, -delta, flags=flags, members=member, converged=converged)


@register(AttackKind.BLINDMI_DIFF_W)
def blindmi_diff_w(ctx: AttackContext, max_iters: int = MAX_ITERS) -> AttackResult:
    return _blindmi(AttackKind.BLINDMI_DIFF_W, ctx, ctx.nonmember_reference, max_iters)


class _QueryModel:
    def __init__(self, query):
        self.predict_proba = query


def transform_reference(ctx: AttackContext, noise_scale: float = TRANSFORM_NOISE) -> np.ndarray:
    """Self-generated nonmembers: perturbed copies of the context's own samples.

    With features and query access the perturbation is applied to the
    inputs and the target is queried; otherwise the output logits are
    perturbed directly.
    """
    seed = int(ctx.rng(AttackKind.BLINDMI_DIFF_WO).integers(2**32))
    if ctx.features is not None and ctx.target_query is not None:
        made = generate_nonmembers(_QueryModel(ctx.target_query), None, "Transform", len(ctx), seed,
                                   base_features=ctx.features, noise_scale=noise_scale)
        return made.outputs
    rng = np.random.default_rng(seed)
    logits = np.log(ctx.outputs + 1e-12)
    return softmax(logits + rng.normal(size=logits.shape) * noise_scale)


@register(AttackKind.BLINDMI_DIFF_WO)
def blindmi_diff_wo(ctx: AttackContext, max_iters: int = MAX_ITERS, noise_scale: float = TRANSFORM_NOISE) -> AttackResult:
    reference = transform_reference(ctx, noise_scale)
    flags = ("reference-equals-samples",) if np.allclose(reference, ctx.outputs) else ()
    return _blindmi(AttackKind.BLINDMI_DIFF_WO, ctx, reference, max_iters, flags)


@register(AttackKind.BLINDMI_1CLASS)
def blindmi_1class(ctx: AttackContext, percentile: float = ONE_CLASS_PERCENTILE) -> AttackResult:
    """Member iff the output lies outside the ball holding most of the reference."""
    ref = ranked_outputs(ctx.nonmember_reference)
    center = ref.mean(axis=0)
    radius = float(np.percentile(np.linalg.norm(ref - center, axis=1), percentile))
    scores = np.linalg.norm(ranked_outputs(ctx.outputs) - center, axis=1)
    return finish(AttackKind.BLINDMI_1CLASS, ctx, scores, threshold=radius)
