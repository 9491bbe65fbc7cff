"""The twelve acceptance criteria, each at its stated tolerance.

Every test records one PASS/FAIL line, printed together at the end of the
session. Criteria 7, 8 and 12 train many models and take minutes.
"""

import math
import time
from pathlib import Path

import numpy as np
import pytest

from mia_bench.attacks import AttackKind, THRESHOLD_FAMILY, run_attack
from mia_bench.bench import (
    QUICK_RUNS,
    RunRecord,
    build_context,
    detect_rank_flips,
    group_scenarios,
    summarize_flip_causes,
    sweep_cv,
)
from mia_bench.cli import main
from mia_bench.metrics import auc, evaluate, rates_from_percent, roc, threshold_at_max_ma
from mia_bench.mmd import MmdConfig, NormMode, mmd, mmd_brute_oracle
from mia_bench.models import ground_truth
from mia_bench.presets import MATRIX_PRESETS, PRESETS, get_preset
from mia_bench.scenarios import (
    Bernoulli,
    EvaluationScenario,
    Normal,
    Uniform,
    build_scenario_matrix,
    ks_pvalue,
    materialize_scenario,
    read_matrix,
)
from mia_bench.world import build_world

from .helpers import balanced_truth, prob_batch, verdict
from .test_metrics import max_ma_oracle

SEED = 2024
GOLDEN = Path(__file__).parent / "fixtures" / "cifar100_scenarios.csv"
FIXTURE_PRESETS = (*MATRIX_PRESETS, "overfit")


@pytest.fixture(scope="module")
def instances():
    """Run-0 world and every distinct (CV1, CV2, CV3) instance of each preset."""
    out = {}
    for name in FIXTURE_PRESETS:
        world = build_world(get_preset(name), 0, SEED)
        seen = {}
        for s in build_scenario_matrix(get_preset(name)):
            key = (s.cv1, s.cv2, s.cv3)
            if key not in seen:
                seen[key] = materialize_scenario(s, world, world.seed("construct"))
        out[name] = (world, list(seen.values()))
    return out


def test_criterion_01_mmd_oracle():
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    worst = 0.0
    for i in range(200):
        dim = int(rng.integers(2, 11))
        a = prob_batch(rng, int(rng.integers(1, 21)), dim)
        b = prob_batch(rng, int(rng.integers(1, 21)), dim)
        cfg = MmdConfig(None, (NormMode.UNSQUARED, NormMode.SQUARED)[i % 2])
        worst = max(worst, abs(mmd(a, b, cfg) - mmd_brute_oracle(a, b, cfg)))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-9 and elapsed < 10
    assert verdict(1, ok, f"MMD vs brute oracle: max |diff| {worst:.2e} over 200 pairs in {elapsed:.2f} s")


def test_criterion_02_metric_identities():
    ma = rates_from_percent(97.44, 34.39).ma
    fnr = rates_from_percent(73.00, 10.0).fnr
    ok = round(100 * ma, 2) == 63.05 and abs(ma - 0.6305) <= 1e-12 and round(100 * fnr, 2) == 27.00 and abs(fnr - 0.27) <= 1e-12
    assert verdict(2, ok, f"MA {100 * ma:.2f}% from 97.44/34.39; FNR {100 * fnr:.2f}% from recall 73.00")


def test_criterion_03_matrix_fidelity():
    got = build_scenario_matrix(get_preset("CIFAR100"))
    first, last = got[0], got[-1]
    total = sum(len(build_scenario_matrix(get_preset(n))) for n in MATRIX_PRESETS)
    ok = (got == read_matrix(GOLDEN) and len(got) == 84 and total == 588
          and (first.cv1, first.cv2, first.cv3, first.cv4) == ("Normal", 2.893, 0.085, 0.2)
          and (last.cv1, last.cv2, last.cv3, last.cv4) == ("Bernoulli", 4.325, 0.157, 0.49))
    assert verdict(3, ok, f"CIFAR100 {len(got)} scenarios match the fixture; {total} across {len(MATRIX_PRESETS)} presets")


def _distribution_ok(inst):
    kind, values = inst.cv1_kind, inst.group_values
    if isinstance(kind, Normal):
        return ks_pvalue(values, kind) > 0.01
    if isinstance(kind, Uniform):
        counts, _ = np.histogram(values, bins=np.linspace(kind.a, kind.b, kind.gamma + 1))
        return counts.sum() == values.size and len(set(counts.tolist())) == 1
    if isinstance(kind, Bernoulli):
        return abs(np.mean(values > kind.epsilon) - kind.p) <= 1 / values.size
    return False


def test_criterion_04_distribution_construction(instances):
    checked, bad = 0, []
    for name, (_, items) in instances.items():
        for inst in items:
            checked += 1
            if not _distribution_ok(inst):
                bad.append((name, inst.scenario.scenario_id))
            kind = inst.cv1_kind
            if name == "CIFAR100" and isinstance(kind, Bernoulli) and kind.p == 0.5 and kind.epsilon != 3.778:
                bad.append((name, "threshold"))
    threshold = get_preset("CIFAR100").bernoulli_threshold(0.5)
    ok = not bad and threshold == 3.778
    assert verdict(4, ok, f"{checked} instances over {len(instances)} presets, {len(bad)} violations; CIFAR100 p=0.5 threshold {threshold}")


def test_criterion_05_label_only_identity(instances):
    worst, count = 0.0, 0
    for world, items in instances.values():
        for inst in items:
            r = run_attack(AttackKind.LABEL_ONLY, build_context(inst, world, 1, 0.0))
            ts = inst.target_subset
            truth = ground_truth(ts)
            correct = ts.outputs.argmax(axis=1) == ts.labels
            ma = evaluate(r.scores, r.decisions, truth).ma
            worst = max(worst, abs(ma - (correct[truth].mean() - correct[~truth].mean())))
            count += 1
    assert verdict(5, worst <= 1e-12, f"label-only MA identity on {count} fixtures, max deviation {worst:.1e}")


def test_criterion_06_threshold_oracle():
    rng = np.random.default_rng(6)
    agree = 0
    for _ in range(100):
        n = int(rng.integers(4, 50))
        truth = rng.permutation(balanced_truth(n)).astype(bool)
        scores = np.round(rng.normal(size=n) + truth, 1)
        got = threshold_at_max_ma(scores, truth)
        want = max_ma_oracle(scores.tolist(), truth.tolist())
        agree += got[0] == want[0] and abs(got[1] - want[1]) <= 1e-12
    assert verdict(6, agree == 100, f"threshold_at_max_ma agrees with exhaustive cuts on {agree}/100 instances")


@pytest.mark.slow
def test_criterion_07_cv2_monotonicity():
    p = get_preset("overfit")
    start = time.perf_counter()
    blocks = []
    for cv1 in ("Normal", "Uniform", "Bernoulli"):
        base = EvaluationScenario("C7", "overfit", cv1, p.cv2_levels[1], p.cv3_levels[1], p.cv4_ratios[0])
        sw = sweep_cv("overfit", "CV2", p.cv2_levels, base, THRESHOLD_FAMILY, 10, SEED)
        blocks.append(sw.family_mean())
    elapsed = time.perf_counter() - start
    pooled = np.nanmean(blocks, axis=0)
    steps = np.diff(pooled)
    drops = steps[steps < 0]
    ok = drops.size <= 1 and (drops.size == 0 or -drops[0] <= 0.01) and elapsed <= 600
    detail = " ".join(f"{lv}:{v:.4f}" for lv, v in zip(p.cv2_levels, pooled))
    assert verdict(7, ok, f"threshold-family mean MA by CV2 level {detail}; {drops.size} drop(s); {elapsed:.0f} s")


@pytest.mark.slow
def test_criterion_08_cv3_dominance():
    p = get_preset("overfit")
    base = EvaluationScenario("C8", "overfit", "Normal", p.cv2_levels[1], p.cv3_levels[1], p.cv4_ratios[0])
    kinds = tuple(AttackKind)
    ranges = {}
    means = {}
    for cv, mid in (("CV2", base.cv2), ("CV3", base.cv3)):
        sw = sweep_cv("overfit", cv, (mid - 0.1, mid, mid + 0.1), base, kinds, QUICK_RUNS, SEED)
        ranges[cv] = sw.attack_ranges()
        means[cv] = float(np.nanmean(ranges[cv]))
    r2, r3 = float(np.nanmax(ranges["CV2"])), float(np.nanmax(ranges["CV3"]))
    ok = r3 >= r2
    assert verdict(8, ok, f"largest per-attack MA range: CV3 {r3:.4f} vs CV2 {r2:.4f} (ratio {r3 / r2:.2f}); "
                          f"mean per-attack range CV3 {means['CV3']:.4f} vs CV2 {means['CV2']:.4f}")


def test_criterion_09_abstention(instances):
    violations, checked = [], 0
    for name, (world, items) in instances.items():
        inst = items[0]
        ratios = get_preset(name).cv4_ratios
        memo = {}
        for ratio in ratios:
            ctx = build_context(inst, world, 3, ratio, memo)
            n = len(ctx)
            for kind in AttackKind:
                if not kind.fine_grained and ratio != ratios[0]:
                    continue
                r = run_attack(kind, ctx)
                want = math.floor(ratio * n) if kind.fine_grained else 0
                checked += 1
                if r.abstained != want:
                    violations.append((name, kind.key, ratio, r.abstained, want))
    assert verdict(9, not violations, f"{checked} (preset, attack, ratio) checks, {len(violations)} wrong abstention counts")


def test_criterion_10_auc_sanity():
    rng = np.random.default_rng(10)
    truth = balanced_truth(10_000, rng)
    random_auc = auc(roc(rng.random(10_000), truth))
    perfect = auc(roc(truth.astype(float), truth))
    ok = 0.48 <= random_auc <= 0.52 and perfect == 1.0
    assert verdict(10, ok, f"random-score AUC {random_auc:.4f}; perfect-score AUC {perfect}")


def test_criterion_11_flip_detection():
    low, high = ("Normal", 2.893, 0.085, 0.2), ("Normal", 2.893, 0.119, 0.2)
    recs = [RunRecord("ES01", "CIFAR100", *low, attack="nn_attack", run=0, ma=0.6),
            RunRecord("ES01", "CIFAR100", *low, attack="label_only", run=0, ma=0.4),
            RunRecord("ES04", "CIFAR100", *high, attack="nn_attack", run=0, ma=0.3),
            RunRecord("ES04", "CIFAR100", *high, attack="label_only", run=0, ma=0.5)]
    groups = group_scenarios([EvaluationScenario("ES01", "CIFAR100", *low), EvaluationScenario("ES04", "CIFAR100", *high)])
    flips = detect_rank_flips(recs, groups)
    shares = summarize_flip_causes(flips) if flips else None
    ok = len(flips) == 1 and flips[0].mr_cv == "CV3" and shares == (0.0, 0.0, 1.0, 0.0)
    assert verdict(11, ok, f"{len(flips)} flip(s), MR={flips[0].mr_cv if flips else '-'}, shares {shares}")


@pytest.mark.slow
def test_criterion_12_determinism(tmp_path):
    base = ["--seed", str(SEED)]
    assert main(["gen-data", *base, "--out", str(tmp_path / "a")]) == 0
    assert main(["build-scenarios", *base, "--out", str(tmp_path / "a")]) == 0
    (tmp_path / "b").mkdir()
    (tmp_path / "b" / "scenarios").symlink_to(tmp_path / "a" / "scenarios")
    times = []
    for out in ("a", "b"):
        start = time.perf_counter()
        assert main(["run", *base, "--quick", "--out", str(tmp_path / out)]) == 0
        times.append(time.perf_counter() - start)
    a, b = (tmp_path / "a" / "results.csv").read_bytes(), (tmp_path / "b" / "results.csv").read_bytes()
    rows = a.count(b"\n") - 1
    failed = (tmp_path / "a" / "results.errors.csv").read_bytes().count(b"\n") - 1
    total = sum(times)
    ok = a == b and rows == 588 * 15 * QUICK_RUNS and total <= 3600
    assert verdict(12, ok, f"two quick runs byte-identical: {a == b}; {rows} rows, {failed} failed; "
                           f"{times[0] / 60:.1f} + {times[1] / 60:.1f} min on one core")
