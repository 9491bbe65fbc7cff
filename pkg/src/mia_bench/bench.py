"""Benchmark orchestration: attacks x scenarios x runs, grouping, ranking and rank flips."""

from __future__ import annotations

import csv
import itertools
import logging
import math
import time
import warnings
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .attacks.base import REFERENCE
from .attacks import AttackContext, AttackKind, AttackResult, run_attack, with_abstention
from .errors import DegenerateTruthError, EmptyInputError, InfeasibleDistributionError
from .metrics import evaluate, mean_and_stderr, roc
from .mmd import NormMode
from .models import ground_truth
from .presets import PRESETS, DatasetPreset, get_preset
from .scenarios import CV1_KINDS, EvaluationScenario, ScenarioInstance, materialize_scenario
from .seeding import derive_seed
from .world import World, build_world

log = logging.getLogger(__name__)

CVS = ("CV1", "CV2", "CV3", "CV4")
METRICS = ("accuracy", "precision", "recall", "f1", "fnr", "fpr", "ma", "auc", "auc_log", "tpr_at_1e-2", "tpr_at_1e-3")
RESULTS_HEADER = (
    "scenario_id", "dataset_id", "cv1", "cv2", "cv3", "cv4", "attack", "run",
    *METRICS, "threshold_max_ma", "abstained", "converged", "seed",
)
ERRORS_HEADER = ("scenario_id", "dataset_id", "attack", "run", "error")
FLIPS_HEADER = ("attack_a", "attack_b", "scenario_a", "scenario_b", "metric", "mr_cv")
ROC_HEADER = ("scenario_id", "dataset_id", "attack", "fpr", "tpr", "threshold")
ROC_GRID = tuple(float(x) for x in np.logspace(-4, 0, 25))
DEFAULT_RUNS = 10
QUICK_RUNS = 3


@dataclass(frozen=True)
class RunRecord:
    scenario_id: str
    dataset_id: str
    cv1: str
    cv2: float
    cv3: float
    cv4: float
    attack: str
    run: int
    accuracy: float = math.nan
    precision: float = math.nan
    recall: float = math.nan
    f1: float = math.nan
    fnr: float = math.nan
    fpr: float = math.nan
    ma: float = math.nan
    auc: float = math.nan
    auc_log: float = math.nan
    tpr_at_1e2: float = math.nan
    tpr_at_1e3: float = math.nan
    threshold_max_ma: Optional[float] = None
    abstained: int = 0
    converged: bool = False
    seed: int = 0
    error: Optional[str] = None
    wall_time: float = field(default=0.0, compare=False)

    @property
    def key(self):
        return (self.dataset_id, self.scenario_id, self.attack, self.run)

    @property
    def kind(self) -> AttackKind:
        return AttackKind.parse(self.attack)

    def metric(self, name: str) -> float:
        return getattr(self, _ATTR.get(name, name))

    def same_as(self, other: "RunRecord") -> bool:
        """Field-wise equality that treats NaN as equal to NaN."""
        for f in fields(self):
            if not f.compare:
                continue
            a, b = getattr(self, f.name), getattr(other, f.name)
            if isinstance(a, float) and isinstance(b, float) and math.isnan(a) and math.isnan(b):
                continue
            if a != b:
                return False
        return True


_ATTR = {"tpr_at_1e-2": "tpr_at_1e2", "tpr_at_1e-3": "tpr_at_1e3"}


def _scenario_fields(s: EvaluationScenario) -> dict:
    return dict(scenario_id=s.scenario_id, dataset_id=s.dataset_id, cv1=s.cv1, cv2=s.cv2, cv3=s.cv3, cv4=s.cv4)


def record_from_result(scenario: EvaluationScenario, result: AttackResult, truth, run: int, seed: int,
                       wall_time: float = 0.0) -> RunRecord:
    rep = evaluate(result.scores, result.decisions, truth)
    return RunRecord(
        **_scenario_fields(scenario), attack=result.kind.key, run=run,
        accuracy=rep.accuracy, precision=rep.precision, recall=rep.recall, f1=rep.f1, fnr=rep.fnr, fpr=rep.fpr,
        ma=rep.ma, auc=rep.auc, auc_log=rep.auc_log,
        tpr_at_1e2=rep.tpr_at_fpr[1e-2], tpr_at_1e3=rep.tpr_at_fpr[1e-3],
        threshold_max_ma=rep.threshold_at_max_ma, abstained=rep.abstained, converged=result.converged,
        seed=seed, wall_time=wall_time,
    )


def failed_record(scenario: EvaluationScenario, kind: AttackKind, run: int, seed: int, exc: BaseException) -> RunRecord:
    return RunRecord(**_scenario_fields(scenario), attack=kind.key, run=run, seed=seed,
                     error=f"{type(exc).__name__}: {exc}")


def roc_points(result: AttackResult, truth, grid: Sequence[float] = ROC_GRID) -> List[Tuple[float, float, float]]:
    """(fpr level, tpr, threshold) on a log-spaced FPR grid over the decided samples."""
    keep = result.decisions >= 0
    curve = roc(result.scores[keep], np.asarray(truth)[keep])
    out = []
    for level in grid:
        k = int(np.searchsorted(curve.fpr, level, side="right")) - 1
        out.append((float(level), float(curve.tpr[k]), float(curve.thresholds[k])))
    return out


# --------------------------------------------------------------------------
# Execution


def attack_seed(master_seed: int, instance: ScenarioInstance, run: int, kind: AttackKind) -> int:
    # CV4 only decides abstention and CV3 only picks the reference, so siblings
    # an attack cannot tell apart share one attack stream.
    s = instance.scenario
    cv3 = float(s.cv3) if REFERENCE in kind.required else "any"
    return derive_seed(master_seed, s.dataset_id, s.cv1, float(s.cv2), cv3, run, kind.key)


def build_context(instance: ScenarioInstance, world: World, seed: int, ratio: float, memo: Optional[dict] = None) -> AttackContext:
    """The attack-facing view of an instance: no membership flags cross this line."""
    ts = instance.target_subset
    return AttackContext(
        outputs=ts.outputs.copy(),
        true_labels=ts.labels.copy(),
        nonmember_reference=instance.nonmember_reference.outputs.copy(),
        shadow=world.shadow,
        abstention_ratio=ratio,
        seed=seed,
        features=ts.features.copy(),
        target_query=world.model.predict_proba,
        memo=memo,
    )


class Bench:
    """Runs scenarios on one world at a time, reusing results where CV4 cannot matter."""

    def __init__(self, master_seed: int, kinds: Optional[Sequence[AttackKind]] = None,
                 norm_mode: NormMode = NormMode.UNSQUARED, collect_roc: bool = False,
                 presets: Optional[Mapping[str, DatasetPreset]] = None, sigma: Optional[float] = None):
        self.master_seed = master_seed
        self.sigma = sigma
        self.presets = dict(presets) if presets else None
        self.kinds = tuple(kinds) if kinds else tuple(AttackKind)
        self.norm_mode = norm_mode
        self.collect_roc = collect_roc
        self.roc_rows: List[tuple] = []
        self._world: Optional[World] = None
        self._memo: dict = {}
        self._results: dict = {}

    def world(self, preset_name: str, run: int) -> World:
        key = (preset_name, run, self.master_seed)
        if self._world is None or self._world.key != key:
            self._world = None
            self._memo, self._results = {}, {}
            preset = self.presets[preset_name] if self.presets and preset_name in self.presets else get_preset(preset_name)
            self._world = build_world(preset, run, self.master_seed, self.norm_mode, self.sigma)
        return self._world

    def _result(self, world: World, instance: ScenarioInstance, run: int, kind: AttackKind) -> Tuple[AttackResult, int]:
        key = (instance.instance_key, kind)
        if key not in self._results:
            seed = attack_seed(self.master_seed, instance, run, kind)
            ctx = build_context(instance, world, seed, 0.0, self._memo)
            self._results[key] = (run_attack(kind, ctx), seed)
        result, seed = self._results[key]
        if kind.fine_grained:
            result = with_abstention(result, instance.scenario.cv4)
        return result, seed

    def run_scenario(self, scenario: EvaluationScenario, run: int) -> List[RunRecord]:
        world = self.world(scenario.dataset_id, run)
        try:
            instance = materialize_scenario(scenario, world, world.seed("construct"))
        except InfeasibleDistributionError as exc:
            log.warning("%s", exc)
            return [failed_record(scenario, k, run, 0, exc) for k in self.kinds]
        truth = ground_truth(instance.target_subset)
        records = []
        for kind in self.kinds:
            start = time.perf_counter()
            seed = attack_seed(self.master_seed, instance, run, kind)
            try:
                result, seed = self._result(world, instance, run, kind)
                records.append(record_from_result(scenario, result, truth, run, seed, time.perf_counter() - start))
            except Exception as exc:  # recorded per record, never aborts the batch
                log.warning("%s/%s run %d: %s", scenario.scenario_id, kind.key, run, exc)
                records.append(failed_record(scenario, kind, run, seed, exc))
                continue
            if self.collect_roc and run == 0:
                self._keep_roc(scenario, kind, result, truth)
        return records

    def _keep_roc(self, scenario, kind, result, truth):
        try:
            points = roc_points(result, truth)
        except DegenerateTruthError:
            return
        for fpr, tpr, thr in points:
            self.roc_rows.append((scenario.scenario_id, scenario.dataset_id, kind.key, fpr, tpr, thr))


def _world_task(args):
    preset_name, run, scenarios, master_seed, kinds, norm_mode, collect_roc, presets, sigma = args
    bench = Bench(master_seed, kinds, norm_mode, collect_roc, presets, sigma)
    records = []
    for s in scenarios:
        records.extend(bench.run_scenario(s, run))
    log.info("%s run %d: %d records", preset_name, run, len(records))
    return records, bench.roc_rows


def run_benchmark(scenarios: Sequence[EvaluationScenario], runs: int, master_seed: int,
                  kinds: Optional[Sequence[AttackKind]] = None, norm_mode: NormMode = NormMode.UNSQUARED,
                  workers: int = 1, collect_roc: bool = False, presets: Optional[Mapping[str, DatasetPreset]] = None,
                  sigma: Optional[float] = None):
    """Every (scenario, attack, run) record, sorted; plus ROC points when asked.

    Work is split by (dataset, run) world; worlds are independent, so any
    worker count yields the same records.
    """
    if runs < 1:
        raise ValueError("runs must be positive")
    by_dataset: Dict[str, List[EvaluationScenario]] = defaultdict(list)
    for s in scenarios:
        by_dataset[s.dataset_id].append(s)
    tasks = [(name, run, tuple(items), master_seed, tuple(kinds) if kinds else None, norm_mode, collect_roc, presets, sigma)
             for name, items in by_dataset.items() for run in range(runs)]
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outputs = list(pool.map(_world_task, tasks))
    else:
        outputs = [_world_task(t) for t in tasks]
    records = [r for recs, _ in outputs for r in recs]
    roc_rows = sorted((row for _, rows in outputs for row in rows), key=lambda r: (r[1], r[0], AttackKind.parse(r[2]).position, r[3]))
    return sort_records(records), roc_rows


def run_scenario(scenario: EvaluationScenario, kinds: Sequence[AttackKind], runs: int, master_seed: int,
                 norm_mode: NormMode = NormMode.UNSQUARED) -> List[RunRecord]:
    """Records of one scenario; each run index gets its own target and shadow models."""
    bench = Bench(master_seed, kinds, norm_mode)
    return sort_records(r for run in range(runs) for r in bench.run_scenario(scenario, run))


def _dataset_rank(name: str) -> int:
    names = list(PRESETS)
    return names.index(name) if name in names else len(names)


def sort_records(records: Iterable[RunRecord]) -> List[RunRecord]:
    return sorted(records, key=lambda r: (_dataset_rank(r.dataset_id), r.dataset_id, r.scenario_id,
                                          AttackKind.parse(r.attack).position, r.run))


# --------------------------------------------------------------------------
# Persistence


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _float(text: str) -> float:
    return math.nan if text == "" else float(text)


def _errors_path(path: Path) -> Path:
    return path.with_name(path.stem + ".errors.csv")


def persist_results(records: Sequence[RunRecord], path) -> None:
    """Results CSV plus a sidecar holding the error text of failed records."""
    path = Path(path)
    records = sort_records(records)
    try:
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(RESULTS_HEADER)
            for r in records:
                w.writerow([
                    r.scenario_id, r.dataset_id, r.cv1, _fmt(r.cv2), _fmt(r.cv3), _fmt(r.cv4), r.attack, r.run,
                    *(_fmt(r.metric(m)) for m in METRICS),
                    _fmt(r.threshold_max_ma), r.abstained, _fmt(r.converged), r.seed,
                ])
        with _errors_path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(ERRORS_HEADER)
            for r in records:
                if r.error is not None:
                    w.writerow([r.scenario_id, r.dataset_id, r.attack, r.run, r.error])
    except OSError as exc:
        raise OSError(f"cannot write results to {path}: {exc}") from exc


def load_results(path) -> List[RunRecord]:
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            rows = list(csv.reader(fh))
        errors = {}
        if _errors_path(path).exists():
            with _errors_path(path).open(newline="") as fh:
                for row in list(csv.reader(fh))[1:]:
                    errors[(row[1], row[0], row[2], int(row[3]))] = row[4]
    except OSError as exc:
        raise OSError(f"cannot read results from {path}: {exc}") from exc
    if not rows or tuple(rows[0]) != RESULTS_HEADER:
        raise ValueError(f"{path} does not carry the results header")
    out = []
    for row in rows[1:]:
        d = dict(zip(RESULTS_HEADER, row))
        run = int(d["run"])
        out.append(RunRecord(
            scenario_id=d["scenario_id"], dataset_id=d["dataset_id"], cv1=d["cv1"],
            cv2=float(d["cv2"]), cv3=float(d["cv3"]), cv4=float(d["cv4"]), attack=d["attack"], run=run,
            **{_ATTR.get(m, m): _float(d[m]) for m in METRICS},
            threshold_max_ma=None if d["threshold_max_ma"] == "" else float(d["threshold_max_ma"]),
            abstained=int(d["abstained"]), converged=d["converged"] == "true", seed=int(d["seed"]),
            error=errors.get((d["dataset_id"], d["scenario_id"], d["attack"], run)),
        ))
    return out


def persist_flips(flips: Sequence["FlipRecord"], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FLIPS_HEADER)
        for f in flips:
            w.writerow([f.attack_a, f.attack_b, f.scenario_a, f.scenario_b, f.metric, f.mr_cv])


def persist_roc_points(rows: Sequence[tuple], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ROC_HEADER)
        for row in rows:
            w.writerow([*row[:3], *(_fmt(float(x)) for x in row[3:])])


# --------------------------------------------------------------------------
# Groups, rankings and flips


@dataclass(frozen=True)
class ScenarioGroup:
    varied_cv: str
    scenario_ids: Tuple[str, ...]
    fingerprint: tuple  # (dataset_id, the three fixed CV values)


def group_scenarios(matrix: Sequence[EvaluationScenario]) -> List[ScenarioGroup]:
    """For each CV, the sets of scenarios that agree on the other three (and the dataset)."""
    groups = []
    for varied in CVS:
        buckets: Dict[tuple, List[str]] = {}
        for s in matrix:
            fp = (s.dataset_id, *(s.cv(c) for c in CVS if c != varied))
            buckets.setdefault(fp, []).append(s.scenario_id)
        for fp, ids in buckets.items():
            if len(ids) >= 2:
                groups.append(ScenarioGroup(varied, tuple(ids), fp))
    return groups


def mean_metric(records: Iterable[RunRecord], metric: str = "ma") -> Dict[tuple, float]:
    """Run-averaged metric per (dataset, scenario, attack); failed runs are skipped."""
    acc: Dict[tuple, List[float]] = defaultdict(list)
    for r in records:
        acc[(r.dataset_id, r.scenario_id, r.attack)].append(r.metric(metric))
    return {k: mean_and_stderr(v)[0] for k, v in acc.items()}


@dataclass(frozen=True)
class Ranking:
    order: Tuple[AttackKind, ...]
    values: Dict[AttackKind, float]
    ties: Tuple[Tuple[AttackKind, AttackKind], ...] = ()
    missing: Tuple[AttackKind, ...] = ()

    @property
    def tied(self) -> bool:
        return bool(self.ties)


def rank_attacks(records: Iterable[RunRecord], metric: str = "ma", expected: Sequence[AttackKind] = tuple(AttackKind)) -> Ranking:
    """Descending by run-averaged ``metric``; ties and NaNs fall back to canonical order."""
    means = mean_metric(records, metric)
    values = {AttackKind.parse(k[2]): v for k, v in means.items()}
    missing = tuple(k for k in expected if k not in values)
    if missing:
        log.warning("ranking lacks %s", ", ".join(k.key for k in missing))
    order = tuple(sorted(values, key=lambda k: (math.isnan(values[k]), -values[k] if not math.isnan(values[k]) else 0.0, k.position)))
    ties = tuple((a, b) for a, b in zip(order, order[1:]) if values[a] == values[b])
    return Ranking(order, values, ties, missing)


@dataclass(frozen=True)
class FlipRecord:
    attack_a: str
    attack_b: str
    scenario_a: str
    scenario_b: str
    metric: str
    mr_cv: str
    direction_a: str
    direction_b: str
    fingerprint: tuple


def detect_rank_flips(records: Sequence[RunRecord], groups: Sequence[ScenarioGroup], metric: str = "ma") -> List[FlipRecord]:
    """Attack pairs whose order reverses between two scenarios of one group."""
    means = mean_metric(records, metric)
    by_scenario: Dict[tuple, Dict[str, float]] = defaultdict(dict)
    for (ds, sid, attack), v in means.items():
        by_scenario[(ds, sid)][attack] = v
    order = {k.key: k.position for k in AttackKind}
    flips = []
    for g in groups:
        ds = g.fingerprint[0]
        for sa, sb in itertools.combinations(g.scenario_ids, 2):
            va, vb = by_scenario.get((ds, sa), {}), by_scenario.get((ds, sb), {})
            attacks = sorted(set(va) & set(vb), key=lambda a: order.get(a, len(order)))
            for a, b in itertools.combinations(attacks, 2):
                da, db = np.sign(va[a] - va[b]), np.sign(vb[a] - vb[b])
                if da * db < 0:
                    flips.append(FlipRecord(a, b, sa, sb, metric, g.varied_cv,
                                            ">" if da > 0 else "<", ">" if db > 0 else "<", g.fingerprint))
    return flips


def summarize_flip_causes(flips: Sequence[FlipRecord]) -> Tuple[float, float, float, float]:
    """Share of flips attributed to each of CV1..CV4."""
    if not flips:
        raise EmptyInputError("no flips to summarize")
    counts = np.zeros(4)
    for f in flips:
        counts[int(f.mr_cv[-1]) - 1] += 1
    return tuple(float(c) for c in counts / counts.sum())


# --------------------------------------------------------------------------
# Summaries

TABLE_ROWS = (
    ("accuracy", "accuracy"), ("precision", "precision"), ("recall", "recall"), ("f1-score", "f1"),
    ("FNR", "fnr"), ("FPR", "fpr"), ("MA", "ma"), ("AUC", "auc"), ("AUC (log)", "auc_log"),
    ("T@1%F", "tpr_at_1e-2"), ("T@0.1%F", "tpr_at_1e-3"), ("Thres@max MA", "threshold_max_ma"),
)
TABLE_COLUMNS = (
    AttackKind.BLINDMI_DIFF_W, AttackKind.BLINDMI_DIFF_WO, AttackKind.BLINDMI_1CLASS, AttackKind.NN_ATTACK,
    AttackKind.LABEL_ONLY, AttackKind.LOSS_THRESHOLD, AttackKind.TOP3_NN, AttackKind.TOP1_THRESHOLD,
    AttackKind.TOP2_TRUE, AttackKind.PRIVACY_RISK, AttackKind.PPV, AttackKind.CALIBRATED,
    AttackKind.SHAPLEY, AttackKind.DISTILLATION, AttackKind.LIRA,
)


def _cell(values: List[float], rate: bool) -> str:
    vals = [v for v in values if v is not None and not math.isnan(v)]
    if not vals:
        return "-"
    m, se = mean_and_stderr(vals)
    return f"{100 * m:.2f}%±{100 * se:.2f}" if rate else f"{m:.4g}±{se:.2g}"


def _cv1_rank(tag: str):
    return (CV1_KINDS.index(tag), tag) if tag in CV1_KINDS else (len(CV1_KINDS), tag)


def table2_rows(records: Sequence[RunRecord]) -> List[List[str]]:
    """One block per (dataset, CV1): the block's first scenario, metrics by attack, mean±stderr over runs."""
    firsts: Dict[tuple, tuple] = {}
    for r in records:
        key = (r.dataset_id, r.cv1)
        cand = (r.cv2, r.cv3, r.cv4, r.scenario_id)
        if key not in firsts or r.scenario_id < firsts[key][3]:
            firsts[key] = cand
    cells: Dict[tuple, List[float]] = defaultdict(list)
    for r in records:
        f = firsts[(r.dataset_id, r.cv1)]
        if r.scenario_id == f[3]:
            for _, m in TABLE_ROWS:
                cells[(r.dataset_id, r.cv1, r.attack, m)].append(r.metric(m))
    out = [["dataset", "cv1", "scenario", "cv2", "cv3", "cv4", "metric", *(k.label for k in TABLE_COLUMNS)]]
    for (ds, cv1), (cv2, cv3, cv4, sid) in sorted(firsts.items(), key=lambda kv: (_dataset_rank(kv[0][0]), _cv1_rank(kv[0][1]))):
        for label, m in TABLE_ROWS:
            rate = m not in ("auc", "auc_log", "threshold_max_ma")
            row = [_cell(cells.get((ds, cv1, k.key, m), []), rate) for k in TABLE_COLUMNS]
            out.append([ds, cv1, sid, _fmt(cv2), _fmt(cv3), f"{100 * cv4:g}%", label, *row])
    return out


def write_table2(records: Sequence[RunRecord], path, header_note: str = "") -> None:
    with Path(path).open("w", newline="") as fh:
        if header_note:
            fh.write(f"# {header_note}\n")
        csv.writer(fh, lineterminator="\n").writerows(table2_rows(records))


# --------------------------------------------------------------------------
# One-variable sweeps


@dataclass(frozen=True)
class Sweep:
    """Mean MA per (level, attack) over runs when one CV moves and the rest stay fixed."""

    varied_cv: str
    levels: Tuple[float, ...]
    kinds: Tuple[AttackKind, ...]
    ma: np.ndarray  # (levels, kinds), NaN where every run failed
    realized: np.ndarray  # (levels, runs) realized value of the varied CV
    failures: int

    def family_mean(self) -> np.ndarray:
        return np.nanmean(self.ma, axis=1)

    def attack_ranges(self) -> np.ndarray:
        return np.nanmax(self.ma, axis=0) - np.nanmin(self.ma, axis=0)


def sweep_cv(preset_name: str, varied_cv: str, levels: Sequence[float], base: EvaluationScenario,
             kinds: Sequence[AttackKind], runs: int, master_seed: int, norm_mode: NormMode = NormMode.UNSQUARED,
             presets: Optional[Mapping[str, DatasetPreset]] = None) -> Sweep:
    """Run ``kinds`` on ``base`` with ``varied_cv`` set to each of ``levels``, for runs 0..runs-1."""
    if varied_cv not in ("CV2", "CV3", "CV4"):
        raise ValueError(f"cannot sweep {varied_cv!r}")
    kinds = tuple(kinds)
    field_name = varied_cv.lower()
    scenarios = [
        EvaluationScenario(f"{base.scenario_id}-{varied_cv}{i}", preset_name, base.cv1,
                           **{"cv2": base.cv2, "cv3": base.cv3, "cv4": base.cv4, field_name: float(v)})
        for i, v in enumerate(levels)
    ]
    ma = np.full((len(levels), len(kinds), runs), np.nan)
    realized = np.full((len(levels), runs), np.nan)
    failures = 0
    bench = Bench(master_seed, kinds, norm_mode, presets=presets)
    for run in range(runs):
        world = bench.world(preset_name, run)
        for i, s in enumerate(scenarios):
            for j, rec in enumerate(bench.run_scenario(s, run)):
                if rec.error is None:
                    ma[i, j, run] = rec.ma
                else:
                    failures += 1
            try:  # cached in the world, so this costs nothing
                inst = materialize_scenario(s, world, world.seed("construct"))
                realized[i, run] = {"CV2": inst.realized_cv2, "CV3": inst.realized_cv3}.get(varied_cv, s.cv4)
            except InfeasibleDistributionError:
                pass
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # all-NaN cells stay NaN
        mean = np.nanmean(ma, axis=2)
    return Sweep(varied_cv, tuple(float(v) for v in levels), kinds, mean, realized, failures)
