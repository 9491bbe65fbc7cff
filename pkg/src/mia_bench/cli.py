"""Command-line front end: gen-data, build-scenarios, run, report.

Exit codes: 0 success (warnings included), 2 configuration error,
3 I/O error, 4 every benchmark record failed.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from .attacks import AttackKind
from .bench import (
    DEFAULT_RUNS,
    QUICK_RUNS,
    Bench,
    group_scenarios,
    load_results,
    persist_flips,
    persist_results,
    persist_roc_points,
    run_benchmark,
    summarize_flip_causes,
    detect_rank_flips,
    write_table2,
)
from .errors import ConfigError, EmptyInputError, InfeasibleDistributionError
from .mmd import NormMode
from .models import Hyper, save_snapshot
from .presets import MATRIX_PRESETS, PRESETS, DatasetPreset
from .scenarios import EvaluationScenario, build_scenario_matrix, materialize_scenario, read_matrix, write_matrix
from .world import build_target

log = logging.getLogger("mia_bench")

CONFIG_FORMAT_VERSION = 1
EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_ALL_FAILED = 0, 2, 3, 4
REPORT_KINDS = ("table2", "flips", "roc-points")


@dataclass
class BenchConfig:
    datasets: List[str] = field(default_factory=lambda: list(MATRIX_PRESETS))
    norm_mode: str = NormMode.UNSQUARED.value
    sigma: Optional[float] = None
    hyper: Dict[str, dict] = field(default_factory=dict)  # per-preset Hyper overrides
    runs: int = DEFAULT_RUNS
    master_seed: Optional[int] = None
    out_dir: str = "mia_bench_out"
    quick: bool = False
    workers: int = 1
    format_version: int = CONFIG_FORMAT_VERSION

    def validate(self) -> "BenchConfig":
        if self.format_version != CONFIG_FORMAT_VERSION:
            raise ConfigError(f"format_version: unsupported value {self.format_version!r}")
        if self.master_seed is None:
            raise ConfigError("master_seed: a seed is required (set it in the config or pass --seed)")
        for name in [*self.datasets, *self.hyper]:
            if name not in PRESETS:
                raise ConfigError(f"datasets: unknown preset {name!r}")
        try:
            NormMode(self.norm_mode)
        except ValueError:
            raise ConfigError(f"norm_mode: unknown value {self.norm_mode!r}") from None
        hyper_fields = {f.name for f in dataclasses.fields(Hyper)} - {"seed"}
        for name, over in self.hyper.items():
            bad = set(over) - hyper_fields
            if bad:
                raise ConfigError(f"hyper.{name}: unknown field(s) {sorted(bad)}")
        if self.runs < 1 or self.workers < 1:
            raise ConfigError("runs and workers must be positive")
        return self

    @property
    def effective_runs(self) -> int:
        return QUICK_RUNS if self.quick else self.runs

    @property
    def out(self) -> Path:
        return Path(self.out_dir)

    def presets(self) -> Dict[str, DatasetPreset]:
        out = {}
        for name in self.datasets:
            preset = PRESETS[name]
            over = dict(self.hyper.get(name, {}))
            if "hidden" in over:
                over["hidden"] = tuple(over["hidden"])
            out[name] = dataclasses.replace(preset, hyper=dataclasses.replace(preset.hyper, **over)) if over else preset
        return out


def load_config(path) -> BenchConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except OSError:
        raise
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    known = {f.name for f in dataclasses.fields(BenchConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config key(s) {sorted(unknown)}")
    if "format_version" not in raw:
        raise ConfigError("format_version: missing")
    return BenchConfig(**raw)


def _split(text: Optional[str]) -> Optional[List[str]]:
    return [t.strip() for t in text.split(",") if t.strip()] if text else None


def resolve_config(args) -> BenchConfig:
    cfg = load_config(args.config) if args.config else BenchConfig()
    if args.seed is not None:
        cfg.master_seed = args.seed
    if args.runs is not None:
        cfg.runs = args.runs
    if args.quick:
        cfg.quick = True
    if args.out is not None:
        cfg.out_dir = args.out
    if args.datasets:
        cfg.datasets = _split(args.datasets)
    if getattr(args, "workers", None) is not None:
        cfg.workers = args.workers
    return cfg.validate()


def _attacks(text) -> Optional[List[AttackKind]]:
    names = _split(text)
    if not names:
        return None
    try:
        return [AttackKind.parse(n) for n in names]
    except KeyError as exc:
        raise ConfigError(f"attacks: {exc.args[0]}") from None


def _mkdir(path: Path) -> Path:
    path.mkdir(parents=True, exist_ok=True)
    return path


# --------------------------------------------------------------------------
# Commands


def cmd_gen_data(cfg: BenchConfig, args) -> int:
    data = _mkdir(cfg.out / "data")
    for name, preset in cfg.presets().items():
        pool, model, _ = build_target(preset, 0, cfg.master_seed)
        header = {"preset": name, "master_seed": cfg.master_seed, "run": 0, "hyper": dataclasses.asdict(model.hyper)}
        digest = save_snapshot(data / f"{name}.npz", header, pool, model)
        print(f"{name} {digest}")
    return EXIT_OK


def _snapshot_check(cfg: BenchConfig, name: str):
    path = cfg.out / "data" / f"{name}.npz"
    if not path.exists():
        raise FileNotFoundError(f"{path}: snapshot missing; run gen-data first")


REALIZED_HEADER = ("scenario_id", "dataset_id", "cv1", "cv1_params", "cv2", "realized_cv2", "cv3", "realized_cv3",
                   "reference_order", "reference_start", "reference_size")


def cmd_build_scenarios(cfg: BenchConfig, args) -> int:
    sdir = _mkdir(cfg.out / "scenarios")
    rejects = []
    bench = Bench(cfg.master_seed, presets=cfg.presets(), norm_mode=NormMode(cfg.norm_mode), sigma=cfg.sigma)
    for name, preset in cfg.presets().items():
        _snapshot_check(cfg, name)
        matrix = build_scenario_matrix(preset)
        write_matrix(matrix, sdir / f"{name}.csv")
        world = bench.world(name, 0)
        with (sdir / f"{name}.realized.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(REALIZED_HEADER)
            for s in matrix:
                try:
                    inst = materialize_scenario(s, world, world.seed("construct"))
                except InfeasibleDistributionError as exc:
                    rejects.append((s.scenario_id, s.dataset_id, str(exc)))
                    continue
                w.writerow([s.scenario_id, s.dataset_id, s.cv1, repr(inst.cv1_kind), repr(s.cv2), repr(inst.realized_cv2),
                            repr(s.cv3), repr(inst.realized_cv3), inst.reference_order, inst.reference_start,
                            inst.reference_size])
        print(f"{name}: {len(matrix)} scenarios")
    with (sdir / "rejects.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("scenario_id", "dataset_id", "reason"))
        w.writerows(rejects)
    if rejects:
        print(f"warning: {len(rejects)} infeasible scenario(s), see {sdir / 'rejects.csv'}", file=sys.stderr)
    return EXIT_OK


def _load_matrices(cfg: BenchConfig) -> List[EvaluationScenario]:
    out = []
    for name in cfg.datasets:
        path = cfg.out / "scenarios" / f"{name}.csv"
        if not path.exists():
            raise FileNotFoundError(f"{path}: scenario matrix missing; run build-scenarios first")
        out.extend(read_matrix(path))
    return out


def cmd_run(cfg: BenchConfig, args) -> int:
    scenarios = _load_matrices(cfg)
    wanted = _split(args.scenarios)
    if wanted:
        scenarios = [s for s in scenarios if s.scenario_id in wanted]
        if not scenarios:
            raise ConfigError(f"scenarios: none of {wanted} is in the matrices")
    kinds = _attacks(args.attacks)
    runs = cfg.effective_runs
    records, roc_rows = run_benchmark(
        scenarios, runs, cfg.master_seed, kinds, NormMode(cfg.norm_mode), cfg.workers, collect_roc=True,
        presets=cfg.presets(), sigma=cfg.sigma,
    )
    out = _mkdir(cfg.out)
    persist_results(records, out / "results.csv")
    persist_roc_points(roc_rows, out / "roc_points.csv")
    mode = f"quick mode, runs={runs}" if cfg.quick else f"runs={runs}"
    write_table2(records, out / "summary.csv", header_note=mode)
    failed = sum(r.error is not None for r in records)
    print(f"{len(records)} records ({mode}), {failed} failed -> {out / 'results.csv'}")
    if records and failed == len(records):
        return EXIT_ALL_FAILED
    return EXIT_OK


def _scenarios_from_records(records) -> List[EvaluationScenario]:
    seen = {}
    for r in records:
        seen.setdefault((r.dataset_id, r.scenario_id), EvaluationScenario(r.scenario_id, r.dataset_id, r.cv1, r.cv2, r.cv3, r.cv4))
    return list(seen.values())


def cmd_report(cfg: BenchConfig, args) -> int:
    if args.kind not in REPORT_KINDS:
        raise ConfigError(f"kind: unknown report {args.kind!r}; known: {list(REPORT_KINDS)}")
    results = Path(args.results) if args.results else cfg.out / "results.csv"
    out = _mkdir(cfg.out)
    if args.kind == "roc-points":
        return _report_roc(results.with_name("roc_points.csv"), _mkdir(out / "roc"))
    records = load_results(results)
    if args.kind == "table2":
        write_table2(records, out / "table2.csv")
        print(f"table2 -> {out / 'table2.csv'}")
        return EXIT_OK
    flips = detect_rank_flips(records, group_scenarios(_scenarios_from_records(records)), args.metric)
    persist_flips(flips, out / "flips.csv")
    try:
        shares = summarize_flip_causes(flips)
    except EmptyInputError:
        shares = None
    with (out / "flip_causes.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("CV1", "CV2", "CV3", "CV4", "flips"))
        w.writerow([*(repr(s) for s in shares), len(flips)] if shares else ["", "", "", "", 0])
    print(f"{len(flips)} flips" + (" shares " + " ".join(f"CV{i + 1}={s:.4f}" for i, s in enumerate(shares)) if shares else ""))
    return EXIT_OK


def _report_roc(path: Path, dest: Path) -> int:
    with path.open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    groups: Dict[tuple, list] = {}
    for r in rows:
        groups.setdefault((r["dataset_id"], r["attack"]), []).append(r)
    for (ds, attack), items in sorted(groups.items()):
        items.sort(key=lambda r: (float(r["fpr"]), r["scenario_id"]))
        with (dest / f"{ds}_{attack}.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("scenario_id", "fpr", "tpr", "threshold"))
            w.writerows([r["scenario_id"], r["fpr"], r["tpr"], r["threshold"]] for r in items)
    print(f"{len(groups)} ROC point files -> {dest}")
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "build-scenarios": cmd_build_scenarios, "run": cmd_run, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (BenchConfig fields plus format_version)")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--runs", type=int, help="runs per scenario")
    common.add_argument("--quick", action="store_true", help=f"quick mode: {QUICK_RUNS} runs per scenario")
    common.add_argument("--datasets", help="comma-separated preset names")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="mia-bench", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write seeded pools and target models")
    sub.add_parser("build-scenarios", parents=[common], help="write scenario matrices and realized CVs")
    run = sub.add_parser("run", parents=[common], help="run attacks over scenarios")
    run.add_argument("--attacks", help="comma-separated attack identifiers")
    run.add_argument("--scenarios", help="comma-separated scenario ids")
    run.add_argument("--workers", type=int, help="parallel worker processes")
    report = sub.add_parser("report", parents=[common], help="format results")
    report.add_argument("--kind", required=True, help="one of " + ", ".join(REPORT_KINDS))
    report.add_argument("--results", help="results CSV (default: OUT/results.csv)")
    report.add_argument("--metric", default="ma", help="ranking metric for flips")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(message)s")
    try:
        if args.command == "report" and args.kind not in REPORT_KINDS:
            raise ConfigError(f"kind: unknown report {args.kind!r}; known: {list(REPORT_KINDS)}")
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
