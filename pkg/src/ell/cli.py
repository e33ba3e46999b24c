"""Pipeline command line.

Subcommands mirror the pipeline stages (ingest, clean, detect, cluster,
metrics, report), plus synth for generating test datasets, run for the whole
chain, and compare for cross-token tables. Stage artifacts live in --out-dir
and each stage consumes its predecessor's artifact; a missing prerequisite is
a usage error (exit 2), a failure inside a stage exits 1 with a stage-tagged
message and renames that stage's outputs to *.partial.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path
from typing import Callable, Optional, Sequence

import yaml

from . import cluster as cluster_mod
from . import detect as detect_mod
from . import metrics as metrics_mod
from . import report as report_mod
from . import synth as synth_mod
from .ingest import DatasetBundle, load_bundle, parse_transfers, write_transfers
from .model import EllError, EmptyDataset, IndicatorReport, build_graph, dump_json
from .preprocess import CleanConfig, clean_dataset

log = logging.getLogger("ell")

INGESTED = "ingested.jsonl"
CLEANED = "cleaned.jsonl"
CLEANING_REPORT = "cleaning_report.json"
DETECTOR_GROUPS = "detector_groups.json"
GROUPSET = "groupset.json"
INDICATOR_REPORT = "indicator_report.json"

_TOP_LEVEL_KEYS = {"seed", "jobs", "token", "clean", "detect", "cluster",
                   "metrics", "synth", "explorer"}


class UsageError(Exception):
    """Bad invocation or configuration; maps to exit code 2."""


class StageFailure(Exception):
    def __init__(self, stage: str, cause: EllError):
        super().__init__(f"stage {stage}: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


# --------------------------------------------------------------------------
# configuration

def _load_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
    except FileNotFoundError as exc:
        raise UsageError(f"config file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise UsageError(f"config file does not parse: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError("config root must be a mapping")
    unknown = set(data) - _TOP_LEVEL_KEYS
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    return data


def _section(config: dict, name: str, cls, coerce: Optional[dict] = None):
    data = dict(config.get(name) or {})
    valid = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - valid
    if unknown:
        raise UsageError(f"unknown {name} config keys: {sorted(unknown)}")
    for key, fn in (coerce or {}).items():
        if key in data:
            data[key] = fn(data[key])
    try:
        return cls(**data)
    except EllError as exc:
        raise UsageError(f"bad {name} config: {exc}") from exc


@dataclasses.dataclass(frozen=True)
class RunSettings:
    seed: int
    jobs: int
    token: Optional[str]
    clean: CleanConfig
    detect: detect_mod.DetectorConfig
    cluster: cluster_mod.ClusterConfig
    metrics: metrics_mod.MetricsConfig
    synth: synth_mod.ScenarioSpec
    explorer: dict


def _settings(args) -> RunSettings:
    config = _load_config(args.config)
    seed = args.seed if args.seed is not None else int(config.get("seed", 0))
    jobs = args.jobs if args.jobs is not None else int(config.get("jobs", 1))
    if jobs < 1:
        raise UsageError("--jobs must be >= 1")
    token = args.token if getattr(args, "token", None) else config.get("token")

    metrics_coerce = {"exclude_flags": lambda v: frozenset(v)}
    metrics_config = _section(config, "metrics", metrics_mod.MetricsConfig,
                              coerce=metrics_coerce)
    if getattr(args, "exclude_flags", None):
        flags = frozenset(
            flag.strip() for flag in args.exclude_flags.split(",") if flag.strip())
        metrics_config = dataclasses.replace(metrics_config, exclude_flags=flags)

    synth_coerce = {
        "patterns": lambda v: frozenset(v),
        "entity_size_range": lambda v: tuple(v),
        "retail_tx_range": lambda v: tuple(v),
    }
    synth_section = dict(config.get("synth") or {})
    synth_section.setdefault("seed", seed)
    if args.seed is not None:
        synth_section["seed"] = args.seed
    config_with_synth = dict(config)
    config_with_synth["synth"] = synth_section

    return RunSettings(
        seed=seed,
        jobs=jobs,
        token=token,
        clean=_section(config, "clean", CleanConfig),
        detect=_section(config, "detect", detect_mod.DetectorConfig),
        cluster=_section(config, "cluster", cluster_mod.ClusterConfig),
        metrics=metrics_config,
        synth=_section(config_with_synth, "synth", synth_mod.ScenarioSpec,
                       coerce=synth_coerce),
        explorer=dict(config.get("explorer") or {}),
    )


# --------------------------------------------------------------------------
# stage plumbing

def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise UsageError(f"missing {path.name} in {path.parent} (run `ell {producer}` first)")
    return path


def _stage(name: str, outputs: Sequence[Path], fn: Callable[[], None]) -> None:
    try:
        fn()
    except EllError as exc:
        for p in outputs:
            if p.exists():
                p.rename(p.with_name(p.name + ".partial"))
        raise StageFailure(name, exc) from exc
    for p in outputs:
        if p.exists():
            log.info("%s: wrote %s", name, p)


def _load_input_bundle(args, settings: RunSettings) -> DatasetBundle:
    data_dir = Path(args.data_dir)
    if settings.token and settings.explorer.get("endpoint"):
        from .ingest import ExplorerClient

        client = ExplorerClient(
            endpoint=settings.explorer["endpoint"],
            page_size=int(settings.explorer.get("page_size", 1000)),
            cache_dir=settings.explorer.get("cache_dir"),
            rps=float(settings.explorer.get("rps", 5.0)),
            timeout=float(settings.explorer.get("timeout", 30.0)),
        )
        transfers = client.fetch(settings.token)
        base = (load_bundle(data_dir) if data_dir.exists()
                else DatasetBundle((), ()))
        return base.with_transfers(transfers)
    try:
        return load_bundle(data_dir)
    except (EmptyDataset, FileNotFoundError) as exc:
        raise UsageError(f"cannot load dataset from {data_dir}: {exc}") from exc


def _load_side_bundle(args, transfers) -> DatasetBundle:
    """Bundle with stage-artifact transfers and data-dir labels/snapshots."""
    data_dir = Path(args.data_dir)
    try:
        base = load_bundle(data_dir)
    except (EmptyDataset, FileNotFoundError) as exc:
        raise UsageError(f"cannot load dataset from {data_dir}: {exc}") from exc
    return base.with_transfers(transfers)


# --------------------------------------------------------------------------
# stage implementations

def stage_ingest(args, settings: RunSettings, out: Path) -> None:
    bundle = _load_input_bundle(args, settings)
    target = out / INGESTED

    def work():
        write_transfers(bundle.transfers, target)
        log.info("ingest: %d transfers, %d labels",
                 len(bundle.transfers), len(bundle.labels))

    _stage("ingest", [target], work)


def stage_clean(args, settings: RunSettings, out: Path) -> None:
    transfers = parse_transfers(_require(out / INGESTED, "ingest"))
    bundle = _load_side_bundle(args, transfers)
    outputs = [out / CLEANED, out / CLEANING_REPORT]

    def work():
        cleaned, report = clean_dataset(bundle, settings.clean)
        write_transfers(cleaned.transfers, outputs[0])
        dump_json(report.to_json_dict(), outputs[1])
        log.info("clean: %d -> %d transfers", len(bundle.transfers),
                 len(cleaned.transfers))

    _stage("clean", outputs, work)


def stage_detect(args, settings: RunSettings, out: Path) -> None:
    transfers = parse_transfers(_require(out / CLEANED, "clean"))
    bundle = _load_side_bundle(args, transfers)
    target = out / DETECTOR_GROUPS

    def work():
        graph = build_graph(bundle.transfers)
        groups = detect_mod.run_all_detectors(
            graph, bundle.transfers, bundle.labels, settings.detect,
            seed=settings.seed, jobs=settings.jobs)
        dump_json(detect_mod.groups_to_json_list(groups), target)
        log.info("detect: %d candidate groups", len(groups))

    _stage("detect", [target], work)


def stage_cluster(args, settings: RunSettings, out: Path) -> None:
    import json

    transfers = parse_transfers(_require(out / CLEANED, "clean"))
    bundle = _load_side_bundle(args, transfers)
    with open(_require(out / DETECTOR_GROUPS, "detect"), encoding="utf-8") as fh:
        detector_groups = detect_mod.groups_from_json_list(json.load(fh))
    target = out / GROUPSET

    def work():
        graph = build_graph(bundle.transfers)
        balances = (dict(bundle.market.balances)
                    if bundle.market and bundle.market.balances
                    else cluster_mod.replay_balances(bundle.transfers))
        features = cluster_mod.extract_features(
            graph, bundle.transfers, balances, bundle.labels,
            seed=settings.seed,
            betweenness_sample=settings.cluster.betweenness_sample,
            top_counterparties=settings.cluster.top_counterparty_set_size)
        group_set = cluster_mod.merge_and_refine(
            detector_groups, features, graph, settings.cluster,
            seed=settings.seed)
        dump_json(cluster_mod.group_set_to_json_dict(group_set), target)
        log.info("cluster: %d groups over %d grouped addresses",
                 len(group_set.groups), group_set.member_count())

    _stage("cluster", [target], work)


def stage_metrics(args, settings: RunSettings, out: Path) -> None:
    import json

    transfers = parse_transfers(_require(out / CLEANED, "clean"))
    bundle = _load_side_bundle(args, transfers)
    with open(_require(out / GROUPSET, "cluster"), encoding="utf-8") as fh:
        groupset_data = json.load(fh)
    target = out / INDICATOR_REPORT

    def work():
        universe = set()
        for t in bundle.transfers:
            universe.add(t.from_addr)
            universe.add(t.to_addr)
        group_set = cluster_mod.group_set_from_json_dict(groupset_data, universe)
        indicator_report = metrics_mod.compute_report(
            bundle, group_set, settings.metrics)
        dump_json(indicator_report.to_json_dict(), target)
        log.info("metrics: %d raw holders, %d adjusted holders",
                 int(indicator_report.raw["holders"]),
                 int(indicator_report.adjusted["holders"]))

    _stage("metrics", [target], work)


def stage_report(args, settings: RunSettings, out: Path) -> None:
    import json

    with open(_require(out / INDICATOR_REPORT, "metrics"), encoding="utf-8") as fh:
        indicator_report = IndicatorReport.from_json_dict(json.load(fh))
    outputs = [out / "radar.json", out / "radar.svg", out / "indicators.csv",
               out / "radar.png", out / "indicators.png"]

    def work():
        report_mod.emit_radar(indicator_report, out)
        report_mod.emit_table(indicator_report, out / "indicators.csv")
        title = settings.token or "token"
        report_mod.emit_figures(indicator_report, out, title=title)

    _stage("report", outputs, work)


def stage_synth(args, settings: RunSettings, out: Path) -> None:
    def work():
        bundle, truth = synth_mod.generate_scenario(settings.synth)
        paths = synth_mod.write_scenario(bundle, truth, out)
        log.info("synth: %d transfers, %d ground-truth groups -> %s",
                 len(bundle.transfers), len(truth.groups), out)
        return paths

    _stage("synth", [out / name for name in
                     ("transfers.csv", "labels.json", "pool.json",
                      "market.json", "ground_truth.json")], work)


def cmd_compare(args, settings: RunSettings, out: Path) -> None:
    import json

    if len(args.reports) < 2:
        raise UsageError("compare needs at least two indicator report files")
    reports = []
    for path in args.reports:
        p = Path(path)
        if not p.exists():
            raise UsageError(f"no such report: {p}")
        with open(p, encoding="utf-8") as fh:
            reports.append(IndicatorReport.from_json_dict(json.load(fh)))
    names = None
    if args.names:
        names = [n.strip() for n in args.names.split(",")]

    def work():
        comparison = report_mod.compare_tokens(reports, names)
        paths = report_mod.emit_comparison(comparison, out)
        log.info("compare: wrote %s", sorted(str(p) for p in paths.values()))

    _stage("compare", [out / "comparison.csv", out / "comparison.txt",
                       out / "comparison.png"], work)


_PIPELINE = ("ingest", "clean", "detect", "cluster", "metrics", "report")

_STAGES: dict[str, Callable] = {
    "ingest": stage_ingest,
    "clean": stage_clean,
    "detect": stage_detect,
    "cluster": stage_cluster,
    "metrics": stage_metrics,
    "report": stage_report,
    "synth": stage_synth,
}


# --------------------------------------------------------------------------
# entry point

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ell",
        description="Entity-linked liquidity analysis for token transfer data.")
    parser.add_argument("--config", help="YAML config file")
    parser.add_argument("--data-dir", default="data",
                        help="input dataset directory (default: data)")
    parser.add_argument("--out-dir", default="out",
                        help="artifact directory (default: out)")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the run seed")
    parser.add_argument("--jobs", type=int, default=None,
                        help="max parallel workers inside stages")
    parser.add_argument("--exclude-flags", default=None,
                        help="comma-separated group flags to exclude from "
                             "adjusted distributions (e.g. suspected_market_maker)")
    parser.add_argument("--token", default=None,
                        help="token contract address (explorer fetch / titles)")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in (*_PIPELINE, "synth", "run"):
        sub.add_parser(name, help=f"run the {name} stage")
    compare = sub.add_parser("compare", help="compare indicator reports")
    compare.add_argument("reports", nargs="*",
                         help="indicator_report.json files to compare")
    compare.add_argument("--names", default=None,
                         help="comma-separated token names, one per report")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(
        level=logging.INFO, stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s")
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        settings = _settings(args)
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "run":
            for name in _PIPELINE:
                _STAGES[name](args, settings, out)
        elif args.command == "compare":
            cmd_compare(args, settings, out)
        else:
            _STAGES[args.command](args, settings, out)
    except UsageError as exc:
        print(f"ell: {exc}", file=sys.stderr)
        return 2
    except StageFailure as exc:
        print(f"ell: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
