"""Command line for the EMR preprocessing agents and their benchmark.

Exit codes: 0 success, 1 agent terminal failure, 2 configuration or usage
error, 3 environment error (database or language model unreachable).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from .bench.catalog import FEATURE_LIST, Style
from .bench.cohort import build_gold_cohort
from .bench.fixtures import DEFAULT_SCALE, Fixture, build_fixture, load_fixture
from .bench.metrics import EvaluationReport, evaluate_cohort, evaluate_mapping
from .bench.scenarios import scenario_by_name, standard_scenarios
from .cfsa import ClinicalRequest
from .config import ConfigError, RunConfig
from .db import DatabaseConnectionError, IntrospectionError
from .integrate import CohortArtifacts, FeatureLinking, IntegrationError, TimeRange
from .llm import Cassette, LLMClient, LLMError
from .mapping import Outcome, load_mapping
from .runlog import AgentFailure
from .workflows import (
    Workspace,
    build_backend,
    load_linking,
    open_workspace,
    run_cohort,
    run_integration,
    run_mapping,
)

log = logging.getLogger("emrprep")

EXIT_OK, EXIT_AGENT, EXIT_CONFIG, EXIT_ENV = 0, 1, 2, 3


class UsageError(ValueError):
    pass


# -- argument parsing ---------------------------------------------------------


def _run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--db-url", help="database endpoint (SQLite path or postgresql:// URL)")
    p.add_argument("--backend", choices=("live", "replay", "scripted"))
    p.add_argument("--cassette", help="cassette file for replay or recording")
    p.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="emrprep", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-db", help="build a synthetic fixture database with gold files")
    p.add_argument("--style", required=True, help="MimicLike, EicuLike or SicLike")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--scale", type=int, default=DEFAULT_SCALE, help="number of patients")
    p.add_argument("--out", required=True, help="target directory")
    p.add_argument("--overwrite", action="store_true")

    p = sub.add_parser("run-cfsa", help="run the cohort and feature selection agent")
    _run_flags(p)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--request", help='JSON file {"cohort_selection": ..., "feature_selection": ...}')
    src.add_argument("--scenario", help="built-in request: age_gender, min_duration or min_records")
    p.add_argument("--adversary", help="scripted fault mode (scripted backend only)")

    p = sub.add_parser("run-cma", help="run the code mapping agent over a feature list")
    _run_flags(p)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--features", help="text file with one feature name per line")
    src.add_argument("--all-features", action="store_true", help="the built-in feature list")
    p.add_argument("--threshold", type=int, help="user similarity threshold for the second pass")
    p.add_argument("--adversary", help="scripted fault mode (scripted backend only)")

    p = sub.add_parser("evaluate", help="score predictions against fixture gold")
    p.add_argument("--task", choices=("cohort", "mapping"), required=True)
    p.add_argument("--predictions", nargs="+", required=True,
                   help="one artifact per trial: cohort.csv (or its run directory) or mapping.json")
    p.add_argument("--gold", required=True, help="fixture directory written by build-db")
    p.add_argument("--scenario", help="request scenario the cohort predictions answer")
    p.add_argument("--trials", type=int, help="score only the first N prediction artifacts")
    p.add_argument("--out", default=".", help="directory for report.json")

    p = sub.add_parser("integrate", help="build an event stream from cohort and mapping artifacts")
    _run_flags(p)
    p.add_argument("--cohort", required=True, help="run-cfsa output directory")
    p.add_argument("--mapping", required=True, help="mapping.json written by run-cma")
    p.add_argument("--linking", help="cma_linking.json (defaults to the one next to --mapping)")
    p.add_argument("--features", required=True, help="comma-separated feature names")
    p.add_argument("--range", required=True, dest="time_range", help="START:END in minutes after ICU admission")

    p = sub.add_parser("record", help="run a scenario and store every completion in a cassette")
    _run_flags(p)
    p.add_argument("--task", choices=("cfsa", "cma", "pipeline"), required=True)
    p.add_argument("--scenario", action="append", help="cohort scenario (repeatable; default all)")
    p.add_argument("--features", help="feature list file for cma and pipeline (default built-in list)")
    p.add_argument("--range", action="append", dest="time_range", help="pipeline window START:END (repeatable)")
    p.add_argument("--adversary", help="scripted fault mode")
    p.add_argument("--overwrite", action="store_true", help="replace the cassette instead of appending")
    return parser


def _config(args: argparse.Namespace) -> RunConfig:
    config = RunConfig.load(getattr(args, "config", None))
    overrides = {
        "db_url": getattr(args, "db_url", None),
        "backend": getattr(args, "backend", None),
        "cassette": getattr(args, "cassette", None),
        "output_dir": getattr(args, "out", None),
    }
    if getattr(args, "threshold", None) is not None:
        overrides["user_threshold"] = args.threshold
    try:
        return config.with_overrides(**overrides)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _client(config: RunConfig, ws: Workspace, adversary: str | None = None,
            record_to: Cassette | None = None) -> LLMClient:
    if adversary is not None and config.backend != "scripted":
        raise ConfigError("--adversary needs the scripted backend")
    return LLMClient(build_backend(config, ws.fixture, adversary, record_to))


def _read_features(path: str | None) -> list[str]:
    if path is None:
        return list(FEATURE_LIST)
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except FileNotFoundError as exc:
        raise UsageError(f"feature list {path} does not exist") from exc
    features = [ln.strip() for ln in lines if ln.strip() and not ln.lstrip().startswith("#")]
    if not features:
        raise UsageError(f"feature list {path} is empty")
    return features


def _print_paths(paths: Sequence[Path]) -> None:
    for p in paths:
        print(p)


# -- commands -----------------------------------------------------------------


def cmd_build_db(args: argparse.Namespace) -> int:
    try:
        style = Style.parse(args.style)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    fixture = build_fixture(style, args.seed, args.scale)
    try:
        paths = fixture.write(args.out, overwrite=args.overwrite)
    except FileExistsError as exc:
        raise UsageError(f"{args.out} is not empty; rerun with --overwrite to replace it") from exc
    _print_paths([paths.database, paths.ddl, paths.gold_dir, paths.docs_dir, paths.meta])
    return EXIT_OK


def _request(args: argparse.Namespace, ws: Workspace) -> ClinicalRequest:
    if args.request:
        try:
            return ClinicalRequest.from_json(Path(args.request).read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise UsageError(f"request file {args.request} does not exist") from exc
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise UsageError(f"request file {args.request} is malformed: {exc}") from exc
    if ws.fixture is None:
        raise ConfigError("--scenario needs a database built by build-db")
    try:
        return scenario_by_name(ws.fixture, args.scenario).request
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from exc


def cmd_run_cfsa(args: argparse.Namespace) -> int:
    config = _config(args)
    ws = open_workspace(config)
    try:
        client = _client(config, ws, args.adversary)
        outcome = run_cohort(ws, client, _request(args, ws), config.output_dir)
    finally:
        ws.close()
    _print_paths(outcome.paths)
    if outcome.failure is not None:
        print(f"cohort agent failed: {outcome.failure}", file=sys.stderr)
        return EXIT_AGENT
    return EXIT_OK


def cmd_run_cma(args: argparse.Namespace) -> int:
    config = _config(args)
    features = _read_features(args.features) if args.features else list(FEATURE_LIST)
    ws = open_workspace(config)
    try:
        outcome = run_mapping(ws, _client(config, ws, args.adversary), features, config.output_dir)
    finally:
        ws.close()
    _print_paths(outcome.paths)
    failed = [f for f, r in outcome.results.items() if r.failed]
    if failed:
        print(f"{len(failed)} of {len(features)} features failed and were recorded as Absent: "
              + ", ".join(failed), file=sys.stderr)
    return EXIT_AGENT if outcome.all_failed else EXIT_OK


def _read_cohort_csv(path: Path) -> tuple[list[str], list[list]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration as exc:
            raise UsageError(f"{path} is empty") from exc
        rows = [[None if v == "" else v for v in r] for r in reader if r]
    return header, rows


def _gold_fixture(gold: str) -> Fixture:
    root = Path(gold)
    if not (root / "fixture.json").is_file():
        raise UsageError(f"{gold} is not a fixture directory (no fixture.json)")
    return load_fixture(root)


def cmd_evaluate(args: argparse.Namespace) -> int:
    fixture = _gold_fixture(args.gold)
    predictions = [Path(p) for p in args.predictions]
    n = args.trials or len(predictions)
    if n < 1 or n > len(predictions):
        raise UsageError(f"--trials {n} needs that many prediction artifacts, got {len(predictions)}")
    predictions = predictions[:n]
    if args.task == "cohort":
        if not args.scenario:
            raise UsageError(f"cohort evaluation needs --scenario ({', '.join(s.name for s in standard_scenarios(fixture))})")
        try:
            scenario = scenario_by_name(fixture, args.scenario)
        except KeyError as exc:
            raise UsageError(str(exc.args[0])) from exc
        gold = build_gold_cohort(fixture, scenario.criteria, scenario.spec)
        report = EvaluationReport("cohort_f1", [])
        for p in predictions:
            csv_path = p / "cohort.csv" if p.is_dir() else p
            if not csv_path.is_file():
                # a run that left no cohort is a failed trial
                report.scores.append(0.0)
                report.failed.append(True)
                report.details.append({"prediction": str(p), "error": "no cohort.csv"})
                continue
            header, rows = _read_cohort_csv(csv_path)
            if header != scenario.spec.names:
                raise UsageError(f"{csv_path} has columns {header}, the scenario expects {scenario.spec.names}")
            score = evaluate_cohort([r[0] for r in rows], gold, rows)
            report.scores.append(score.f1)
            report.failed.append(False)
            report.details.append({"prediction": str(p), "format_accuracy": score.format_accuracy,
                                   "precision": score.precision, "recall": score.recall,
                                   "predicted": score.predicted, "gold": score.gold,
                                   "overlap": score.overlap})
    else:
        gold_map = fixture.mapping_gold()
        report = EvaluationReport("mapping_f1", [])
        for p in predictions:
            try:
                predicted = load_mapping(p)
            except FileNotFoundError as exc:
                raise UsageError(f"prediction file {p} does not exist") from exc
            except (KeyError, ValueError, TypeError) as exc:
                raise UsageError(f"{p} is not a mapping file: {exc}") from exc
            extra = sorted(set(predicted) - set(gold_map.features))
            if extra:
                raise UsageError(f"{p} maps features the gold does not define: {', '.join(extra)}")
            score = evaluate_mapping(predicted, gold_map)
            report.scores.append(score.f1)
            report.failed.append(all(r.failed for r in predicted.values()))
            report.details.append({"prediction": str(p), "balanced_accuracy": score.balanced_accuracy,
                                   "tp": score.tp, "fp": score.fp, "fn": score.fn, "tn": score.tn,
                                   "macro_f1": score.macro_f1})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    print(report.to_table())
    print(out / "report.json")
    return EXIT_OK


def cmd_integrate(args: argparse.Namespace) -> int:
    config = _config(args)
    try:
        window = TimeRange.parse(args.time_range)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    features = [f.strip() for f in args.features.split(",") if f.strip()]
    try:
        cohort = CohortArtifacts.load(args.cohort)
        mapping = load_mapping(args.mapping)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from exc
    linking_path = Path(args.linking) if args.linking else Path(args.mapping).with_name("cma_linking.json")
    linking: dict[str, FeatureLinking] = load_linking(linking_path) if linking_path.is_file() else {}
    ws = open_workspace(config)
    try:
        _, paths = run_integration(ws, _client(config, ws), cohort, mapping, linking, features,
                                      window, config.output_dir)
    finally:
        ws.close()
    _print_paths(paths)
    return EXIT_OK


def cmd_record(args: argparse.Namespace) -> int:
    config = _config(args)
    if config.backend == "replay":
        raise ConfigError("record needs --backend live or --backend scripted")
    if not config.cassette:
        raise ConfigError("record needs --cassette")
    ws = open_workspace(config)
    cassette = Cassette.for_recording(config.cassette, overwrite=args.overwrite)
    marker = Cassette.partial_marker(cassette.path)
    marker.touch()
    out = Path(config.output_dir)
    status = EXIT_OK
    paths: list[Path] = []
    try:
        client = _client(config, ws, args.adversary, record_to=cassette)
        if args.task in ("cfsa", "pipeline"):
            if ws.fixture is None and not args.scenario:
                raise ConfigError("record needs --scenario names for a database not built by build-db")
            names = args.scenario or [s.name for s in standard_scenarios(ws.fixture)]
            if args.task == "pipeline":
                names = names[:1]
            for name in names:
                request = scenario_by_name(ws.fixture, name).request
                outcome = run_cohort(ws, client, request, out / "cfsa" / name)
                paths += outcome.paths
                if outcome.failure is not None:
                    status = EXIT_AGENT
        if args.task in ("cma", "pipeline"):
            features = _read_features(args.features)
            mapped = run_mapping(ws, client, features, out / "cma")
            paths += mapped.paths
            if mapped.all_failed:
                status = EXIT_AGENT
        if args.task == "pipeline" and status == EXIT_OK:
            cohort = CohortArtifacts.from_result(outcome.result)
            present = [f for f in features if mapped.results[f].outcome is not Outcome.ABSENT]
            for text in args.time_range or ["0:1440"]:
                window = TimeRange.parse(text)
                _, p = run_integration(ws, client, cohort, mapped.results, mapped.linking, present,
                                       window, out / "integrate" / text.replace(":", "_"))
                paths += p
    finally:
        ws.close()
    # an exception above leaves the marker in place, so the cassette is never replayed
    marker.unlink()
    _print_paths([cassette.path, *paths])
    return status


COMMANDS = {
    "build-db": cmd_build_db,
    "run-cfsa": cmd_run_cfsa,
    "run-cma": cmd_run_cma,
    "evaluate": cmd_evaluate,
    "integrate": cmd_integrate,
    "record": cmd_record,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatabaseConnectionError, IntrospectionError, LLMError) as exc:
        print(f"environment error: {exc}", file=sys.stderr)
        return EXIT_ENV
    except (AgentFailure, IntegrationError) as exc:
        print(f"agent failure: {exc}", file=sys.stderr)
        return EXIT_AGENT


if __name__ == "__main__":
    sys.exit(main())
