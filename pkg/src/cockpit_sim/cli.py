"""Operator command line: validate, run, devices, replay, report.

Exit codes: 0 success, 1 validation or evaluation failure, 2 usage or configuration error.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

from . import __version__
from .config import (
    DISTRACTOR_COUNTS,
    STRATEGY_ALIASES,
    Mode,
    RunManifest,
    apply_overrides,
    load_config,
    load_environment,
    parse_strategy,
)
from .endpoint import ChatEndpoint
from .errors import CockpitError, ConfigError, MetricError, UnknownDeviceError
from .harness import agent_factory, run_batch
from .metrics import aggregate, render_table, report_from_dict
from .registry import DeviceRegistry, default_registry
from .scenario import (
    ScenarioRecord,
    execute_truth,
    expand_paths,
    load_record,
    load_scenario,
    replay_record,
    save_record,
    validate_scenario,
)
from .world import World

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


def configure_logging(verbose: bool = False) -> None:
    """Bracket-tagged log lines on stderr; stdout stays free for results."""
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("[%(name)s] %(message)s"))
    root = logging.getLogger()
    for existing in list(root.handlers):
        root.removeHandler(existing)
    root.addHandler(handler)
    root.setLevel(logging.DEBUG if verbose else logging.WARNING)


def _out(text: str) -> None:
    sys.stdout.write(text if text.endswith("\n") else text + "\n")


def _files(patterns: Sequence[str]) -> List[Path]:
    files = expand_paths(patterns)
    if not files:
        raise ConfigError(f"no scenario files match {list(patterns)}")
    return files


# ---------------------------------------------------------------------------
# commands


def cmd_validate(args: argparse.Namespace, registry: DeviceRegistry) -> int:
    failures = 0
    for path in _files(args.paths):
        try:
            scenario = load_scenario(path, registry)
            report = validate_scenario(scenario, World(registry))
            if not report.ok:
                failures += 1
                _out(f"FAIL {path}: " + "; ".join(report.diagnostics))
                continue
            record = execute_truth(scenario, World(registry))
        except (OSError, CockpitError) as e:
            failures += 1
            _out(f"FAIL {path}: {e}")
            continue
        if args.save:
            save_record(record, Path(args.save) / scenario.id)
        _out(f"ok   {path} ({scenario.id}, {scenario.category}, {len(scenario.turns)} turns)")
    _out(f"{failures} failed" if failures else "all scenarios valid")
    return EXIT_FAILURE if failures else EXIT_OK


def _truth_records(paths: Sequence[Path], registry: DeviceRegistry) -> Tuple[List[ScenarioRecord], int]:
    records, failures = [], 0
    for path in paths:
        try:
            records.append(execute_truth(load_scenario(path, registry), World(registry)))
        except (OSError, CockpitError) as e:
            failures += 1
            logger.warning("skipping %s: %s", path, e)
            _out(f"FAIL {path}: {e}")
    return records, failures


def _write_json(path: Path, data: object) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")


def cmd_run(args: argparse.Namespace, registry: DeviceRegistry) -> int:
    manifest = RunManifest(
        scenarios=args.paths,
        out_dir=Path(args.out),
        config_path=Path(args.config) if args.config else None,
        agent=args.agent,
        mode=Mode(args.mode) if args.mode else None,
        strategy=parse_strategy(args.strategy) if args.strategy else None,
        distractors=args.distractors,
        jobs=args.jobs,
    )
    config = apply_overrides(load_config(manifest.config_path), manifest)
    if manifest.agent == "endpoint" and config.endpoint is None:
        raise ConfigError(
            "the endpoint agent needs an endpoint: set it in --config or via "
            "COCKPIT_ENDPOINT_URL and COCKPIT_MODEL"
        )

    records, failures = _truth_records(_files(manifest.scenarios), registry)
    if not records:
        return EXIT_FAILURE
    endpoint = ChatEndpoint(config.endpoint) if manifest.agent == "endpoint" else None
    try:
        factory = agent_factory(manifest.agent, registry, endpoint, config.session.temperature)
        results, report = run_batch(records, factory, config.session, config.jobs, registry)
    finally:
        if endpoint is not None:
            endpoint.close()

    out = manifest.out_dir
    for result in results:
        scenario_id = result.transcript.scenario_id
        _write_json(out / "scenarios" / f"{scenario_id}.json", result.report.to_dict())
        transcript = out / "transcripts" / f"{scenario_id}.txt"
        transcript.parent.mkdir(parents=True, exist_ok=True)
        transcript.write_text(result.transcript.render(), encoding="utf-8")
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    (out / "report.txt").write_text(render_table(report), encoding="utf-8")
    _write_json(out / "run.json", {
        "version": __version__,
        "agent": manifest.agent,
        "session": config.session.model_dump(mode="json"),
        "jobs": config.jobs,
        "scenarios": [r.scenario.id for r in records],
    })
    logger.info("reports written to %s", out)
    _out(render_table(report))
    return EXIT_FAILURE if failures else EXIT_OK


def cmd_devices(args: argparse.Namespace, registry: DeviceRegistry) -> int:
    if args.api:
        if not registry.has_device(args.api):
            raise UnknownDeviceError(args.api)
        apis = registry.search_api(args.api)
        if args.json:
            _out(json.dumps([api.describe() for api in apis], indent=2, ensure_ascii=False))
        else:
            for api in apis:
                _out(api.render())
        return EXIT_OK
    modules = registry.search_module()
    if args.json:
        _out(json.dumps([m.model_dump() for m in modules], indent=2, ensure_ascii=False))
    else:
        width = max(len(m.device_id) for m in modules)
        for module in modules:
            _out(f"{module.device_id:<{width}}  {module.domain:<13} {module.description}")
    return EXIT_OK


def cmd_replay(args: argparse.Namespace, registry: DeviceRegistry) -> int:
    directories = []
    for name in args.records:
        path = Path(name)
        if (path / "manifest.json").is_file():
            directories.append(path)
        elif path.is_dir():
            directories.extend(sorted(p.parent for p in path.glob("*/manifest.json")))
    if not directories:
        raise ConfigError(f"no records found under {list(args.records)}")
    drifted = 0
    for directory in directories:
        try:
            result = replay_record(load_record(directory, registry), World(registry))
        except (OSError, ValueError, CockpitError) as e:
            drifted += 1
            _out(f"FAIL {directory}: {e}")
            continue
        if result.ok:
            _out(f"ok    {result.scenario_id}")
        else:
            drifted += 1
            detail = result.error or ", ".join(result.drift)
            _out(f"DRIFT {result.scenario_id}: {detail}")
    _out(f"{drifted} drifted" if drifted else "no drift")
    return EXIT_FAILURE if drifted else EXIT_OK


def cmd_report(args: argparse.Namespace, registry: DeviceRegistry) -> int:
    run_dir = Path(args.run_dir)
    files = sorted((run_dir / "scenarios").glob("*.json"))
    if not files:
        raise ConfigError(f"{run_dir} has no per-scenario reports")
    turns = []
    for path in files:
        try:
            turns.extend(report_from_dict(json.loads(path.read_text(encoding="utf-8"))).turns)
        except (OSError, json.JSONDecodeError, MetricError) as e:
            raise ConfigError(f"{path}: {e}") from e
    report = aggregate(turns)
    _out(report.to_json() if args.json else render_table(report))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cockpit-sim", description="Vehicle cockpit agent simulator")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    validate = sub.add_parser("validate", help="parse, check and truth-execute scenarios")
    validate.add_argument("paths", nargs="+", help="scenario files, directories or globs")
    validate.add_argument("--save", metavar="DIR", help="write a record per valid scenario under DIR")
    validate.set_defaults(func=cmd_validate)

    run = sub.add_parser("run", help="run agent sessions and write reports")
    run.add_argument("paths", nargs="+", help="scenario files, directories or globs")
    run.add_argument("--agent", choices=["oracle", "null", "endpoint"], default="endpoint")
    run.add_argument("--mode", choices=[m.value for m in Mode])
    run.add_argument("--strategy", choices=sorted(STRATEGY_ALIASES))
    run.add_argument("--distractors", type=int, choices=DISTRACTOR_COUNTS)
    run.add_argument("--jobs", type=int)
    run.add_argument("--out", required=True, metavar="DIR")
    run.add_argument("--config", metavar="FILE", help="JSON run configuration")
    run.set_defaults(func=cmd_run)

    devices = sub.add_parser("devices", help="list devices, or one device's APIs")
    devices.add_argument("--api", metavar="DEVICE")
    devices.add_argument("--json", action="store_true")
    devices.set_defaults(func=cmd_devices)

    replay = sub.add_parser("replay", help="re-execute stored records and report drift")
    replay.add_argument("records", nargs="+", help="record directories, or a directory of them")
    replay.set_defaults(func=cmd_replay)

    report = sub.add_parser("report", help="re-aggregate a run directory")
    report.add_argument("run_dir")
    report.add_argument("--json", action="store_true")
    report.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    load_environment()
    configure_logging(args.verbose)
    try:
        return args.func(args, default_registry())
    except (ConfigError, UnknownDeviceError) as e:
        sys.stderr.write(f"error: {e}\n")
        return EXIT_USAGE
    except CockpitError as e:
        sys.stderr.write(f"error: {e}\n")
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
