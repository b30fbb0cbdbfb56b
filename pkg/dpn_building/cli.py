"""Command-line entry points.

    dpn gen-weather   synthetic winter weather CSV
    dpn collect       excitation run of the simulated building, dumped as a dataset
    dpn train         SSM and RSSM zone models, one set per training seed
    dpn evaluate      forecast errors of the trained models by horizon
    dpn control       baseline and demand-response runs over the test month
    dpn report        metric tables, charts and a markdown summary of the runs

Every command writes into --out through a staging directory, so a failed
command leaves nothing behind, and records what it wrote in manifest.json.
"""

import argparse
import dataclasses
import json
import logging
import shutil
import sys
import tempfile
from collections.abc import Iterator, Sequence
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pandas as pd
import pendulum

from dpn_building.admm import InvalidPenaltyError
from dpn_building.charts import render_charts, render_report
from dpn_building.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from dpn_building.config import ConfigError, ExperimentConfig, load_config
from dpn_building.control import (
    PLANNERS,
    TRANSPORTS,
    ControlAbortedError,
    Model,
    control_loop,
    simulate_baseline,
)
from dpn_building.datahub import (
    Dataset,
    DatasetFormatError,
    EmptyPartitionError,
    LengthMismatchError,
    collect,
    excitation_schedule,
    split,
)
from dpn_building.evaluation import EvaluationResult, evaluate_model, summarize_seeds
from dpn_building.events import (
    EventScheduleError,
    calibrate_pmax,
    daily_events,
    event_windows,
    load_events,
    save_events,
)
from dpn_building.metrics import ReportError, UncoveredEventError, build_report, run_summary
from dpn_building.nn import ShapeError
from dpn_building.planners import DrEvent
from dpn_building.rssm import train_rssm
from dpn_building.runlog import RunLog, RunLogFormatError
from dpn_building.ssm import TrainingDivergedError, train_ssm
from dpn_building.thermal import (
    InvalidBuildingError,
    Simulator,
    WeatherRecord,
    default_building,
    load_building,
    save_building,
)
from dpn_building.units import HorizonError, format_horizon, parse_horizons
from dpn_building.weather import (
    WeatherFormatError,
    generate_winter_weather,
    load_weather_csv,
    save_weather_csv,
    weather_records,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 2
MANIFEST = "manifest.json"
MODEL_KINDS = ("ssm", "rssm")
PLANNER_MODELS = {"ddpn": "ssm", "sdpn": "rssm"}

# Errors reported as a one-line message instead of a traceback.
HANDLED_ERRORS = (
    CheckpointError,
    ConfigError,
    ControlAbortedError,
    DatasetFormatError,
    EmptyPartitionError,
    EventScheduleError,
    FileNotFoundError,
    HorizonError,
    InvalidBuildingError,
    InvalidPenaltyError,
    LengthMismatchError,
    ReportError,
    RunLogFormatError,
    ShapeError,
    TrainingDivergedError,
    UncoveredEventError,
    WeatherFormatError,
)


class CommandError(Exception):
    """Raised when a command's inputs do not allow it to run."""

    pass


@contextmanager
def staged(out: Path, command: str, args: argparse.Namespace) -> Iterator[Path]:
    """Yield a scratch directory whose contents are moved into out on success.

    Directories are merged with existing ones; files replace files of the
    same path. On failure the scratch directory is removed, along with out
    itself when this command created it and left it empty.
    """
    created = not out.exists()
    out.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=f".{command}-", dir=out))
    try:
        yield stage
    except BaseException:
        shutil.rmtree(stage, ignore_errors=True)
        if created and not any(out.iterdir()):
            out.rmdir()
        raise
    files = sorted(p.relative_to(stage).as_posix() for p in stage.rglob("*") if p.is_file())
    for entry in sorted(stage.iterdir()):
        _move(entry, out / entry.name)
    stage.rmdir()
    _update_manifest(out, command, args, files)
    logger.info("%s wrote %d files to %s", command, len(files), out)


def _move(source: Path, target: Path) -> None:
    if source.is_dir() and target.is_dir():
        for child in sorted(source.iterdir()):
            _move(child, target / child.name)
        source.rmdir()
        return
    if target.is_dir():
        shutil.rmtree(target)
    elif target.exists():
        target.unlink()
    source.rename(target)


def _update_manifest(out: Path, command: str, args: argparse.Namespace, files: list[str]) -> None:
    path = out / MANIFEST
    manifest = json.loads(path.read_text()) if path.exists() else {"commands": {}}
    arguments = {k: str(v) if isinstance(v, Path) else v for k, v in vars(args).items() if k != "handler"}
    manifest["commands"][command] = {
        "arguments": arguments,
        "files": files,
        "finished": pendulum.now("UTC").isoformat(),
    }
    path.write_text(json.dumps(manifest, indent=2))


def _building(config: ExperimentConfig):
    if config.building.path is not None:
        return load_building(Path(config.building.path))
    return default_building(config.building.n_floors, config.building.zones_per_floor, config.building.seed)


def _weather(path: Path, config: ExperimentConfig) -> list[WeatherRecord]:
    return weather_records(load_weather_csv(path), tz=config.weather.timezone)


def _settle(sim: Simulator, records: Sequence[WeatherRecord], setpoint: float) -> None:
    """Run the building at a constant setpoint to leave its initial rest state."""
    setpoints = np.full(sim.n_zones, setpoint)
    for record in records:
        sim.advance(setpoints, record)


def _models(directory: Path) -> list[Model]:
    paths = sorted(directory.glob("zone_*.json"))
    if not paths:
        raise CommandError(f"no zone checkpoints in {directory}")
    return [load_checkpoint(path) for path in paths]


def _timestamps(runlog: RunLog) -> list[pendulum.DateTime]:
    return [pendulum.parse(ts) for ts in runlog.frame["timestamp"]]


def gen_weather(args: argparse.Namespace, config: ExperimentConfig) -> None:
    settings = config.weather
    seed = settings.seed if args.seed is None else args.seed
    start = pendulum.parse(settings.start, tz=settings.timezone)
    frame = generate_winter_weather(start, settings.days, seed=seed, tz=settings.timezone)
    with staged(args.out, "gen-weather", args) as stage:
        save_weather_csv(frame, stage / "weather.csv")


def collect_dataset(args: argparse.Namespace, config: ExperimentConfig) -> None:
    records = _weather(args.weather or args.out / "weather.csv", config)
    topology, params = _building(config)
    warmup = config.data.warmup_steps
    if len(records) <= warmup:
        raise CommandError(f"{len(records)} weather rows leave nothing after {warmup} warmup steps")
    sim = Simulator(topology, params)
    _settle(sim, records[:warmup], config.control.baseline_setpoint)
    records = records[warmup:]
    seed = config.data.excitation_seed if args.seed is None else args.seed
    schedule = excitation_schedule(len(records), topology.n_zones, seed=seed)
    dataset = collect(sim, schedule, records, config.data.train_months)
    with staged(args.out, "collect", args) as stage:
        dataset.save(stage / "dataset")
        save_building(stage / "building.json", topology, params, seed=config.building.seed)


def train_models(args: argparse.Namespace, config: ExperimentConfig) -> None:
    dataset = Dataset.load(args.dataset or args.out / "dataset")
    train, val, _ = split(dataset, config.data.train_months, config.data.val_month, config.data.test_month)
    kinds = MODEL_KINDS if args.model == "both" else (args.model,)
    base_seed = config.training.seed if args.seed is None else args.seed
    with staged(args.out, "train", args) as stage:
        for kind in kinds:
            for index in range(args.seeds):
                settings = dataclasses.replace(config.training, seed=base_seed + index)
                directory = stage / "models" / kind / f"seed_{index}"
                for zone in range(dataset.n_zones):
                    trainer = train_ssm if kind == "ssm" else train_rssm
                    model, curve = trainer(train, settings, zone=zone, val=val)
                    save_checkpoint(model, directory / f"zone_{zone:02d}.json", settings)
                    curve.save_csv(directory / f"curve_{zone:02d}.csv")
                logger.info("Trained %s models for %d zones with seed %d", kind, dataset.n_zones, settings.seed)


def _mae_table(results: dict[str, list[EvaluationResult]]) -> pd.DataFrame:
    """Per model kind and zone, MAE by horizon averaged over seeds."""
    frames = []
    for kind, runs in results.items():
        mae = np.mean([run.mae for run in runs], axis=0)
        frame = pd.DataFrame(mae, columns=[format_horizon(h) for h in runs[0].horizons])
        frame.insert(0, "zone", range(len(frame)))
        frame.insert(0, "model", kind)
        frames.append(frame)
    return pd.concat(frames, ignore_index=True)


def evaluate_models(args: argparse.Namespace, config: ExperimentConfig) -> None:
    dataset = Dataset.load(args.dataset or args.out / "dataset")
    _, _, test = split(dataset, config.data.train_months, config.data.val_month, config.data.test_month)
    horizons = parse_horizons(args.horizons)
    models_dir = args.models or args.out / "models"
    results: dict[str, list[EvaluationResult]] = {}
    for kind in MODEL_KINDS:
        for seed_dir in sorted((models_dir / kind).glob("seed_*")):
            result = evaluate_model(_models(seed_dir), test, horizons, seed=config.control.seed)
            results.setdefault(kind, []).append(result)
    if not results:
        raise CommandError(f"no trained models under {models_dir}")
    with staged(args.out, "evaluate", args) as stage:
        directory = stage / "evaluation"
        directory.mkdir()
        summarize_seeds(results).to_csv(directory / "mape.csv", index=False)
        _mae_table(results).to_csv(directory / "mae.csv", index=False)
        document = {kind: [run.to_dict() for run in runs] for kind, runs in results.items()}
        (directory / "evaluation.json").write_text(json.dumps(document, indent=2))


def _test_period(records: list[WeatherRecord], config: ExperimentConfig) -> tuple[int, int]:
    """First row and length of the test month, leaving room for the planning lookahead."""
    months = np.array([r.timestamp.month for r in records])
    rows = np.flatnonzero(months == config.data.test_month)
    if len(rows) == 0:
        raise CommandError(f"the weather has no rows in month {config.data.test_month}")
    start = int(rows[0])
    n_steps = min(len(rows), len(records) - start - config.control.horizon + 1)
    if n_steps <= 0:
        raise CommandError("the weather ends before the test month has room for one planning horizon")
    return start, n_steps


def _events(
    args: argparse.Namespace, config: ExperimentConfig, baseline: RunLog, timestamps: list[pendulum.DateTime]
) -> list[DrEvent]:
    if args.events is not None:
        return load_events(args.events, timestamps)
    settings = config.events
    windows = event_windows(timestamps, settings.start_hour, settings.end_hour)
    p_max = settings.pmax_w
    if p_max is None:
        p_max = calibrate_pmax(baseline.frame["true_power_w"].to_numpy(), windows, settings.pmax_fraction)
    return daily_events(timestamps, p_max, settings.start_hour, settings.end_hour, settings.weekdays_only)


def control_runs(args: argparse.Namespace, config: ExperimentConfig) -> None:
    records = _weather(args.weather or args.out / "weather.csv", config)
    topology, params = _building(config)
    start, n_steps = _test_period(records, config)
    run_records = records[start:]
    timestamps = [r.timestamp for r in run_records[:n_steps]]

    sim = Simulator(topology, params)
    _settle(sim, records[max(0, start - config.data.warmup_steps) : start], config.control.baseline_setpoint)
    setpoint = config.control.baseline_setpoint
    calibration = simulate_baseline(sim.copy(), run_records, setpoint, n_steps=n_steps)
    events = _events(args, config, calibration, timestamps)
    baseline = simulate_baseline(sim.copy(), run_records, setpoint, events, n_steps=n_steps)
    logger.info("%d demand-response events over %d timesteps", len(events), n_steps)

    planner = args.planner or config.control.planner
    models_dir = args.models or args.out / "models" / PLANNER_MODELS[planner] / "seed_0"
    models = _models(models_dir)
    try:
        slacks = [float(s) for s in args.slack.split(",")] if args.slack else [config.control.nu]
        settings = [
            dataclasses.replace(
                config.control,
                planner=planner,
                nu=nu,
                transport=args.transport or config.control.transport,
                seed=config.control.seed if args.seed is None else args.seed,
            )
            for nu in slacks
        ]
    except ValueError as e:
        raise CommandError(f"invalid controller settings: {e}") from e
    retrain = config.training if config.control.retrain_every else None

    with staged(args.out, "control", args) as stage:
        runs = stage / "runs"
        baseline.save(runs / "baseline", summary=run_summary(baseline, events))
        save_events(runs / "baseline" / "events.ics", events, timestamps)
        for run_config in settings:
            runlog = control_loop(sim.copy(), models, events, run_config, run_records, n_steps, retrain)
            name = f"{planner}_nu{run_config.nu:g}"
            runlog.save(runs / name, summary=run_summary(runlog, events))
            save_events(runs / name / "events.ics", events, timestamps)


def _run_dirs(directory: Path) -> list[Path]:
    if not directory.is_dir():
        raise FileNotFoundError(f"no run directory {directory}")
    runs = sorted(p for p in directory.iterdir() if (p / "runlog.csv").is_file())
    if not runs:
        raise CommandError(f"{directory} holds no run logs")
    return runs


def report_runs(args: argparse.Namespace, config: ExperimentConfig) -> None:
    runs = {}
    for directory in _run_dirs(args.runs or args.out / "runs"):
        runlog = RunLog.load(directory)
        ics = directory / "events.ics"
        events = load_events(ics, _timestamps(runlog)) if ics.exists() else []
        runs[directory.name] = (runlog, events)
    evaluation = args.evaluation or args.out / "evaluation"
    mae = pd.read_csv(evaluation / "mae.csv") if (evaluation / "mae.csv").exists() else None
    mape = pd.read_csv(evaluation / "mape.csv") if (evaluation / "mape.csv").exists() else None

    report = build_report(runs, mae=mae, mape=mape)
    charts = render_charts(report, runs)
    with staged(args.out, "report", args) as stage:
        directory = stage / "report"
        report.save(directory)
        for name, svg in charts.items():
            (directory / name).write_text(svg)
        (directory / "report.md").write_text(render_report(report, sorted(charts)))


def _parser(default_out: Path) -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML or JSON experiment configuration")
    common.add_argument("--out", type=Path, default=default_out, help="artifact directory")
    common.add_argument("--seed", type=int, help="overrides the configured seed of this command")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    parser = argparse.ArgumentParser(prog="dpn", description="Demand response with distributed planning networks.")
    commands = parser.add_subparsers(dest="command", required=True)

    command = commands.add_parser("gen-weather", parents=[common], help="generate synthetic winter weather")
    command.set_defaults(handler=gen_weather)

    command = commands.add_parser("collect", parents=[common], help="collect an excitation dataset")
    command.add_argument("--weather", type=Path, help="weather CSV (default OUT/weather.csv)")
    command.set_defaults(handler=collect_dataset)

    command = commands.add_parser("train", parents=[common], help="train zone models")
    command.add_argument("--dataset", type=Path, help="dataset directory (default OUT/dataset)")
    command.add_argument("--model", choices=(*MODEL_KINDS, "both"), default="both")
    command.add_argument("--seeds", type=int, default=1, help="number of training seeds")
    command.set_defaults(handler=train_models)

    command = commands.add_parser("evaluate", parents=[common], help="forecast errors on the test month")
    command.add_argument("--dataset", type=Path, help="dataset directory (default OUT/dataset)")
    command.add_argument("--models", type=Path, help="model directory (default OUT/models)")
    command.add_argument("--horizons", default="1h,2h,4h", help="comma-separated horizons, e.g. 1h,2h,4h")
    command.set_defaults(handler=evaluate_models)

    command = commands.add_parser("control", parents=[common], help="run the demand-response controller")
    command.add_argument("--weather", type=Path, help="weather CSV (default OUT/weather.csv)")
    command.add_argument("--models", type=Path, help="zone checkpoints (default OUT/models/KIND/seed_0)")
    command.add_argument("--planner", choices=PLANNERS)
    command.add_argument("--slack", help="constraint slack nu, or a comma-separated list of them")
    command.add_argument("--transport", choices=TRANSPORTS)
    command.add_argument("--events", type=Path, help="iCalendar event schedule instead of daily events")
    command.set_defaults(handler=control_runs)

    command = commands.add_parser("report", parents=[common], help="tables and charts of the runs")
    command.add_argument("--runs", type=Path, help="directory of run logs (default OUT/runs)")
    command.add_argument("--evaluation", type=Path, help="evaluation directory (default OUT/evaluation)")
    command.set_defaults(handler=report_runs)
    return parser


def main(argv: Sequence[str] | None = None, default_out: Path = Path("artifacts"), log_level: str = "INFO") -> int:
    """Run one command; returns the process exit status."""
    parser = _parser(default_out)
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_FAILURE
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else log_level.upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        config = load_config(args.config)
        args.handler(args, config)
    except (CommandError, *HANDLED_ERRORS) as e:
        message = str(e).replace("\n", " ")
        print(f"dpn {args.command}: {message}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK
