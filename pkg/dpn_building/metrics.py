"""Metrics computed from run logs.

Every function here is a pure function of its logs and events, so a report
regenerated from the same run directories is identical.
"""

import json
import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from dpn_building.planners import DrEvent
from dpn_building.runlog import RunLog
from dpn_building.units import STEPS_PER_HOUR

logger = logging.getLogger(__name__)

BUCKETS = ("zero", "up_to_1", "up_to_2", "over_2")
ACTION_OUTCOMES = ("admm", "saturate")


class UncoveredEventError(ValueError):
    """Raised when a run log does not cover every timestep of an event."""

    pass


class ReportError(ValueError):
    """Raised when a metrics report breaks its own invariants."""

    pass


def _event_rows(runlog: RunLog, event: DrEvent) -> pd.DataFrame:
    frame = runlog.frame
    rows = frame[(frame["t"] >= event.start) & (frame["t"] < event.end)]
    if len(rows) != event.end - event.start:
        raise UncoveredEventError(
            f"event [{event.start}, {event.end}) has {len(rows)} of {event.end - event.start} timesteps in the log"
        )
    return rows.sort_values("t")


def violation_metrics(runlog: RunLog, events: Sequence[DrEvent]) -> pd.DataFrame:
    """Per event, the share of timesteps where power exceeded P^max.

    ``actual_pct`` uses the true building power, ``predicted_pct`` the
    building power the planner predicted when it decided. The predicted
    share is NaN when the planner made no prediction for some event timestep.

    Raises:
        UncoveredEventError: If an event reaches outside the log
    """
    rows = []
    for event in events:
        window = _event_rows(runlog, event)
        steps = event.end - event.start
        true_power = window["true_power_w"].to_numpy()
        predicted = window["predicted_power_w"].to_numpy()
        outcomes = window["outcome"].to_numpy()
        actual_pct = 100.0 * int(np.sum(true_power > event.p_max)) / steps
        if np.all(np.isfinite(predicted)):
            predicted_pct = 100.0 * int(np.sum(predicted > event.p_max)) / steps
        else:
            predicted_pct = float("nan")
        rows.append(
            {
                "start": event.start,
                "end": event.end,
                "date": str(window["timestamp"].iloc[0])[:10],
                "p_max_w": float(np.max(event.p_max)),
                "actual_pct": actual_pct,
                "predicted_pct": predicted_pct,
                "acted": bool(np.isin(outcomes, ACTION_OUTCOMES).any()),
                "peak_w": float(true_power.max()),
            }
        )
    return pd.DataFrame(
        rows,
        columns=["start", "end", "date", "p_max_w", "actual_pct", "predicted_pct", "acted", "peak_w"],
    )


def _event_mask(runlog: RunLog, events: Sequence[DrEvent], acted_only: bool) -> np.ndarray:
    frame = runlog.frame
    t = frame["t"].to_numpy()
    mask = np.zeros(len(frame), dtype=bool)
    for event in events:
        inside = (t >= event.start) & (t < event.end)
        if acted_only and not np.isin(frame["outcome"].to_numpy()[inside], ACTION_OUTCOMES).any():
            continue
        mask |= inside
    return mask


def setpoint_distribution(
    runlog: RunLog, events: Sequence[DrEvent] | None = None, acted_only: bool = False
) -> pd.DataFrame:
    """Per zone, the share of timesteps in each |delta| bucket, in percent.

    Buckets are delta = 0, 0 < |delta| <= 1, 1 < |delta| <= 2 and |delta| > 2.
    With events given only event timesteps count.
    """
    deltas = np.abs(runlog.deltas())
    if events is not None:
        deltas = deltas[_event_mask(runlog, events, acted_only)]
    rows = []
    for zone in range(runlog.n_zones):
        column = deltas[:, zone]
        n = max(len(column), 1)
        rows.append(
            {
                "zone": zone,
                "zero": 100.0 * np.sum(column == 0.0) / n,
                "up_to_1": 100.0 * np.sum((column > 0.0) & (column <= 1.0)) / n,
                "up_to_2": 100.0 * np.sum((column > 1.0) & (column <= 2.0)) / n,
                "over_2": 100.0 * np.sum(column > 2.0) / n,
                "mean_abs_delta": float(column.mean()) if len(column) else 0.0,
            }
        )
    return pd.DataFrame(rows, columns=["zone", *BUCKETS, "mean_abs_delta"])


def effort_sharing(runlog: RunLog, events: Sequence[DrEvent]) -> dict:
    """Mean |delta| per zone during events that needed action, and their spread."""
    deltas = np.abs(runlog.deltas())[_event_mask(runlog, events, acted_only=True)]
    if len(deltas) == 0:
        return {"mean_abs_delta": [0.0] * runlog.n_zones, "min": 0.0, "max": 0.0, "ratio": float("nan")}
    means = deltas.mean(axis=0)
    low = float(means.min())
    return {
        "mean_abs_delta": [float(m) for m in means],
        "min": low,
        "max": float(means.max()),
        "ratio": float(means.max()) / low if low > 0 else float("inf"),
    }


def _mean_std(values: Sequence[float]) -> dict:
    values = np.asarray(values, dtype=np.float64)
    if len(values) == 0:
        return {"mean": float("nan"), "std": float("nan"), "n": 0}
    return {"mean": float(values.mean()), "std": float(values.std()), "n": int(len(values))}


def timing_summary(runlog: RunLog) -> dict:
    """Mean and standard deviation of the seconds per planning call, coordinator and LC iteration."""
    acted = [e for e in runlog.episodes if e.outcome == "admm"]
    return {
        "dpn_call": _mean_std([e.timing.dpn_call for e in acted]),
        "coordinator_iter": _mean_std([v for e in acted for v in e.timing.coordinator_iter]),
        "lc_iter": _mean_std([v for e in acted for v in e.timing.lc_iter]),
    }


def post_event_peaks(runlog: RunLog, events: Sequence[DrEvent], hours: float = 1.0) -> pd.DataFrame:
    """Peak true building power in the hours right after each event ends."""
    frame = runlog.frame
    t = frame["t"].to_numpy()
    power = frame["true_power_w"].to_numpy()
    span = int(round(hours * STEPS_PER_HOUR))
    rows = []
    for event in events:
        after = (t >= event.end) & (t < event.end + span)
        if after.sum() < span:
            raise UncoveredEventError(f"the log ends within {hours} h after the event ending at {event.end}")
        rows.append({"start": event.start, "end": event.end, "peak_after_w": float(power[after].max())})
    return pd.DataFrame(rows, columns=["start", "end", "peak_after_w"])


def residual_curves(runlog: RunLog) -> pd.DataFrame:
    """Mean and standard deviation of the primal residual at each ADMM iteration."""
    histories = [e.primal_residuals for e in runlog.episodes if e.outcome == "admm" and e.history]
    rows = []
    longest = max((len(h) for h in histories), default=0)
    for k in range(longest):
        values = [h[k] for h in histories if len(h) > k]
        rows.append({"iter": k + 1, **_mean_std(values)})
    return pd.DataFrame(rows, columns=["iter", "mean", "std", "n"])


def residual_drop(runlog: RunLog, split: int = 10) -> pd.DataFrame:
    """Per ADMM episode, mean primal residual over the first `split` iterations and the rest."""
    rows = []
    for index, episode in enumerate(runlog.episodes):
        residuals = episode.primal_residuals
        if episode.outcome != "admm" or len(residuals) == 0:
            continue
        late = residuals[split:]
        rows.append(
            {
                "episode": index,
                "t": episode.t,
                "iterations": len(residuals),
                "first": float(residuals[0]),
                "last": float(residuals[-1]),
                "early_mean": float(residuals[:split].mean()),
                "late_mean": float(late.mean()) if len(late) else float("nan"),
            }
        )
    return pd.DataFrame(
        rows, columns=["episode", "t", "iterations", "first", "last", "early_mean", "late_mean"]
    )


def run_summary(runlog: RunLog, events: Sequence[DrEvent]) -> dict:
    """The summary.json document of a control run."""
    violations = violation_metrics(runlog, events)
    deltas = runlog.deltas()
    return {
        "violation_pct": _finite_mean(violations["actual_pct"]),
        "predicted_violation_pct": _finite_mean(violations["predicted_pct"]),
        "events": len(violations),
        "events_acted": int(violations["acted"].sum()),
        "mean_delta_per_zone": [float(v) for v in deltas.mean(axis=0)],
        "timing": timing_summary(runlog),
    }


def _finite_mean(values: pd.Series) -> float | None:
    values = values.to_numpy(dtype=np.float64)
    values = values[np.isfinite(values)]
    return float(values.mean()) if len(values) else None


@dataclass
class MetricsReport:
    """Tables of a set of runs, plus optional forecasting results.

    ``violations`` has one row per run and event, ``distribution`` one row per
    run and zone, ``timing`` maps a run name to its timing summary.
    """

    violations: pd.DataFrame
    distribution: pd.DataFrame
    rebound: pd.DataFrame
    residuals: pd.DataFrame
    timing: dict[str, dict]
    effort: dict[str, dict]
    mae: pd.DataFrame | None = None
    mape: pd.DataFrame | None = None
    notes: list[str] = field(default_factory=list)

    def validate(self) -> None:
        """Check percentage ranges and bucket sums.

        Raises:
            ReportError: If a percentage leaves [0, 100] or buckets do not add up to 100
        """
        for column in ("actual_pct", "predicted_pct"):
            values = self.violations[column].to_numpy(dtype=np.float64)
            values = values[np.isfinite(values)]
            if np.any((values < 0) | (values > 100)):
                raise ReportError(f"{column} outside [0, 100]")
        if len(self.distribution):
            sums = self.distribution[list(BUCKETS)].sum(axis=1).to_numpy()
            empty = self.distribution[list(BUCKETS)].to_numpy().sum(axis=1) == 0
            if np.any(~empty & (np.abs(sums - 100.0) > 0.01)):
                raise ReportError("setpoint buckets do not add up to 100%")

    def to_dict(self) -> dict:
        def records(frame: pd.DataFrame | None) -> list[dict] | None:
            if frame is None:
                return None
            return json.loads(frame.to_json(orient="records"))

        return {
            "violations": records(self.violations),
            "distribution": records(self.distribution),
            "rebound": records(self.rebound),
            "residuals": records(self.residuals),
            "timing": self.timing,
            "effort": self.effort,
            "mae": records(self.mae),
            "mape": records(self.mape),
            "notes": list(self.notes),
        }

    def save(self, directory: Path) -> list[Path]:
        """Write every table as CSV plus report.json; returns the files written."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        written = []
        tables = {
            "violations.csv": self.violations,
            "setpoint_distribution.csv": self.distribution,
            "rebound.csv": self.rebound,
            "residuals.csv": self.residuals,
            "mae.csv": self.mae,
            "mape.csv": self.mape,
        }
        for name, frame in tables.items():
            if frame is None:
                continue
            frame.to_csv(directory / name, index=False)
            written.append(directory / name)
        (directory / "report.json").write_text(json.dumps(self.to_dict(), indent=2))
        written.append(directory / "report.json")
        return written


def build_report(
    runs: Mapping[str, tuple[RunLog, Sequence[DrEvent]]],
    mae: pd.DataFrame | None = None,
    mape: pd.DataFrame | None = None,
) -> MetricsReport:
    """Gather the metric tables of several named runs.

    Raises:
        ValueError: If no run is given
        UncoveredEventError: If a run's log does not cover its events
    """
    if not runs:
        raise ValueError("no runs to report on")
    violations, distributions, rebounds, residuals = [], [], [], []
    timing, effort = {}, {}
    notes = []
    for name, (runlog, events) in runs.items():
        table = violation_metrics(runlog, events)
        table.insert(0, "run", name)
        table.insert(1, "planner", runlog.meta.get("planner", ""))
        table.insert(2, "nu", runlog.meta.get("nu", float("nan")))
        violations.append(table)
        distribution = setpoint_distribution(runlog, events, acted_only=True)
        distribution.insert(0, "run", name)
        distributions.append(distribution)
        complete = [e for e in events if e.end + STEPS_PER_HOUR <= len(runlog)]
        if len(complete) < len(events):
            notes.append(f"{name}: {len(events) - len(complete)} events end too late for a rebound peak")
        rebound = post_event_peaks(runlog, complete)
        rebound.insert(0, "run", name)
        rebounds.append(rebound)
        curve = residual_curves(runlog)
        curve.insert(0, "run", name)
        residuals.append(curve)
        timing[name] = timing_summary(runlog)
        effort[name] = effort_sharing(runlog, events)
    report = MetricsReport(
        violations=pd.concat(violations, ignore_index=True),
        distribution=pd.concat(distributions, ignore_index=True),
        rebound=pd.concat(rebounds, ignore_index=True),
        residuals=pd.concat(residuals, ignore_index=True),
        timing=timing,
        effort=effort,
        mae=mae,
        mape=mape,
        notes=notes,
    )
    report.validate()
    logger.info("Report over %d runs and %d events", len(runs), len(report.violations))
    return report
