"""SVG charts and the markdown summary, rendered from Jinja templates.

Geometry is computed here; the templates only lay out the elements.
"""

import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass

import numpy as np
import pandas as pd
from jinja2 import Environment, PackageLoader, select_autoescape

from dpn_building.metrics import MetricsReport
from dpn_building.planners import DrEvent
from dpn_building.runlog import RunLog

logger = logging.getLogger(__name__)

WIDTH = 900
HEIGHT = 320
MARGIN = {"left": 64, "right": 16, "top": 24, "bottom": 40}
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")

_environment = Environment(
    loader=PackageLoader("dpn_building", "templates"),
    autoescape=select_autoescape(enabled_extensions=("svg.j2",), default_for_string=False),
    keep_trailing_newline=True,
    trim_blocks=True,
    lstrip_blocks=True,
)


@dataclass(frozen=True)
class Frame:
    """Maps data coordinates onto the plot area."""

    x_min: float
    x_max: float
    y_min: float
    y_max: float

    @property
    def left(self) -> float:
        return MARGIN["left"]

    @property
    def right(self) -> float:
        return WIDTH - MARGIN["right"]

    @property
    def top(self) -> float:
        return MARGIN["top"]

    @property
    def bottom(self) -> float:
        return HEIGHT - MARGIN["bottom"]

    def x(self, value: float) -> float:
        span = self.x_max - self.x_min or 1.0
        return round(self.left + (value - self.x_min) / span * (self.right - self.left), 2)

    def y(self, value: float) -> float:
        span = self.y_max - self.y_min or 1.0
        return round(self.bottom - (value - self.y_min) / span * (self.bottom - self.top), 2)

    def ticks(self, count: int = 5) -> list[dict]:
        values = np.linspace(self.y_min, self.y_max, count)
        return [{"y": self.y(v), "label": f"{v:.3g}"} for v in values]


def _polylines(frame: Frame, xs: np.ndarray, ys: np.ndarray) -> list[str]:
    """Point lists of the finite runs of a series."""
    lines = []
    current: list[str] = []
    for x, y in zip(xs, ys):
        if np.isfinite(y):
            current.append(f"{frame.x(x)},{frame.y(y)}")
        elif current:
            lines.append(" ".join(current))
            current = []
    if current:
        lines.append(" ".join(current))
    return lines


def power_chart(runlog: RunLog, events: Sequence[DrEvent], title: str = "Building power") -> str:
    """True and predicted building power over the run, with the P^max caps."""
    data = runlog.frame
    t = data["t"].to_numpy(dtype=np.float64)
    true_power = data["true_power_w"].to_numpy(dtype=np.float64) / 1000.0
    predicted = data["predicted_power_w"].to_numpy(dtype=np.float64) / 1000.0
    caps = [float(np.max(e.p_max)) / 1000.0 for e in events]
    finite = np.concatenate([true_power, predicted[np.isfinite(predicted)], caps])
    frame = Frame(float(t.min()), float(t.max()) + 1.0, 0.0, float(finite.max()) * 1.05 if len(finite) else 1.0)
    bands = [
        {
            "x": frame.x(e.start),
            "width": round(frame.x(e.end) - frame.x(e.start), 2),
            "cap_y": frame.y(cap),
            "x_end": frame.x(e.end),
        }
        for e, cap in zip(events, caps)
    ]
    return _environment.get_template("power.svg.j2").render(
        title=title,
        width=WIDTH,
        height=HEIGHT,
        frame=frame,
        ticks=frame.ticks(),
        bands=bands,
        true_lines=_polylines(frame, t, true_power),
        predicted_lines=_polylines(frame, t, predicted),
        colors=COLORS,
    )


def residual_chart(curves: pd.DataFrame, title: str = "Primal residual by ADMM iteration") -> str:
    """Mean primal residual per iteration with a one-standard-deviation band, one line per run."""
    if "run" not in curves.columns:
        curves = curves.assign(run="run")
    top = float((curves["mean"] + curves["std"].fillna(0.0)).max()) if len(curves) else 1.0
    frame = Frame(1.0, float(curves["iter"].max()) if len(curves) else 2.0, 0.0, top * 1.05 or 1.0)
    series = []
    for index, (name, group) in enumerate(curves.groupby("run", sort=True)):
        iters = group["iter"].to_numpy(dtype=np.float64)
        mean = group["mean"].to_numpy(dtype=np.float64)
        std = group["std"].fillna(0.0).to_numpy(dtype=np.float64)
        upper = [f"{frame.x(i)},{frame.y(m + s)}" for i, m, s in zip(iters, mean, std)]
        lower = [f"{frame.x(i)},{frame.y(max(m - s, 0.0))}" for i, m, s in zip(iters, mean, std)]
        series.append(
            {
                "name": name,
                "color": COLORS[index % len(COLORS)],
                "band": " ".join(upper + lower[::-1]),
                "line": " ".join(f"{frame.x(i)},{frame.y(m)}" for i, m in zip(iters, mean)),
            }
        )
    return _environment.get_template("residuals.svg.j2").render(
        title=title, width=WIDTH, height=HEIGHT, frame=frame, ticks=frame.ticks(), series=series
    )


def slack_chart(violations: pd.DataFrame, title: str = "Constraint violations by run") -> str:
    """Mean actual and predicted violation percentage of every run, as paired bars."""
    summary = (
        violations.groupby("run", sort=False)[["actual_pct", "predicted_pct"]].mean().fillna(0.0).reset_index()
    )
    highest = float(summary[["actual_pct", "predicted_pct"]].to_numpy().max()) if len(summary) else 0.0
    frame = Frame(0.0, float(max(len(summary), 1)), 0.0, max(highest * 1.1, 1.0))
    slot = (frame.right - frame.left) / max(len(summary), 1)
    bars = []
    for index, row in summary.iterrows():
        x = frame.left + index * slot
        for offset, column, color in ((0.15, "actual_pct", COLORS[0]), (0.5, "predicted_pct", COLORS[1])):
            y = frame.y(row[column])
            bars.append(
                {
                    "x": round(x + offset * slot, 2),
                    "y": y,
                    "width": round(0.35 * slot, 2),
                    "height": round(frame.bottom - y, 2),
                    "color": color,
                    "value": f"{row[column]:.1f}",
                }
            )
    labels = [
        {"x": round(frame.left + (i + 0.5) * slot, 2), "text": str(run)} for i, run in enumerate(summary["run"])
    ]
    return _environment.get_template("slack.svg.j2").render(
        title=title, width=WIDTH, height=HEIGHT, frame=frame, ticks=frame.ticks(), bars=bars, labels=labels
    )


def render_report(report: MetricsReport, charts: Sequence[str] = ()) -> str:
    """The markdown summary of a report, linking the chart files."""

    def table(frame: pd.DataFrame | None) -> list[dict]:
        return [] if frame is None else frame.to_dict(orient="records")

    return _environment.get_template("report.md.j2").render(
        violations=table(report.violations),
        distribution=table(report.distribution),
        rebound=table(report.rebound),
        mape=table(report.mape),
        mae=table(report.mae),
        timing=report.timing,
        effort=report.effort,
        notes=report.notes,
        charts=list(charts),
    )


def render_charts(
    report: MetricsReport, runs: Mapping[str, tuple[RunLog, Sequence[DrEvent]]]
) -> dict[str, str]:
    """Every chart of a report, keyed by file name."""
    charts = {
        f"power_{name}.svg": power_chart(log, events, f"Building power: {name}")
        for name, (log, events) in runs.items()
    }
    charts["residuals.svg"] = residual_chart(report.residuals)
    charts["slack.svg"] = slack_chart(report.violations)
    logger.debug("Rendered %d charts", len(charts))
    return charts
