"""Run logs of control and baseline runs.

A run directory holds:

- ``runlog.csv``: one row per simulated timestep
- ``episodes.json``: one entry per planning episode with its ADMM history
- ``timing.json``: wall-clock seconds per episode
- ``run.json``: zone count, planner settings and timezone

Timing lives only in ``timing.json`` so two runs of the same scenario can
be compared file by file.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Self

import numpy as np
import pandas as pd
import pendulum

from dpn_building.admm import IterationRecord

logger = logging.getLogger(__name__)

OUTCOMES = ("warmup", "baseline", "no_action", "saturate", "admm")


class RunLogFormatError(ValueError):
    """Raised when a run directory cannot be read back."""

    pass


@dataclass
class EpisodeTiming:
    """Seconds spent in one planning episode."""

    dpn_call: float = 0.0
    coordinator_iter: list[float] = field(default_factory=list)
    lc_iter: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "dpn_call": self.dpn_call,
            "coordinator_iter": list(self.coordinator_iter),
            "lc_iter": list(self.lc_iter),
        }

    @classmethod
    def from_dict(cls, data: dict) -> Self:
        return cls(
            dpn_call=float(data["dpn_call"]),
            coordinator_iter=[float(v) for v in data["coordinator_iter"]],
            lc_iter=[float(v) for v in data["lc_iter"]],
        )


@dataclass(eq=False)
class EpisodeLog:
    """One planning episode: conversion outcome, plans and ADMM residuals."""

    t: int
    outcome: str
    p_max: np.ndarray  # (H,) W, inf outside events
    p_bu: np.ndarray  # (H,) W
    p_lb: np.ndarray  # (H,) W
    p_tot: np.ndarray | None  # (H,) W, only when ADMM ran
    deltas: np.ndarray  # (N, H)
    predicted_w: np.ndarray  # (H,) building power with the first changes held
    iterations: int = 0
    converged: bool = True
    history: list[IterationRecord] = field(default_factory=list)
    timing: EpisodeTiming = field(default_factory=EpisodeTiming)

    def to_dict(self) -> dict:
        return {
            "t": self.t,
            "outcome": self.outcome,
            "p_max": _floats(self.p_max),
            "p_bu": _floats(self.p_bu),
            "p_lb": _floats(self.p_lb),
            "p_tot": None if self.p_tot is None else _floats(self.p_tot),
            "deltas": [_floats(row) for row in self.deltas],
            "predicted_w": _floats(self.predicted_w),
            "iterations": self.iterations,
            "converged": self.converged,
            "history": [
                {
                    "iter": r.iteration,
                    "lagrangian": r.lagrangian,
                    "primal_residual": r.primal_residual,
                    "block_residuals": list(r.block_residuals),
                    "dual_residual": r.dual_residual,
                }
                for r in self.history
            ],
        }

    @classmethod
    def from_dict(cls, data: dict, timing: EpisodeTiming | None = None) -> Self:
        return cls(
            t=int(data["t"]),
            outcome=str(data["outcome"]),
            p_max=np.array(data["p_max"], dtype=np.float64),
            p_bu=np.array(data["p_bu"], dtype=np.float64),
            p_lb=np.array(data["p_lb"], dtype=np.float64),
            p_tot=None if data["p_tot"] is None else np.array(data["p_tot"], dtype=np.float64),
            deltas=np.array(data["deltas"], dtype=np.float64),
            predicted_w=np.array(data["predicted_w"], dtype=np.float64),
            iterations=int(data["iterations"]),
            converged=bool(data["converged"]),
            history=[
                IterationRecord(
                    iteration=int(r["iter"]),
                    lagrangian=float(r["lagrangian"]),
                    primal_residual=float(r["primal_residual"]),
                    block_residuals=tuple(float(v) for v in r["block_residuals"]),
                    dual_residual=float(r["dual_residual"]),
                )
                for r in data["history"]
            ],
            timing=timing if timing is not None else EpisodeTiming(),
        )

    @property
    def primal_residuals(self) -> np.ndarray:
        return np.array([r.primal_residual for r in self.history])


def _floats(values: np.ndarray) -> list[float]:
    return [float(v) for v in np.asarray(values).ravel()]


class RunLog:
    """Per-timestep records plus planning episodes of one run."""

    n_zones: int
    meta: dict
    episodes: list[EpisodeLog]

    def __init__(self, n_zones: int, meta: dict | None = None):
        """Start an empty log.

        Args:
            n_zones: Number of zones
            meta: Settings of the run, stored in run.json
        """
        self.n_zones = n_zones
        self.meta = dict(meta or {})
        self.episodes = []
        self._rows: list[dict] = []
        self._frame: pd.DataFrame | None = None

    def __len__(self) -> int:
        return len(self._rows) if self._frame is None else len(self._frame)

    def record(
        self,
        t: int,
        timestamp: pendulum.DateTime,
        p_max_w: float,
        true_power_w: float,
        predicted_power_w: float,
        outcome: str,
        episode: int,
        replan: bool,
        deltas: np.ndarray,
        zone_powers: np.ndarray,
    ) -> None:
        """Append the record of timestep t."""
        if outcome not in OUTCOMES:
            raise ValueError(f"unknown outcome {outcome!r}")
        if self._frame is not None:
            raise ValueError("cannot record into a log read from disk")
        row = {
            "t": t,
            "timestamp": timestamp.isoformat(),
            "p_max_w": float(p_max_w),
            "true_power_w": float(true_power_w),
            "predicted_power_w": float(predicted_power_w),
            "outcome": outcome,
            "episode": episode,
            "replan": replan,
        }
        row.update({f"delta_{i:02d}": float(d) for i, d in enumerate(deltas)})
        row.update({f"power_{i:02d}": float(p) for i, p in enumerate(zone_powers)})
        self._rows.append(row)

    @property
    def frame(self) -> pd.DataFrame:
        if self._frame is not None:
            return self._frame
        return pd.DataFrame(self._rows)

    def deltas(self) -> np.ndarray:
        """Applied setpoint changes, (T, N)."""
        return self.frame[[f"delta_{i:02d}" for i in range(self.n_zones)]].to_numpy()

    def zone_powers(self) -> np.ndarray:
        return self.frame[[f"power_{i:02d}" for i in range(self.n_zones)]].to_numpy()

    def save(self, directory: Path, summary: dict | None = None) -> None:
        """Write the run directory, plus summary.json when a summary is given."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        self.frame.to_csv(directory / "runlog.csv", index=False)
        (directory / "episodes.json").write_text(
            json.dumps([episode.to_dict() for episode in self.episodes], indent=1)
        )
        (directory / "timing.json").write_text(
            json.dumps([episode.timing.to_dict() for episode in self.episodes])
        )
        (directory / "run.json").write_text(
            json.dumps({"n_zones": self.n_zones, **self.meta}, indent=2)
        )
        if summary is not None:
            (directory / "summary.json").write_text(json.dumps(summary, indent=2))
        logger.info("Wrote run log with %d timesteps to %s", len(self), directory)

    @classmethod
    def load(cls, directory: Path) -> "RunLog":
        """Read a run directory written by save().

        Raises:
            FileNotFoundError: If runlog.csv or run.json is missing
            RunLogFormatError: If the files are malformed
        """
        directory = Path(directory)
        try:
            meta = json.loads((directory / "run.json").read_text())
            n_zones = int(meta.pop("n_zones"))
            frame = pd.read_csv(directory / "runlog.csv", float_precision="round_trip")
            episodes_path = directory / "episodes.json"
            timing_path = directory / "timing.json"
            episodes = json.loads(episodes_path.read_text()) if episodes_path.exists() else []
            timing = json.loads(timing_path.read_text()) if timing_path.exists() else []
        except (json.JSONDecodeError, KeyError, TypeError, ValueError, pd.errors.ParserError) as e:
            raise RunLogFormatError(f"{directory.name}: {e}") from e
        missing = {"t", "true_power_w", "predicted_power_w", "p_max_w", "outcome"} - set(frame.columns)
        if missing or len(frame) == 0:
            raise RunLogFormatError(f"{directory.name}/runlog.csv lacks rows or columns {sorted(missing)}")
        log = cls(n_zones, meta)
        log._frame = frame
        try:
            log.episodes = [
                EpisodeLog.from_dict(e, EpisodeTiming.from_dict(t) if t else None)
                for e, t in zip(episodes, timing + [None] * (len(episodes) - len(timing)))
            ]
        except (KeyError, TypeError, ValueError) as e:
            raise RunLogFormatError(f"{directory.name}/episodes.json: {e}") from e
        return log
