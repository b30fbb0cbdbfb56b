"""Experiment configuration.

A TOML file (or a JSON document with the same keys) with the sections
[building], [weather], [data], [training], [planner], [control] and [events].
Every section is optional; missing keys keep their defaults.
"""

import dataclasses
import json
import logging
import tomllib
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Self

from dpn_building.control import ControlConfig
from dpn_building.datahub import DEFAULT_TEST_MONTH, DEFAULT_TRAIN_MONTHS, DEFAULT_VAL_MONTH
from dpn_building.events import DEFAULT_END_HOUR, DEFAULT_PMAX_FRACTION, DEFAULT_START_HOUR
from dpn_building.nn import TrainConfig
from dpn_building.planners import ComfortBounds
from dpn_building.weather import DEFAULT_TIMEZONE

logger = logging.getLogger(__name__)

SECTIONS = ("building", "weather", "data", "training", "planner", "control", "events")

# [planner] and [control] both fill ControlConfig; "kind" is its planner field.
PLANNER_KEYS = (
    "kind",
    "rho",
    "nu",
    "bounds",
    "horizon",
    "block",
    "k_samples",
    "max_gd_iters",
    "candidate_cap",
    "n_random_candidates",
    "init_delta",
)
CONTROL_KEYS = (
    "replan_every",
    "max_admm_iter",
    "primal_tol",
    "power_unit_w",
    "baseline_setpoint",
    "transport",
    "workers",
    "timeout_s",
    "retrain_every",
    "seed",
)


class ConfigError(ValueError):
    """Raised when a configuration file is unreadable or holds invalid values."""

    pass


@dataclass(frozen=True)
class BuildingConfig:
    n_floors: int = 3
    zones_per_floor: int = 6
    seed: int = 0
    path: str | None = None


@dataclass(frozen=True)
class WeatherConfig:
    start: str = "2022-10-01"
    days: int = 243
    timezone: str = DEFAULT_TIMEZONE
    seed: int = 0


@dataclass(frozen=True)
class DataConfig:
    """Month partitions and the settling period before recording."""

    train_months: tuple[int, ...] = DEFAULT_TRAIN_MONTHS
    val_month: int = DEFAULT_VAL_MONTH
    test_month: int = DEFAULT_TEST_MONTH
    warmup_steps: int = 96
    excitation_seed: int = 1

    def __post_init__(self):
        months = (*self.train_months, self.val_month, self.test_month)
        if any(not 1 <= m <= 12 for m in months):
            raise ValueError(f"months must be in 1..12, got {months}")
        if len(set(months)) != len(months):
            raise ValueError(f"train, validation and test months must be disjoint, got {months}")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")


@dataclass(frozen=True)
class EventsConfig:
    """Daily event windows and their cap.

    With pmax_w unset the cap is pmax_fraction of the highest baseline power
    seen inside the windows.
    """

    start_hour: int = DEFAULT_START_HOUR
    end_hour: int = DEFAULT_END_HOUR
    pmax_w: float | None = None
    pmax_fraction: float = DEFAULT_PMAX_FRACTION
    weekdays_only: bool = False

    def __post_init__(self):
        if not 0 <= self.start_hour < self.end_hour <= 24:
            raise ValueError(f"need 0 <= start_hour < end_hour <= 24, got {self.start_hour}, {self.end_hour}")
        if self.pmax_w is not None and self.pmax_w <= 0:
            raise ValueError("pmax_w must be > 0")
        if not 0.0 < self.pmax_fraction <= 1.0:
            raise ValueError("pmax_fraction must be in (0, 1]")


@dataclass(frozen=True)
class ExperimentConfig:
    building: BuildingConfig = field(default_factory=BuildingConfig)
    weather: WeatherConfig = field(default_factory=WeatherConfig)
    data: DataConfig = field(default_factory=DataConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    control: ControlConfig = field(default_factory=ControlConfig)
    events: EventsConfig = field(default_factory=EventsConfig)

    def to_dict(self) -> dict:
        control = self.control.to_dict()
        return {
            "building": dataclasses.asdict(self.building),
            "weather": dataclasses.asdict(self.weather),
            "data": {**dataclasses.asdict(self.data), "train_months": list(self.data.train_months)},
            "training": self.training.to_dict(),
            "planner": {
                "kind": control.pop("planner"),
                **{key: control.pop(key) for key in PLANNER_KEYS[1:]},
            },
            "control": control,
            "events": dataclasses.asdict(self.events),
        }

    @classmethod
    def from_dict(cls, document: dict) -> Self:
        """Build a configuration from parsed TOML or JSON.

        Raises:
            ConfigError: On unknown sections or keys, wrong types, or invalid values
        """
        if not isinstance(document, dict):
            raise ConfigError("configuration must be a table of sections")
        unknown = sorted(set(document) - set(SECTIONS))
        if unknown:
            raise ConfigError(f"unknown sections: {', '.join(unknown)}")
        planner = dict(_section(document, "planner"))
        control = dict(_section(document, "control"))
        if "kind" in planner:
            planner["planner"] = planner.pop("kind")
        _reject_unknown("planner", planner, {*PLANNER_KEYS[1:], "planner"})
        _reject_unknown("control", control, set(CONTROL_KEYS))
        return cls(
            building=_build(BuildingConfig, "building", _section(document, "building")),
            weather=_build(WeatherConfig, "weather", _section(document, "weather")),
            data=_build(DataConfig, "data", _section(document, "data")),
            training=_build(TrainConfig, "training", _section(document, "training")),
            control=_build(ControlConfig, "planner/control", {**planner, **control}),
            events=_build(EventsConfig, "events", _section(document, "events")),
        )


def _section(document: dict, name: str) -> dict:
    section = document.get(name, {})
    if not isinstance(section, dict):
        raise ConfigError(f"[{name}] must be a table")
    return section


def _reject_unknown(name: str, section: dict, allowed: set[str]) -> None:
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigError(f"unknown keys in [{name}]: {', '.join(unknown)}")


def _accepts(hint: Any, value: Any) -> bool:
    origin = typing.get_origin(hint)
    if origin in (types.UnionType, typing.Union):
        return any(_accepts(arg, value) for arg in typing.get_args(hint))
    if origin is tuple:
        (item, _) = typing.get_args(hint)
        return isinstance(value, (list, tuple)) and all(_accepts(item, v) for v in value)
    if hint is type(None):
        return value is None
    if hint is bool:
        return isinstance(value, bool)
    if hint is int:
        return isinstance(value, int) and not isinstance(value, bool)
    if hint is float:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if hint is ComfortBounds:
        return isinstance(value, dict)
    return isinstance(value, hint)


def _build[T](cls: type[T], name: str, section: dict) -> T:
    hints = typing.get_type_hints(cls)
    _reject_unknown(name, section, set(hints))
    values = {}
    for key, value in section.items():
        if not _accepts(hints[key], value):
            raise ConfigError(f"[{name}] {key} = {value!r} is not a {hints[key]}")
        if isinstance(value, list):
            value = tuple(value)
        if hints[key] is float:
            value = float(value)
        if hints[key] is ComfortBounds:
            try:
                value = ComfortBounds(**value)
            except (TypeError, ValueError) as e:
                raise ConfigError(f"[{name}] bounds: {e}") from e
        values[key] = value
    try:
        return cls(**values)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[{name}] {e}") from e


def load_config(path: Path | None) -> ExperimentConfig:
    """Read an experiment configuration; None gives the defaults.

    Files ending in .json are read as JSON, anything else as TOML.

    Raises:
        ConfigError: If the file cannot be parsed or holds invalid values
        FileNotFoundError: If the file does not exist
    """
    if path is None:
        return ExperimentConfig()
    path = Path(path)
    text = path.read_text()
    try:
        document = json.loads(text) if path.suffix == ".json" else tomllib.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as e:
        raise ConfigError(f"cannot parse {path.name}: {e}") from e
    config = ExperimentConfig.from_dict(document)
    logger.debug("Loaded configuration from %s", str(path).replace("\n", " "))
    return config
