"""Dataset construction: excitation, collection, normalization and splits."""

import json
import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Self

import numpy as np
import pandas as pd
import pendulum

from dpn_building.thermal import Simulator, WeatherRecord
from dpn_building.units import SECONDS_PER_STEP

logger = logging.getLogger(__name__)

DEFAULT_TRAIN_MONTHS = (10, 11, 12, 3, 4, 5)
DEFAULT_VAL_MONTH = 1
DEFAULT_TEST_MONTH = 2

SETPOINT_RANGE = (10.0, 30.0)
EXCITATION_LEVELS = (17.0, 23.0)
EXCITATION_RESOLUTION = 0.25
EXCITATION_HOLD = (4, 192)  # timesteps, 1 h to 48 h

NORMALIZED_FEATURES = ("zone_temp", "hvac_w", "setpoint", "t_out", "rh", "dni")
OBS_SIZE = 2
DISTURBANCE_SIZE = 7

ZONE_CSV_COLUMNS = [
    "timestamp",
    "zone_temp_c",
    "hvac_w",
    "setpoint_c",
    "t_out_c",
    "rh_pct",
    "dni_wm2",
]


class LengthMismatchError(ValueError):
    """Raised when schedule and weather cover different numbers of timesteps."""

    pass


class EmptyPartitionError(ValueError):
    """Raised when a train/validation/test partition has no rows."""

    pass


class DatasetFormatError(ValueError):
    """Raised when a dataset directory cannot be read."""

    pass


def encode_hour(hour: float) -> tuple[float, float]:
    """Sine/cosine encoding of the hour of day (period 24)."""
    angle = 2 * math.pi * (hour % 24) / 24
    return math.sin(angle), math.cos(angle)


def encode_day_of_week(day: float) -> tuple[float, float]:
    """Sine/cosine encoding of the day of week (period 7, Monday = 0)."""
    angle = 2 * math.pi * (day % 7) / 7
    return math.sin(angle), math.cos(angle)


def calendar_features(timestamp: pendulum.DateTime) -> np.ndarray:
    """[hour_sin, hour_cos, dow_sin, dow_cos] for a local timestamp."""
    hour = timestamp.hour + timestamp.minute / 60.0
    return np.array([*encode_hour(hour), *encode_day_of_week(timestamp.weekday())])


@dataclass(frozen=True)
class Observation:
    """What a local controller sees of its zone."""

    zone_temp: float  # °C
    hvac_power: float  # W

    def __post_init__(self):
        if self.hvac_power < 0:
            raise ValueError(f"hvac_power must be >= 0, got {self.hvac_power}")


@dataclass(frozen=True)
class Disturbance:
    """Weather plus calendar features for one timestep."""

    t_out: float
    rh: float
    dni: float
    hour_sin: float
    hour_cos: float
    dow_sin: float
    dow_cos: float

    @classmethod
    def from_record(cls, record: WeatherRecord) -> Self:
        calendar = calendar_features(record.timestamp)
        return cls(record.t_out, record.rh, record.dni, *(float(v) for v in calendar))

    def as_array(self) -> np.ndarray:
        return np.array(
            [
                self.t_out,
                self.rh,
                self.dni,
                self.hour_sin,
                self.hour_cos,
                self.dow_sin,
                self.dow_cos,
            ]
        )


@dataclass(frozen=True)
class Action:
    """Absolute heating setpoint commanded to a zone's tracker."""

    setpoint: float  # °C

    def __post_init__(self):
        if not SETPOINT_RANGE[0] <= self.setpoint <= SETPOINT_RANGE[1]:
            raise ValueError(f"setpoint {self.setpoint} outside {SETPOINT_RANGE}")


def disturbance_matrix(records: Sequence[WeatherRecord]) -> np.ndarray:
    """Stack raw disturbance features, shape (T, 7)."""
    if not records:
        return np.zeros((0, DISTURBANCE_SIZE))
    return np.array([Disturbance.from_record(r).as_array() for r in records])


@dataclass(frozen=True)
class NormStats:
    """Per-feature z-score statistics shared by all zones."""

    mean: tuple[float, ...]
    std: tuple[float, ...]

    def __post_init__(self):
        if len(self.mean) != len(NORMALIZED_FEATURES) or len(self.std) != len(
            NORMALIZED_FEATURES
        ):
            raise ValueError(f"NormStats needs {len(NORMALIZED_FEATURES)} features")
        if any(s <= 0 for s in self.std):
            raise ValueError("every normalized feature needs std > 0")

    @classmethod
    def fit(cls, dataset: "Dataset") -> Self:
        """Fit statistics on all zones and rows of a dataset.

        Features with zero spread get std 1.0.
        """
        columns = [
            dataset.zone_temp.ravel(),
            dataset.hvac_w.ravel(),
            dataset.setpoint.ravel(),
            dataset.weather[:, 0],
            dataset.weather[:, 1],
            dataset.weather[:, 2],
        ]
        means, stds = [], []
        for values in columns:
            if len(values) == 0:
                raise EmptyPartitionError("cannot fit normalization on an empty dataset")
            std = float(np.std(values))
            means.append(float(np.mean(values)))
            stds.append(std if std > 0 else 1.0)
        return cls(mean=tuple(means), std=tuple(stds))

    def _index(self, name: str) -> int:
        return NORMALIZED_FEATURES.index(name)

    def scale(self, name: str) -> float:
        """Standard deviation of one feature."""
        return self.std[self._index(name)]

    def normalize(self, name: str, values: np.ndarray) -> np.ndarray:
        i = self._index(name)
        return (np.asarray(values, dtype=np.float64) - self.mean[i]) / self.std[i]

    def denormalize(self, name: str, values: np.ndarray) -> np.ndarray:
        i = self._index(name)
        return np.asarray(values, dtype=np.float64) * self.std[i] + self.mean[i]

    def normalize_obs(self, obs: np.ndarray) -> np.ndarray:
        """Normalize (..., 2) [zone_temp, hvac_w] observations."""
        obs = np.asarray(obs, dtype=np.float64)
        return np.stack(
            [self.normalize("zone_temp", obs[..., 0]), self.normalize("hvac_w", obs[..., 1])],
            axis=-1,
        )

    def denormalize_obs(self, obs: np.ndarray) -> np.ndarray:
        obs = np.asarray(obs, dtype=np.float64)
        return np.stack(
            [self.denormalize("zone_temp", obs[..., 0]), self.denormalize("hvac_w", obs[..., 1])],
            axis=-1,
        )

    def normalize_dist(self, dist: np.ndarray) -> np.ndarray:
        """Normalize weather columns of (..., 7) disturbances; calendar passes through."""
        dist = np.array(dist, dtype=np.float64)
        dist[..., 0] = self.normalize("t_out", dist[..., 0])
        dist[..., 1] = self.normalize("rh", dist[..., 1])
        dist[..., 2] = self.normalize("dni", dist[..., 2])
        return dist

    def to_dict(self) -> dict:
        return {
            name: {"mean": m, "std": s}
            for name, m, s in zip(NORMALIZED_FEATURES, self.mean, self.std)
        }

    @classmethod
    def from_dict(cls, data: dict) -> Self:
        return cls(
            mean=tuple(float(data[name]["mean"]) for name in NORMALIZED_FEATURES),
            std=tuple(float(data[name]["std"]) for name in NORMALIZED_FEATURES),
        )


class Dataset:
    """Aligned per-zone (observation, action, disturbance) sequences.

    Row k holds the observation at the start of timestep k, the setpoint
    applied during k and the weather during k. The heater power caused by
    row k's setpoint is therefore observed at row k + 1.
    """

    timestamps: list[pendulum.DateTime]
    zone_temp: np.ndarray  # (T, N) °C
    hvac_w: np.ndarray  # (T, N) W
    setpoint: np.ndarray  # (T, N) °C
    weather: np.ndarray  # (T, 3) t_out, rh, dni
    stats: NormStats | None

    def __init__(
        self,
        timestamps: Sequence[pendulum.DateTime],
        zone_temp: np.ndarray,
        hvac_w: np.ndarray,
        setpoint: np.ndarray,
        weather: np.ndarray,
        stats: NormStats | None = None,
    ):
        """Initialize a Dataset, validating alignment.

        Args:
            timestamps: Local timestamp per row
            zone_temp: Zone temperatures, (T, N)
            hvac_w: Mean heater powers, (T, N)
            setpoint: Applied setpoints, (T, N)
            weather: Outdoor temperature, humidity and DNI, (T, 3)
            stats: Normalization statistics

        Raises:
            LengthMismatchError: If the arrays are not aligned
        """
        self.timestamps = list(timestamps)
        self.zone_temp = np.asarray(zone_temp, dtype=np.float64)
        self.hvac_w = np.asarray(hvac_w, dtype=np.float64)
        self.setpoint = np.asarray(setpoint, dtype=np.float64)
        self.weather = np.asarray(weather, dtype=np.float64).reshape(-1, 3)
        self.stats = stats
        n_rows = len(self.timestamps)
        shapes = {self.zone_temp.shape, self.hvac_w.shape, self.setpoint.shape}
        if len(shapes) != 1 or self.zone_temp.ndim != 2 or self.zone_temp.shape[0] != n_rows:
            raise LengthMismatchError(
                f"per-zone arrays {sorted(shapes)} do not align with {n_rows} timestamps"
            )
        if self.weather.shape[0] != n_rows:
            raise LengthMismatchError(
                f"weather has {self.weather.shape[0]} rows, expected {n_rows}"
            )
        self._calendar: np.ndarray | None = None
        self._disturbances: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.timestamps)

    @property
    def n_zones(self) -> int:
        return self.zone_temp.shape[1]

    @property
    def epoch_seconds(self) -> np.ndarray:
        return np.array([ts.timestamp() for ts in self.timestamps], dtype=np.float64)

    @property
    def months(self) -> np.ndarray:
        return np.array([ts.month for ts in self.timestamps], dtype=np.int64)

    @property
    def calendar(self) -> np.ndarray:
        if self._calendar is None:
            if self.timestamps:
                self._calendar = np.array([calendar_features(ts) for ts in self.timestamps])
            else:
                self._calendar = np.zeros((0, 4))
        return self._calendar

    def disturbances(self) -> np.ndarray:
        """Raw disturbance features, (T, 7)."""
        if self._disturbances is None:
            self._disturbances = np.concatenate([self.weather, self.calendar], axis=1)
        return self._disturbances

    def observations(self, zone: int) -> np.ndarray:
        """Raw [zone_temp, hvac_w] of one zone, (T, 2)."""
        return np.stack([self.zone_temp[:, zone], self.hvac_w[:, zone]], axis=1)

    def select(self, mask: np.ndarray) -> "Dataset":
        """Rows where mask is true, keeping the statistics."""
        mask = np.asarray(mask, dtype=bool)
        return Dataset(
            [ts for ts, keep in zip(self.timestamps, mask) if keep],
            self.zone_temp[mask],
            self.hvac_w[mask],
            self.setpoint[mask],
            self.weather[mask],
            self.stats,
        )

    def with_stats(self, stats: NormStats | None) -> "Dataset":
        other = self.select(np.ones(len(self), dtype=bool))
        other.stats = stats
        return other

    def window_starts(self, length: int) -> np.ndarray:
        """Start rows of every window of `length` consecutive timesteps.

        Windows never straddle a gap between partitions.
        """
        if length < 1 or len(self) < length:
            return np.zeros(0, dtype=np.int64)
        gaps = np.flatnonzero(np.diff(self.epoch_seconds) != SECONDS_PER_STEP) + 1
        bounds = np.concatenate([[0], gaps, [len(self)]])
        starts = [
            np.arange(a, b - length + 1) for a, b in zip(bounds[:-1], bounds[1:]) if b - a >= length
        ]
        if not starts:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate(starts).astype(np.int64)

    def save(self, directory: Path) -> None:
        """Write one CSV per zone plus a stats.json sidecar."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        stamps = [ts.isoformat() for ts in self.timestamps]
        for zone in range(self.n_zones):
            frame = pd.DataFrame(
                {
                    "timestamp": stamps,
                    "zone_temp_c": self.zone_temp[:, zone],
                    "hvac_w": self.hvac_w[:, zone],
                    "setpoint_c": self.setpoint[:, zone],
                    "t_out_c": self.weather[:, 0],
                    "rh_pct": self.weather[:, 1],
                    "dni_wm2": self.weather[:, 2],
                },
                columns=ZONE_CSV_COLUMNS,
            )
            frame.to_csv(directory / f"zone_{zone:02d}.csv", index=False)
        sidecar = {
            "n_zones": self.n_zones,
            "timezone": self.timestamps[0].timezone_name if self.timestamps else None,
            "stats": self.stats.to_dict() if self.stats else None,
        }
        (directory / "stats.json").write_text(json.dumps(sidecar, indent=2))

    @classmethod
    def load(cls, directory: Path) -> "Dataset":
        """Read a dataset written by save().

        Raises:
            FileNotFoundError: If the directory or sidecar is missing
            DatasetFormatError: If a zone CSV is malformed
        """
        directory = Path(directory)
        sidecar = json.loads((directory / "stats.json").read_text())
        n_zones = int(sidecar["n_zones"])
        tz = sidecar.get("timezone")
        frames = []
        for zone in range(n_zones):
            path = directory / f"zone_{zone:02d}.csv"
            frame = pd.read_csv(path, float_precision="round_trip")
            if list(frame.columns) != ZONE_CSV_COLUMNS:
                raise DatasetFormatError(f"{path.name} has an unexpected header")
            frames.append(frame)
        if not frames:
            raise DatasetFormatError(f"{directory} holds no zones")
        timestamps = []
        for text in frames[0]["timestamp"]:
            parsed = pendulum.parse(str(text))
            timestamps.append(parsed.in_timezone(tz) if tz else parsed)
        stats = NormStats.from_dict(sidecar["stats"]) if sidecar.get("stats") else None
        return cls(
            timestamps,
            np.stack([f["zone_temp_c"].to_numpy() for f in frames], axis=1),
            np.stack([f["hvac_w"].to_numpy() for f in frames], axis=1),
            np.stack([f["setpoint_c"].to_numpy() for f in frames], axis=1),
            frames[0][["t_out_c", "rh_pct", "dni_wm2"]].to_numpy(),
            stats,
        )


@dataclass(frozen=True)
class ForecastBatch:
    """Rolling-origin windows of one zone, in physical units.

    For an origin t: lag frames are rows t-L+1..t, lag actions rows
    t-L+1..t-1, planned actions and disturbances rows t..t+H-1 and the
    observations they cause rows t+1..t+H.
    """

    origins: np.ndarray  # (B,)
    obs_lags: np.ndarray  # (B, L, 2)
    dist_lags: np.ndarray  # (B, L, 7)
    act_lags: np.ndarray  # (B, L - 1)
    actions: np.ndarray  # (B, H)
    dists: np.ndarray  # (B, H, 7)
    truth: np.ndarray  # (B, H, 2)

    def __len__(self) -> int:
        return len(self.origins)

    @property
    def horizon(self) -> int:
        return self.actions.shape[1]

    def take(self, index: np.ndarray) -> "ForecastBatch":
        """Rows of the batch at the given positions."""
        return ForecastBatch(*(getattr(self, f.name)[index] for f in fields(self)))


def forecast_origins(dataset: Dataset, n_lags: int, horizon: int, stride: int = 1) -> np.ndarray:
    """Every origin with n_lags frames behind it and horizon rows ahead."""
    return (dataset.window_starts(n_lags + horizon) + n_lags - 1)[::stride]


def forecast_batch(
    dataset: Dataset, zone: int, origins: np.ndarray, n_lags: int, horizon: int
) -> ForecastBatch:
    """Gather forecast windows for one zone at the given origins."""
    origins = np.asarray(origins, dtype=np.int64)
    lags = origins[:, None] + np.arange(-n_lags + 1, 1)
    ahead = origins[:, None] + np.arange(horizon)
    obs = dataset.observations(zone)
    dist = dataset.disturbances()
    setpoints = dataset.setpoint[:, zone]
    return ForecastBatch(
        origins=origins,
        obs_lags=obs[lags],
        dist_lags=dist[lags],
        act_lags=setpoints[lags[:, :-1]],
        actions=setpoints[ahead],
        dists=dist[ahead],
        truth=obs[ahead + 1],
    )


def excitation_holds(duration: int, n_zones: int, seed: int) -> list[list[tuple[float, int]]]:
    """Random (level, hold length) runs per zone covering `duration` timesteps.

    Levels are uniform on the 0.25 °C lattice of [17, 23]; holds are uniform
    on [4, 192] timesteps. The last run of each zone is cut at `duration`.
    """
    if duration <= 0:
        raise ValueError(f"duration must be > 0, got {duration}")
    n_levels = round((EXCITATION_LEVELS[1] - EXCITATION_LEVELS[0]) / EXCITATION_RESOLUTION) + 1
    streams = np.random.SeedSequence(seed).spawn(n_zones)
    holds = []
    for stream in streams:
        rng = np.random.default_rng(stream)
        runs = []
        covered = 0
        while covered < duration:
            level = EXCITATION_LEVELS[0] + EXCITATION_RESOLUTION * int(rng.integers(0, n_levels))
            length = int(rng.integers(EXCITATION_HOLD[0], EXCITATION_HOLD[1] + 1))
            length = min(length, duration - covered)
            runs.append((level, length))
            covered += length
        holds.append(runs)
    return holds


def excitation_schedule(duration: int, n_zones: int, seed: int) -> np.ndarray:
    """Piecewise-constant random setpoints, shape (duration, n_zones)."""
    schedule = np.empty((duration, n_zones))
    for zone, runs in enumerate(excitation_holds(duration, n_zones, seed)):
        row = 0
        for level, length in runs:
            schedule[row : row + length, zone] = level
            row += length
    return schedule


def collect(
    sim: Simulator,
    schedule: np.ndarray,
    weather: Sequence[WeatherRecord],
    train_months: Sequence[int] = DEFAULT_TRAIN_MONTHS,
) -> Dataset:
    """Step the simulator under a setpoint schedule and record every row.

    Normalization statistics come from rows in train_months. If the run has
    no such rows the statistics fall back to every row.

    Args:
        sim: Simulator, advanced in place
        schedule: Setpoints, (T, N)
        weather: One WeatherRecord per timestep
        train_months: Calendar months of the training partition

    Returns:
        Collected Dataset

    Raises:
        LengthMismatchError: If schedule and weather lengths differ
    """
    schedule = np.asarray(schedule, dtype=np.float64).reshape(-1, sim.n_zones)
    if len(schedule) != len(weather):
        raise LengthMismatchError(
            f"schedule covers {len(schedule)} timesteps, weather covers {len(weather)}"
        )
    n_rows = len(schedule)
    temps = np.empty((n_rows, sim.n_zones))
    powers = np.empty((n_rows, sim.n_zones))
    for k, record in enumerate(weather):
        state = sim.observe()
        temps[k] = state.temps
        powers[k] = state.heater_powers
        sim.advance(schedule[k], record)

    dataset = Dataset(
        [r.timestamp for r in weather],
        temps,
        powers,
        schedule.copy(),
        np.array([[r.t_out, r.rh, r.dni] for r in weather]).reshape(-1, 3),
    )
    if n_rows == 0:
        return dataset
    train = dataset.select(np.isin(dataset.months, list(train_months)))
    if len(train) == 0:
        logger.warning("No rows in training months %s, fitting stats on all rows", train_months)
        train = dataset
    dataset.stats = NormStats.fit(train)
    logger.info("Collected %d timesteps for %d zones", n_rows, sim.n_zones)
    return dataset


def split(
    dataset: Dataset,
    train_months: Sequence[int] = DEFAULT_TRAIN_MONTHS,
    val_month: int = DEFAULT_VAL_MONTH,
    test_month: int = DEFAULT_TEST_MONTH,
) -> tuple[Dataset, Dataset, Dataset]:
    """Chronological split by calendar month.

    Statistics are fitted on the training partition and shared, as the same
    object, by all three partitions.

    Raises:
        EmptyPartitionError: If any partition has no rows
        ValueError: If the partitions overlap
    """
    if val_month == test_month or val_month in train_months or test_month in train_months:
        raise ValueError("train, validation and test months must be disjoint")
    months = dataset.months
    parts = []
    for name, wanted in (
        ("train", list(train_months)),
        ("validation", [val_month]),
        ("test", [test_month]),
    ):
        part = dataset.select(np.isin(months, wanted))
        if len(part) == 0:
            raise EmptyPartitionError(f"{name} partition (months {wanted}) is empty")
        parts.append(part)
    stats = NormStats.fit(parts[0])
    train, val, test = (part.with_stats(stats) for part in parts)
    return train, val, test
