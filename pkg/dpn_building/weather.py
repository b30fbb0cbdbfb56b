"""Synthetic winter weather and the weather CSV format."""

import logging
import math
from pathlib import Path

import numpy as np
import pandas as pd
import pendulum

from dpn_building.thermal import WeatherRecord
from dpn_building.units import SECONDS_PER_STEP

logger = logging.getLogger(__name__)

WEATHER_COLUMNS = ["timestamp", "t_out_c", "rh_pct", "dni_wm2"]
DEFAULT_TIMEZONE = "America/Montreal"
LATITUDE_DEG = 45.5

# Temperature model
COLDEST_DAY_OF_YEAR = 20
SEASONAL_MIN_C = -10.0
SEASONAL_SWING_C = 20.0
DIURNAL_AMPLITUDE_C = 4.0
DIURNAL_PEAK_HOUR = 15.0
NOISE_TAU_HOURS = 36.0
NOISE_STD_C = 4.0
T_OUT_RANGE_C = (-25.0, 5.0)


class WeatherFormatError(ValueError):
    """Raised when a weather CSV does not match the documented shape."""

    pass


def _clear_sky_dni(local: pendulum.DateTime) -> float:
    day = local.day_of_year
    declination = math.radians(23.44) * math.sin(2 * math.pi * (284 + day) / 365)
    hour = local.hour + local.minute / 60.0
    hour_angle = math.radians(15.0 * (hour - 12.0))
    lat = math.radians(LATITUDE_DEG)
    sin_elevation = math.sin(lat) * math.sin(declination) + math.cos(lat) * math.cos(
        declination
    ) * math.cos(hour_angle)
    if sin_elevation <= 0:
        return 0.0
    return 900.0 * sin_elevation**0.6


def generate_winter_weather(
    start: pendulum.DateTime,
    days: int,
    seed: int = 0,
    tz: str = DEFAULT_TIMEZONE,
) -> pd.DataFrame:
    """Generate Montreal-like winter weather at 15 minute resolution.

    Outdoor temperature is a seasonal curve bottoming out in late January plus
    a diurnal sinusoid plus Ornstein-Uhlenbeck noise, clipped to [-25, 5] °C.
    DNI follows a clear-sky envelope scaled by a daily cloud factor.

    Args:
        start: First timestamp; converted to tz
        days: Number of days to generate
        seed: Noise seed
        tz: Timezone of the emitted timestamps

    Returns:
        DataFrame with the WEATHER_COLUMNS columns, timestamps as ISO-8601 strings
    """
    if days < 0:
        raise ValueError(f"days must be >= 0, got {days}")
    rng = np.random.default_rng(seed)
    n_steps = days * 24 * 3600 // SECONDS_PER_STEP
    origin = start.in_timezone("UTC")

    decay = math.exp(-SECONDS_PER_STEP / (NOISE_TAU_HOURS * 3600.0))
    innovation = NOISE_STD_C * math.sqrt(1.0 - decay**2)
    noise = rng.normal(0.0, NOISE_STD_C)
    rh_noise = 0.0

    rows = []
    cloud: dict[pendulum.Date, float] = {}
    for k in range(n_steps):
        local = origin.add(seconds=k * SECONDS_PER_STEP).in_timezone(tz)
        day = local.day_of_year
        seasonal = SEASONAL_MIN_C + SEASONAL_SWING_C * 0.5 * (
            1.0 - math.cos(2 * math.pi * (day - COLDEST_DAY_OF_YEAR) / 365.0)
        )
        hour = local.hour + local.minute / 60.0
        diurnal = DIURNAL_AMPLITUDE_C * math.cos(2 * math.pi * (hour - DIURNAL_PEAK_HOUR) / 24.0)
        noise = decay * noise + innovation * rng.standard_normal()
        t_out = min(max(seasonal + diurnal + noise, T_OUT_RANGE_C[0]), T_OUT_RANGE_C[1])

        date = local.date()
        if date not in cloud:
            cloud[date] = float(rng.uniform(0.2, 1.0))
        dni = _clear_sky_dni(local) * cloud[date]

        rh_noise = 0.9 * rh_noise + 3.0 * rng.standard_normal()
        rh = min(max(75.0 - 1.5 * diurnal + rh_noise, 0.0), 100.0)
        rows.append((local.isoformat(), t_out, rh, dni))

    logger.info("Generated %d weather steps starting %s", n_steps, start.to_date_string())
    return pd.DataFrame(rows, columns=WEATHER_COLUMNS)


def save_weather_csv(frame: pd.DataFrame, path: Path) -> None:
    """Write a weather frame as CSV."""
    frame.to_csv(path, index=False, columns=WEATHER_COLUMNS, float_format="%.4f")


def load_weather_csv(path: Path) -> pd.DataFrame:
    """Read and validate a weather CSV.

    Args:
        path: CSV with header timestamp,t_out_c,rh_pct,dni_wm2

    Returns:
        Validated DataFrame

    Raises:
        WeatherFormatError: If the header, values or timestamps are invalid
        FileNotFoundError: If the file does not exist
    """
    try:
        frame = pd.read_csv(path, float_precision="round_trip")
    except pd.errors.ParserError as e:
        raise WeatherFormatError(f"Unreadable weather CSV {path}: {e}") from e
    except pd.errors.EmptyDataError as e:
        raise WeatherFormatError(f"Empty weather CSV {path}") from e
    if list(frame.columns) != WEATHER_COLUMNS:
        found = ",".join(str(c).replace("\n", " ") for c in frame.columns)
        raise WeatherFormatError(f"Expected header {','.join(WEATHER_COLUMNS)}, got {found}")
    numeric = frame[WEATHER_COLUMNS[1:]]
    if numeric.isna().any().any() or not all(
        pd.api.types.is_numeric_dtype(numeric[c]) for c in numeric.columns
    ):
        raise WeatherFormatError(f"Non-numeric or missing weather values in {path}")
    if not frame["rh_pct"].between(0.0, 100.0).all():
        raise WeatherFormatError("rh_pct outside [0, 100]")
    if (frame["dni_wm2"] < 0).any():
        raise WeatherFormatError("dni_wm2 must be >= 0")
    return frame


def weather_records(frame: pd.DataFrame, tz: str | None = DEFAULT_TIMEZONE) -> list[WeatherRecord]:
    """Convert a weather frame into WeatherRecords.

    Args:
        frame: Weather frame
        tz: Timezone to express timestamps in; None keeps parsed offsets

    Raises:
        WeatherFormatError: If a timestamp is not ISO-8601
    """
    records = []
    for timestamp, t_out, rh, dni in frame[WEATHER_COLUMNS].itertuples(index=False):
        try:
            parsed = pendulum.parse(str(timestamp))
        except ValueError as e:
            raise WeatherFormatError(f"Bad timestamp {timestamp!r}") from e
        if not isinstance(parsed, pendulum.DateTime):
            raise WeatherFormatError(f"Expected a date-time, got {timestamp!r}")
        if tz is not None:
            parsed = parsed.in_timezone(tz)
        records.append(
            WeatherRecord(timestamp=parsed, t_out=float(t_out), rh=float(rh), dni=float(dni))
        )
    return records
