"""Tests for the synthetic weather generator and weather CSV."""

import pandas as pd
import pendulum
import pytest

from dpn_building.weather import (
    WEATHER_COLUMNS,
    WeatherFormatError,
    generate_winter_weather,
    load_weather_csv,
    save_weather_csv,
    weather_records,
)


def test_generated_shape(weather_frame):
    """Test one row per 15 minutes with the documented header."""
    assert list(weather_frame.columns) == WEATHER_COLUMNS
    assert len(weather_frame) == 7 * 96


def test_generated_ranges(weather_frame):
    """Test outdoor temperature, humidity and irradiance ranges."""
    assert weather_frame["t_out_c"].between(-25.0, 5.0).all()
    assert weather_frame["rh_pct"].between(0.0, 100.0).all()
    assert (weather_frame["dni_wm2"] >= 0.0).all()


def test_no_sun_at_night(weather_records):
    """Test that DNI is zero at midnight."""
    assert all(r.dni == 0.0 for r in weather_records if r.timestamp.hour == 0)
    assert any(r.dni > 0.0 for r in weather_records if r.timestamp.hour == 12)


def test_generation_deterministic():
    """Test that the same seed gives the same weather."""
    start = pendulum.datetime(2023, 12, 1, tz="America/Montreal")
    a = generate_winter_weather(start, days=2, seed=4)
    b = generate_winter_weather(start, days=2, seed=4)
    pd.testing.assert_frame_equal(a, b)


def test_timestamps_are_absolute_quarter_hours(weather_records):
    """Test that consecutive records are 900 s apart."""
    gaps = {
        b.timestamp.timestamp() - a.timestamp.timestamp()
        for a, b in zip(weather_records, weather_records[1:])
    }
    assert gaps == {900.0}


def test_csv_roundtrip(tmp_path, weather_frame):
    """Test writing and reading the weather CSV."""
    path = tmp_path / "weather.csv"
    save_weather_csv(weather_frame, path)
    loaded = load_weather_csv(path)
    assert list(loaded.columns) == WEATHER_COLUMNS
    records = weather_records(loaded)
    assert len(records) == len(weather_frame)
    assert records[0].timestamp == pendulum.datetime(2024, 1, 15, tz="America/Montreal")


def test_csv_bad_header(tmp_path):
    """Test that a wrong header is rejected."""
    path = tmp_path / "weather.csv"
    path.write_text("time,temp\n2024-01-01T00:00:00-05:00,-3\n")
    with pytest.raises(WeatherFormatError):
        load_weather_csv(path)


def test_csv_bad_humidity(tmp_path):
    """Test that humidity outside [0, 100] is rejected."""
    path = tmp_path / "weather.csv"
    path.write_text(
        "timestamp,t_out_c,rh_pct,dni_wm2\n2024-01-01T00:00:00-05:00,-3,140,0\n"
    )
    with pytest.raises(WeatherFormatError):
        load_weather_csv(path)


def test_bad_timestamp():
    """Test that a non ISO-8601 timestamp is rejected."""
    frame = pd.DataFrame([["yesterday", -3.0, 50.0, 0.0]], columns=WEATHER_COLUMNS)
    with pytest.raises(WeatherFormatError):
        weather_records(frame)


def test_missing_file(tmp_path):
    """Test that a missing CSV raises FileNotFoundError."""
    with pytest.raises(FileNotFoundError):
        load_weather_csv(tmp_path / "nope.csv")
