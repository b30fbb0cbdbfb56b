"""Tests for demand-response event schedules."""

import numpy as np
import pendulum
import pytest
from icalendar import Calendar

from dpn_building.events import (
    PMAX_PROPERTY,
    EventScheduleError,
    calibrate_pmax,
    daily_events,
    event_windows,
    events_from_ics,
    events_to_ics,
    load_events,
    required_reductions,
    save_events,
)
from dpn_building.planners import DrEvent

TZ = "America/Montreal"


def quarter_hours(start: pendulum.DateTime, days: float) -> list[pendulum.DateTime]:
    return [start.add(minutes=15 * k) for k in range(int(days * 96))]


@pytest.fixture
def two_days():
    """Two days of timestamps starting on a Monday at midnight."""
    return quarter_hours(pendulum.datetime(2024, 2, 5, tz=TZ), 2)


def test_windows_cover_six_to_nine(two_days):
    """Test that each day contributes one 12-step window starting at 06:00."""
    windows = event_windows(two_days)

    assert windows == [(24, 36), (120, 132)]
    assert two_days[24].hour == 6
    assert two_days[35].hour == 8


def test_windows_cut_by_the_run_are_dropped():
    """Test that a window the timestamps only partly cover is not an event."""
    stamps = quarter_hours(pendulum.datetime(2024, 2, 5, 7, tz=TZ), 1)

    assert event_windows(stamps) == []


def test_rebound_windows_extend_to_noon(two_days):
    """Test that end_hour moves the window end."""
    assert event_windows(two_days, end_hour=12)[0] == (24, 48)


def test_window_hours_are_validated(two_days):
    """Test that an empty or inverted window is rejected."""
    with pytest.raises(ValueError):
        event_windows(two_days, start_hour=9, end_hour=9)


def test_daily_events_carry_the_cap(two_days):
    """Test one event per day with a constant cap."""
    events = daily_events(two_days, 4800.0)

    assert [(e.start, e.end) for e in events] == [(24, 36), (120, 132)]
    assert all(np.all(e.p_max == 4800.0) for e in events)


def test_weekdays_only_skips_weekends():
    """Test that Saturday and Sunday have no events."""
    stamps = quarter_hours(pendulum.datetime(2024, 2, 9, tz=TZ), 3)
    events = daily_events(stamps, 1000.0, weekdays_only=True)

    assert [stamps[e.start].weekday() for e in events] == [4]


def test_calibrated_cap_is_a_fraction_of_the_peak():
    """Test that the cap is the fraction times the highest in-window power."""
    power = np.full(96 * 2, 1000.0)
    power[30] = 5000.0
    power[125] = 6000.0
    power[60] = 9000.0

    assert calibrate_pmax(power, [(24, 36), (120, 132)], 0.78) == pytest.approx(0.78 * 6000.0)


def test_calibration_needs_a_window():
    """Test that windows outside the baseline run are rejected."""
    with pytest.raises(EventScheduleError):
        calibrate_pmax(np.ones(10), [(24, 36)])


def test_required_reductions():
    """Test the per-event share of peak power above the cap."""
    power = np.full(48, 1000.0)
    power[10] = 1250.0
    events = [DrEvent(8, 12, np.full(4, 1000.0)), DrEvent(20, 24, np.full(4, 2000.0))]

    assert required_reductions(power, events) == pytest.approx([20.0, 0.0])


def test_ics_export_has_one_vevent_per_event(two_days):
    """Test the exported calendar's VEVENTs and cap property."""
    events = daily_events(two_days, 4800.0)
    cal = Calendar.from_ical(events_to_ics(events, two_days))
    vevents = cal.walk("VEVENT")

    assert len(vevents) == 2
    assert float(str(vevents[0][PMAX_PROPERTY])) == 4800.0
    assert vevents[0].decoded("dtstart") == two_days[24]
    assert len({str(v["uid"]) for v in vevents}) == 2


def test_ics_import_places_events_on_the_run(two_days, tmp_path):
    """Test that a saved schedule loads back onto the same timesteps."""
    events = daily_events(two_days, 4321.5)
    path = tmp_path / "events.ics"
    save_events(path, events, two_days)
    loaded = load_events(path, two_days)

    assert [(e.start, e.end) for e in loaded] == [(24, 36), (120, 132)]
    assert all(np.all(e.p_max == 4321.5) for e in loaded)


def test_ics_import_rejects_events_outside_the_run(two_days):
    """Test that an event the run does not cover is an error."""
    later = quarter_hours(pendulum.datetime(2024, 3, 5, tz=TZ), 2)
    data = events_to_ics(daily_events(later, 1000.0), later)

    with pytest.raises(EventScheduleError, match="outside the run"):
        events_from_ics(data, two_days)


def test_ics_import_needs_the_cap(two_days):
    """Test that a VEVENT without a cap is rejected."""
    data = events_to_ics(daily_events(two_days, 1000.0), two_days).replace(
        f"{PMAX_PROPERTY}:".encode(), b"X-OTHER:"
    )

    with pytest.raises(EventScheduleError, match="incomplete"):
        events_from_ics(data, two_days)


def test_ics_import_rejects_garbage(two_days):
    """Test that a non-calendar document is rejected."""
    with pytest.raises(EventScheduleError):
        events_from_ics(b"this is not a calendar", two_days)
