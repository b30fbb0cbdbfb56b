"""Demand-response event schedules.

Events are daily windows in local time (06:00 to 09:00 by default) with a
building power cap P^max. Schedules travel as iCalendar files where every
VEVENT carries its cap in an ``X-PMAX-W`` property.
"""

import logging
from collections.abc import Sequence
from pathlib import Path

import numpy as np
import pendulum
from icalendar import Calendar, Event, vDatetime

from dpn_building.planners import DrEvent
from dpn_building.units import SECONDS_PER_STEP

logger = logging.getLogger(__name__)

DEFAULT_START_HOUR = 6
DEFAULT_END_HOUR = 9
DEFAULT_PMAX_FRACTION = 0.78
PMAX_PROPERTY = "X-PMAX-W"


class EventScheduleError(ValueError):
    """Raised when an event schedule cannot be read or placed on the run."""

    pass


def event_windows(
    timestamps: Sequence[pendulum.DateTime],
    start_hour: int = DEFAULT_START_HOUR,
    end_hour: int = DEFAULT_END_HOUR,
) -> list[tuple[int, int]]:
    """Timestep ranges [start, end) falling between start_hour and end_hour each day.

    A window cut by the beginning or end of the timestamps is dropped.
    """
    if not 0 <= start_hour < end_hour <= 24:
        raise ValueError(f"need 0 <= start_hour < end_hour <= 24, got {start_hour}, {end_hour}")
    steps_per_window = (end_hour - start_hour) * 3600 // SECONDS_PER_STEP
    inside = np.array([start_hour <= ts.hour < end_hour for ts in timestamps], dtype=bool)
    edges = np.diff(np.concatenate([[False], inside, [False]]).astype(np.int8))
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1)
    return [(int(a), int(b)) for a, b in zip(starts, ends) if b - a == steps_per_window]


def daily_events(
    timestamps: Sequence[pendulum.DateTime],
    p_max_w: float,
    start_hour: int = DEFAULT_START_HOUR,
    end_hour: int = DEFAULT_END_HOUR,
    weekdays_only: bool = False,
) -> list[DrEvent]:
    """One event per day with the same cap.

    Args:
        timestamps: Local timestamp of every timestep of the run
        p_max_w: Building power cap in W
        start_hour: First hour of each event
        end_hour: Hour the events end
        weekdays_only: Skip Saturdays and Sundays
    """
    events = []
    for start, end in event_windows(timestamps, start_hour, end_hour):
        if weekdays_only and timestamps[start].weekday() >= 5:
            continue
        events.append(DrEvent(start=start, end=end, p_max=np.full(end - start, p_max_w)))
    return events


def calibrate_pmax(
    baseline_power_w: np.ndarray,
    windows: Sequence[tuple[int, int]],
    fraction: float = DEFAULT_PMAX_FRACTION,
) -> float:
    """A cap at `fraction` of the highest baseline power seen inside the windows.

    Raises:
        EventScheduleError: If no window lies inside the baseline run
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    baseline_power_w = np.asarray(baseline_power_w, dtype=np.float64)
    peaks = [baseline_power_w[a:b].max() for a, b in windows if 0 <= a < b <= len(baseline_power_w)]
    if not peaks:
        raise EventScheduleError("no event window lies inside the baseline run")
    p_max = fraction * float(max(peaks))
    logger.info("Calibrated P^max = %.0f W (%.0f%% of the %.0f W baseline peak)", p_max, 100 * fraction, max(peaks))
    return p_max


def required_reductions(baseline_power_w: np.ndarray, events: Sequence[DrEvent]) -> np.ndarray:
    """Per event, the share of baseline peak power above the cap, in percent."""
    baseline_power_w = np.asarray(baseline_power_w, dtype=np.float64)
    shares = []
    for event in events:
        window = baseline_power_w[event.start : event.end]
        excess = np.maximum(window - event.p_max, 0.0) / np.maximum(window, 1e-9)
        shares.append(100.0 * float(excess.max()))
    return np.array(shares)


def events_to_ics(events: Sequence[DrEvent], timestamps: Sequence[pendulum.DateTime]) -> bytes:
    """Export events as an iCalendar document."""
    cal = Calendar()
    cal.add("prodid", "-//dpn-building//demand response//")
    cal.add("version", "2.0")
    for index, event in enumerate(events):
        start = timestamps[event.start]
        entry = Event()
        entry.add("uid", f"dr-{index}-{start.int_timestamp}@dpn-building")
        entry.add("summary", "Demand response")
        entry.add("dtstart", vDatetime(start))
        entry.add("dtend", vDatetime(start.add(seconds=(event.end - event.start) * SECONDS_PER_STEP)))
        entry.add("description", f"Building power capped at {float(np.max(event.p_max)):.0f} W")
        entry.add(PMAX_PROPERTY, repr(float(np.max(event.p_max))))
        cal.add_component(entry)
    return cal.to_ical()


def events_from_ics(data: bytes | str, timestamps: Sequence[pendulum.DateTime]) -> list[DrEvent]:
    """Place the VEVENTs of an iCalendar document on the run's timesteps.

    Raises:
        EventScheduleError: If the document is malformed, an event lacks a
            cap, or an event does not line up with the timesteps
    """
    try:
        cal = Calendar.from_ical(data)
    except ValueError as e:
        raise EventScheduleError(f"not an iCalendar document: {e}") from e
    index = {int(ts.timestamp()): k for k, ts in enumerate(timestamps)}
    events = []
    for component in cal.walk("VEVENT"):
        summary = str(component.get("summary", "")).replace("\n", " ")
        try:
            p_max = float(str(component[PMAX_PROPERTY]))
            start = pendulum.instance(component.decoded("dtstart"))
            end = pendulum.instance(component.decoded("dtend"))
        except (KeyError, ValueError, TypeError) as e:
            raise EventScheduleError(f"event {summary!r} is incomplete: {e}") from e
        first = index.get(int(start.timestamp()))
        last = index.get(int(end.timestamp()) - SECONDS_PER_STEP)
        if first is None or last is None:
            raise EventScheduleError(f"event {summary!r} at {start.isoformat()} is outside the run")
        events.append(DrEvent(start=first, end=last + 1, p_max=np.full(last + 1 - first, p_max)))
    events.sort(key=lambda e: e.start)
    return events


def save_events(path: Path, events: Sequence[DrEvent], timestamps: Sequence[pendulum.DateTime]) -> None:
    Path(path).write_bytes(events_to_ics(events, timestamps))


def load_events(path: Path, timestamps: Sequence[pendulum.DateTime]) -> list[DrEvent]:
    return events_from_ics(Path(path).read_bytes(), timestamps)
