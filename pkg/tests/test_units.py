"""Unit tests for time and lattice conversion utilities."""

import numpy as np
import pytest

from dpn_building.units import (
    HorizonError,
    hours_to_steps,
    lattice_values,
    on_lattice,
    parse_horizon,
    parse_horizons,
    snap_to_lattice,
)


def test_hours_to_steps_whole_hours():
    """Test conversion of whole hours to 15 minute steps."""
    assert hours_to_steps(1) == 4
    assert hours_to_steps(4) == 16


def test_hours_to_steps_fractional():
    """Test conversion of fractional hours."""
    assert hours_to_steps(0.5) == 2


def test_hours_to_steps_rejects_partial_step():
    """Test that durations off the step grid are rejected."""
    with pytest.raises(HorizonError):
        hours_to_steps(0.1)


def test_parse_horizon_units():
    """Test hour, minute and bare step horizons."""
    assert parse_horizon("1h") == 4
    assert parse_horizon("30m") == 2
    assert parse_horizon("8") == 8


def test_parse_horizons_list():
    """Test the comma separated horizon list used by evaluate."""
    assert parse_horizons("1h,2h,4h") == [4, 8, 16]


def test_parse_horizon_malformed():
    """Test malformed horizon strings."""
    for text in ["", "h1", "1d", "0h", "-2"]:
        with pytest.raises(HorizonError):
            parse_horizon(text)


def test_lattice_values_default_bounds():
    """Test the nine setpoint changes between -2 and 0 degrees."""
    values = lattice_values(-2.0, 0.0, 0.25)
    assert len(values) == 9
    assert values[0] == -2.0
    assert values[-1] == 0.0


def test_snap_to_lattice_rounding():
    """Test rounding to the nearest quarter degree."""
    snapped = snap_to_lattice(np.array([-0.8, -1.3, -0.1, -1.9]), -2.0, 0.0, 0.25)
    assert snapped.tolist() == [-0.75, -1.25, 0.0, -2.0]


def test_snap_to_lattice_half_rounds_away_from_zero():
    """Test that exact midpoints round away from zero."""
    snapped = snap_to_lattice(np.array([-0.125, -0.375]), -2.0, 0.0, 0.25)
    assert snapped.tolist() == [-0.25, -0.5]


def test_snap_to_lattice_clamps_to_bounds():
    """Test that values outside the bounds snap to the nearest bound."""
    snapped = snap_to_lattice(np.array([1.7, -5.0]), -2.0, 0.0, 0.25)
    assert snapped.tolist() == [0.0, -2.0]


def test_snap_preserves_shape():
    """Test snapping a matrix of setpoint changes."""
    values = np.full((3, 4), -0.6)
    snapped = snap_to_lattice(values, -2.0, 0.0, 0.25)
    assert snapped.shape == (3, 4)
    assert np.all(snapped == -0.5)


def test_on_lattice():
    """Test the exact lattice membership check."""
    assert on_lattice(np.array([-2.0, -0.25, 0.0]), -2.0, 0.0, 0.25)
    assert not on_lattice(np.array([-0.3]), -2.0, 0.0, 0.25)
    assert not on_lattice(np.array([0.25]), -2.0, 0.0, 0.25)
