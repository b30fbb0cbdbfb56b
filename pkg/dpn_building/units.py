"""Time and lattice conversion utilities."""

import math
import re
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

# Simulation timestep: 15 minutes
SECONDS_PER_STEP = 900
STEPS_PER_HOUR = 3600 // SECONDS_PER_STEP

_HORIZON_PATTERN = re.compile(r"^\s*(\d+)\s*(h|m|min|steps?)?\s*$")


class HorizonError(ValueError):
    """Raised when a horizon string cannot be converted to timesteps."""

    pass


def hours_to_steps(hours: float) -> int:
    """Convert a duration in hours to whole 15 minute timesteps.

    Args:
        hours: Duration in hours

    Returns:
        Number of timesteps

    Raises:
        HorizonError: If the duration is not a whole number of timesteps

    Examples:
        >>> hours_to_steps(1)
        4
        >>> hours_to_steps(0.5)
        2
    """
    steps = Decimal(str(hours)) * STEPS_PER_HOUR
    if steps != steps.to_integral_value():
        raise HorizonError(f"{hours} h is not a whole number of timesteps")
    return int(steps)


def parse_horizon(text: str) -> int:
    """Parse a horizon like ``1h``, ``30m`` or ``8`` into timesteps.

    Bare numbers are read as timesteps.

    Args:
        text: Horizon string

    Returns:
        Horizon in timesteps, always >= 1

    Raises:
        HorizonError: If the string is malformed or not a whole number of steps
    """
    match = _HORIZON_PATTERN.match(text)
    if match is None:
        raise HorizonError(f"Malformed horizon: {text!r}")
    value = int(match.group(1))
    unit = match.group(2) or "steps"
    if unit == "h":
        steps = hours_to_steps(value)
    elif unit in ("m", "min"):
        if (value * 60) % SECONDS_PER_STEP:
            raise HorizonError(f"{value} min is not a whole number of timesteps")
        steps = value * 60 // SECONDS_PER_STEP
    else:
        steps = value
    if steps < 1:
        raise HorizonError(f"Horizon must be at least one timestep: {text!r}")
    return steps


def parse_horizons(text: str) -> list[int]:
    """Parse a comma separated horizon list such as ``1h,2h,4h``."""
    return [parse_horizon(part) for part in text.split(",") if part.strip()]


def format_horizon(steps: int) -> str:
    """Label a horizon in timesteps, e.g. 4 -> ``1h`` and 2 -> ``30m``."""
    if steps % STEPS_PER_HOUR == 0:
        return f"{steps // STEPS_PER_HOUR}h"
    return f"{steps * SECONDS_PER_STEP // 60}m"


def lattice_bounds(lower: float, upper: float, resolution: float) -> tuple[int, int]:
    """Return the integer lattice indices covering [lower, upper].

    Args:
        lower: Lower bound in degrees
        upper: Upper bound in degrees
        resolution: Lattice step in degrees

    Returns:
        Tuple of (first index, last index) such that index * resolution
        lies inside the bounds
    """
    return math.ceil(lower / resolution - 1e-9), math.floor(upper / resolution + 1e-9)


def lattice_values(lower: float, upper: float, resolution: float) -> np.ndarray:
    """All lattice points inside [lower, upper], ascending."""
    first, last = lattice_bounds(lower, upper, resolution)
    return np.arange(first, last + 1, dtype=np.int64).astype(np.float64) * resolution


def snap_to_lattice(
    values: np.ndarray, lower: float, upper: float, resolution: float
) -> np.ndarray:
    """Round values to the nearest lattice point inside the bounds.

    Rounds half away from zero, then clamps to the lattice points that lie
    inside [lower, upper]. Output entries are exact multiples of resolution.

    Args:
        values: Array of setpoint changes in degrees
        lower: Lower bound in degrees
        upper: Upper bound in degrees
        resolution: Lattice step in degrees

    Returns:
        Array of the same shape holding lattice values

    Examples:
        >>> snap_to_lattice(np.array([-0.8, -1.3, 0.4]), -2.0, 0.0, 0.25).tolist()
        [-0.75, -1.25, 0.0]
    """
    first, last = lattice_bounds(lower, upper, resolution)
    step = Decimal(repr(resolution))
    flat = np.asarray(values, dtype=np.float64).ravel()
    steps = np.empty(flat.shape, dtype=np.int64)
    for i, value in enumerate(flat):
        # Round to nearest integer using ROUND_HALF_UP (standard rounding)
        index = (Decimal(repr(float(value))) / step).quantize(
            Decimal("1"), rounding=ROUND_HALF_UP
        )
        steps[i] = min(max(int(index), first), last)
    return (steps.astype(np.float64) * resolution).reshape(np.shape(values))


def on_lattice(values: np.ndarray, lower: float, upper: float, resolution: float) -> bool:
    """Check that every value is an exact in-bounds lattice point."""
    arr = np.asarray(values, dtype=np.float64)
    return bool(np.array_equal(snap_to_lattice(arr, lower, upper, resolution), arr))
