"""Multi-zone RC thermal building simulator.

Each zone is a single air node with capacitance C_i, an envelope resistance
to outdoor air r_out,i and undirected resistances r_ij to its neighbours:

    dT_i/dt = [(T_out - T_i)/r_out,i + sum_j (T_j - T_i)/r_ij
               + q_hvac,i + q_int,i(t) + q_sol,i] / C_i

Heating comes from a proportional setpoint tracker with a deadband. The ODE is
integrated with forward Euler on fixed substeps no longer than 60 s.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Self

import numpy as np
import pendulum

logger = logging.getLogger(__name__)

HOURS_PER_WEEK = 168
DEFAULT_MAX_SUBSTEP = 60.0


class InvalidBuildingError(ValueError):
    """Raised when zone parameters or topology violate their invariants."""

    pass


class DimensionMismatchError(ValueError):
    """Raised when a per-zone vector does not match the number of zones."""

    pass


@dataclass(frozen=True)
class ZoneParams:
    """Thermal parameters of one zone."""

    capacitance: float  # J/°C
    r_out: float  # °C/W
    heater_max: float  # W
    tracker_gain: float  # W/°C
    tracker_deadband: float  # °C
    internal_gain_schedule: tuple[float, ...] = field(
        default=(0.0,) * HOURS_PER_WEEK
    )  # W by hour of week, Monday 00:00 first
    solar_aperture: float = 0.0  # m², multiplies DNI

    def __post_init__(self):
        if self.capacitance <= 0:
            raise InvalidBuildingError(f"capacitance must be > 0, got {self.capacitance}")
        if self.r_out <= 0:
            raise InvalidBuildingError(f"r_out must be > 0, got {self.r_out}")
        if self.heater_max <= 0:
            raise InvalidBuildingError(f"heater_max must be > 0, got {self.heater_max}")
        if self.tracker_gain <= 0:
            raise InvalidBuildingError(
                f"tracker_gain must be > 0, got {self.tracker_gain}"
            )
        if self.tracker_deadband < 0:
            raise InvalidBuildingError(
                f"tracker_deadband must be >= 0, got {self.tracker_deadband}"
            )
        if len(self.internal_gain_schedule) != HOURS_PER_WEEK:
            raise InvalidBuildingError(
                f"internal_gain_schedule needs {HOURS_PER_WEEK} hourly values, "
                f"got {len(self.internal_gain_schedule)}"
            )
        if self.solar_aperture < 0:
            raise InvalidBuildingError(
                f"solar_aperture must be >= 0, got {self.solar_aperture}"
            )

    def to_dict(self) -> dict:
        data = asdict(self)
        data["internal_gain_schedule"] = list(self.internal_gain_schedule)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> Self:
        try:
            return cls(
                capacitance=float(data["capacitance"]),
                r_out=float(data["r_out"]),
                heater_max=float(data["heater_max"]),
                tracker_gain=float(data["tracker_gain"]),
                tracker_deadband=float(data["tracker_deadband"]),
                internal_gain_schedule=tuple(
                    float(v) for v in data["internal_gain_schedule"]
                ),
                solar_aperture=float(data.get("solar_aperture", 0.0)),
            )
        except (KeyError, TypeError) as e:
            raise InvalidBuildingError(f"Malformed zone parameters: {e}") from e


@dataclass(frozen=True)
class BuildingTopology:
    """Zones and the undirected inter-zone resistances between them."""

    n_zones: int
    edges: tuple[tuple[int, int, float], ...] = ()

    def __post_init__(self):
        if self.n_zones < 1:
            raise InvalidBuildingError(f"n_zones must be >= 1, got {self.n_zones}")
        seen = set()
        for i, j, r in self.edges:
            if i == j:
                raise InvalidBuildingError(f"self edge on zone {i}")
            if not (0 <= i < self.n_zones and 0 <= j < self.n_zones):
                raise InvalidBuildingError(f"edge ({i}, {j}) outside 0..{self.n_zones - 1}")
            if r <= 0:
                raise InvalidBuildingError(f"edge ({i}, {j}) has resistance {r}")
            pair = (min(i, j), max(i, j))
            if pair in seen:
                raise InvalidBuildingError(f"duplicate edge {pair}")
            seen.add(pair)

    def neighbours(self, zone: int) -> list[tuple[int, float]]:
        """Neighbours of a zone with their resistances."""
        result = []
        for i, j, r in self.edges:
            if i == zone:
                result.append((j, r))
            elif j == zone:
                result.append((i, r))
        return result

    def neighbour_table(self) -> tuple[np.ndarray, np.ndarray]:
        """Padded neighbour index and conductance arrays of shape (N, max degree).

        Padding entries point at the zone itself with zero conductance, so
        they contribute an exact zero flow.
        """
        lists = [self.neighbours(i) for i in range(self.n_zones)]
        width = max((len(n) for n in lists), default=0)
        index = np.tile(np.arange(self.n_zones)[:, None], (1, max(width, 1)))
        conductance = np.zeros((self.n_zones, max(width, 1)))
        for i, neighbours in enumerate(lists):
            for k, (j, r) in enumerate(neighbours):
                index[i, k] = j
                conductance[i, k] = 1.0 / r
        return index, conductance


@dataclass(frozen=True)
class WeatherRecord:
    """Outdoor conditions during one timestep."""

    timestamp: pendulum.DateTime
    t_out: float  # °C
    rh: float  # %
    dni: float  # W/m²

    def __post_init__(self):
        if not 0.0 <= self.rh <= 100.0:
            raise ValueError(f"relative humidity must be in [0, 100], got {self.rh}")
        if self.dni < 0.0:
            raise ValueError(f"dni must be >= 0, got {self.dni}")

    @property
    def hour_of_week(self) -> int:
        return self.timestamp.weekday() * 24 + self.timestamp.hour


@dataclass(frozen=True)
class SimState:
    """Simulator-side state: air temperatures and mean heater powers."""

    t: int
    temps: np.ndarray  # °C, length N
    heater_powers: np.ndarray  # W, length N, mean over the last step


class ZoneArrays:
    """Zone parameters packed into arrays for vectorized stepping."""

    capacitance: np.ndarray
    r_out: np.ndarray
    heater_max: np.ndarray
    tracker_gain: np.ndarray
    tracker_deadband: np.ndarray
    internal_gains: np.ndarray  # (N, 168)
    solar_aperture: np.ndarray
    neighbour_index: np.ndarray
    neighbour_conductance: np.ndarray

    def __init__(self, topology: BuildingTopology, params: list[ZoneParams]):
        """Pack per-zone parameters.

        Args:
            topology: Building topology
            params: One ZoneParams per zone

        Raises:
            DimensionMismatchError: If the parameter count differs from n_zones
        """
        if len(params) != topology.n_zones:
            raise DimensionMismatchError(
                f"expected {topology.n_zones} zone parameter sets, got {len(params)}"
            )
        self.capacitance = np.array([p.capacitance for p in params])
        self.r_out = np.array([p.r_out for p in params])
        self.heater_max = np.array([p.heater_max for p in params])
        self.tracker_gain = np.array([p.tracker_gain for p in params])
        self.tracker_deadband = np.array([p.tracker_deadband for p in params])
        self.internal_gains = np.array([p.internal_gain_schedule for p in params])
        self.solar_aperture = np.array([p.solar_aperture for p in params])
        self.neighbour_index, self.neighbour_conductance = topology.neighbour_table()

    @property
    def n_zones(self) -> int:
        return len(self.capacitance)


def heater_power(temp: float, setpoint: float, params: ZoneParams) -> float:
    """Heating power of a zone's proportional setpoint tracker.

    Args:
        temp: Zone air temperature in °C
        setpoint: Commanded heating setpoint in °C
        params: Zone parameters

    Returns:
        Heater power in W, in [0, heater_max]

    Examples:
        >>> params = ZoneParams(1e6, 0.01, 3000.0, 500.0, 0.1)
        >>> heater_power(18.0, 20.0, params)
        1000.0
    """
    error = setpoint - temp
    if error <= params.tracker_deadband:
        return 0.0
    return float(min(max(params.tracker_gain * error, 0.0), params.heater_max))


def heater_powers(temps: np.ndarray, setpoints: np.ndarray, zones: ZoneArrays) -> np.ndarray:
    """Vectorized heater_power over all zones."""
    error = setpoints - temps
    demand = np.clip(zones.tracker_gain * error, 0.0, zones.heater_max)
    return np.where(error > zones.tracker_deadband, demand, 0.0)


def _neighbour_flows(temps: np.ndarray, zones: ZoneArrays) -> np.ndarray:
    flows = (temps[zones.neighbour_index] - temps[:, None]) * zones.neighbour_conductance
    # sorted per row so the sum does not depend on zone labelling
    return np.sort(flows, axis=1).sum(axis=1)


def advance_temps(
    temps: np.ndarray,
    setpoints: np.ndarray,
    weather: WeatherRecord,
    dt: float,
    zones: ZoneArrays,
    max_substep: float = DEFAULT_MAX_SUBSTEP,
) -> tuple[np.ndarray, np.ndarray]:
    """Integrate zone temperatures over dt seconds.

    Returns:
        Tuple of (new temperatures, mean heater power over dt)
    """
    n_sub = max(1, math.ceil(dt / max_substep))
    h = dt / n_sub
    gains = zones.internal_gains[:, weather.hour_of_week] + zones.solar_aperture * weather.dni
    temps = np.array(temps, dtype=np.float64)
    energy = np.zeros_like(temps)
    for _ in range(n_sub):
        q_hvac = heater_powers(temps, setpoints, zones)
        envelope = (weather.t_out - temps) / zones.r_out
        temps = temps + (h / zones.capacitance) * (
            envelope + _neighbour_flows(temps, zones) + q_hvac + gains
        )
        energy += q_hvac
    return temps, energy / n_sub


def step(
    state: SimState,
    setpoints: np.ndarray,
    weather: WeatherRecord,
    dt: float,
    topology: BuildingTopology,
    params: list[ZoneParams],
    max_substep: float = DEFAULT_MAX_SUBSTEP,
) -> SimState:
    """Advance the building by one timestep.

    Args:
        state: Current simulator state
        setpoints: Heating setpoint per zone in °C
        weather: Outdoor conditions during the step
        dt: Step length in seconds
        topology: Building topology
        params: Zone parameters, one per zone
        max_substep: Longest Euler substep in seconds

    Returns:
        New SimState with heater_powers set to the mean HVAC power over dt

    Raises:
        DimensionMismatchError: If a vector length differs from n_zones
        ValueError: If dt is not positive
    """
    if dt <= 0:
        raise ValueError(f"dt must be > 0, got {dt}")
    zones = ZoneArrays(topology, params)
    return _step_packed(state, setpoints, weather, dt, zones, max_substep)


def _step_packed(
    state: SimState,
    setpoints: np.ndarray,
    weather: WeatherRecord,
    dt: float,
    zones: ZoneArrays,
    max_substep: float,
) -> SimState:
    setpoints = np.asarray(setpoints, dtype=np.float64)
    for name, vector in (("temps", state.temps), ("setpoints", setpoints)):
        if np.shape(vector) != (zones.n_zones,):
            raise DimensionMismatchError(
                f"{name} has shape {np.shape(vector)}, expected ({zones.n_zones},)"
            )
    temps, powers = advance_temps(state.temps, setpoints, weather, dt, zones, max_substep)
    return SimState(t=state.t + 1, temps=temps, heater_powers=powers)


class Simulator:
    """Stateful wrapper stepping one building through time.

    The simulator is the only owner of its state; the control loop reads it
    through observe() and writes setpoints through advance().
    """

    topology: BuildingTopology
    params: list[ZoneParams]
    dt: float
    max_substep: float
    state: SimState

    def __init__(
        self,
        topology: BuildingTopology,
        params: list[ZoneParams],
        dt: float = 900.0,
        initial_temps: np.ndarray | float = 21.0,
        max_substep: float = DEFAULT_MAX_SUBSTEP,
    ):
        """Initialize the simulator at rest.

        Args:
            topology: Building topology
            params: Zone parameters, one per zone
            dt: Step length in seconds
            initial_temps: Initial air temperature(s) in °C
            max_substep: Longest Euler substep in seconds
        """
        if dt <= 0:
            raise ValueError(f"dt must be > 0, got {dt}")
        self.topology = topology
        self.params = list(params)
        self.dt = dt
        self.max_substep = max_substep
        self._zones = ZoneArrays(topology, self.params)
        temps = np.broadcast_to(
            np.asarray(initial_temps, dtype=np.float64), (topology.n_zones,)
        ).copy()
        self.state = SimState(t=0, temps=temps, heater_powers=np.zeros(topology.n_zones))

    @property
    def n_zones(self) -> int:
        return self.topology.n_zones

    def observe(self) -> SimState:
        """Current state (copies, safe to keep)."""
        return SimState(
            t=self.state.t,
            temps=self.state.temps.copy(),
            heater_powers=self.state.heater_powers.copy(),
        )

    def advance(self, setpoints: np.ndarray, weather: WeatherRecord) -> SimState:
        """Apply setpoints for one step and return the new state."""
        self.state = _step_packed(
            self.state, setpoints, weather, self.dt, self._zones, self.max_substep
        )
        return self.observe()

    def copy(self) -> "Simulator":
        other = Simulator(
            self.topology, self.params, self.dt, self.state.temps, self.max_substep
        )
        other.state = self.observe()
        return other


def _internal_gain_schedule(scale: float) -> tuple[float, ...]:
    """Apartment gains: base load plus morning, evening and weekend bumps."""
    schedule = []
    for how in range(HOURS_PER_WEEK):
        day, hour = divmod(how, 24)
        gain = 150.0
        if 6 <= hour < 9:
            gain += 200.0
        if 18 <= hour < 23:
            gain += 300.0
        if day >= 5 and 9 <= hour < 18:
            gain += 150.0
        schedule.append(gain * scale)
    return tuple(schedule)


def default_building(
    n_floors: int = 3, zones_per_floor: int = 6, seed: int = 0
) -> tuple[BuildingTopology, list[ZoneParams]]:
    """Build a floor-grid apartment building.

    Zone k on floor f has index f * zones_per_floor + k. Side neighbours share
    a wall on the same floor, vertical neighbours share a slab. Parameters are
    jittered within +-20% of nominal; middle floors get a larger envelope
    resistance because they lose less heat.

    Args:
        n_floors: Number of floors, >= 1
        zones_per_floor: Apartments per floor, >= 1
        seed: Jitter seed

    Returns:
        Tuple of (topology, zone parameters)
    """
    if n_floors < 1 or zones_per_floor < 1:
        raise InvalidBuildingError(
            f"need at least one floor and one zone, got {n_floors}x{zones_per_floor}"
        )
    rng = np.random.default_rng(seed)
    n_zones = n_floors * zones_per_floor

    params = []
    for zone in range(n_zones):
        floor = zone // zones_per_floor
        jitter = rng.uniform(0.8, 1.2, size=4)
        r_out = 0.0125 * jitter[1]
        if 0 < floor < n_floors - 1:
            r_out *= 1.6
        params.append(
            ZoneParams(
                capacitance=8.0e6 * jitter[0],
                r_out=r_out,
                heater_max=6000.0,
                tracker_gain=3000.0,
                tracker_deadband=0.05,
                internal_gain_schedule=_internal_gain_schedule(jitter[2]),
                solar_aperture=0.8 * jitter[3],
            )
        )

    edges = []
    for zone in range(n_zones):
        floor, k = divmod(zone, zones_per_floor)
        if k + 1 < zones_per_floor:
            edges.append((zone, zone + 1, 0.02 * rng.uniform(0.8, 1.2)))
        if floor + 1 < n_floors:
            edges.append((zone, zone + zones_per_floor, 0.015 * rng.uniform(0.8, 1.2)))

    logger.debug("Built %d-zone building with %d edges (seed %d)", n_zones, len(edges), seed)
    return BuildingTopology(n_zones=n_zones, edges=tuple(edges)), params


def save_building(
    path: Path, topology: BuildingTopology, params: list[ZoneParams], seed: int | None = None
) -> None:
    """Write the building JSON document {zones, adjacency, seed}."""
    document = {
        "zones": [p.to_dict() for p in params],
        "adjacency": [[i, j, r] for i, j, r in topology.edges],
        "seed": seed,
    }
    Path(path).write_text(json.dumps(document, indent=2))


def load_building(path: Path) -> tuple[BuildingTopology, list[ZoneParams]]:
    """Read a building JSON document.

    Raises:
        InvalidBuildingError: If the document is malformed
    """
    try:
        document = json.loads(Path(path).read_text())
        params = [ZoneParams.from_dict(z) for z in document["zones"]]
        edges = tuple((int(i), int(j), float(r)) for i, j, r in document["adjacency"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        if isinstance(e, InvalidBuildingError):
            raise
        raise InvalidBuildingError(f"Malformed building file {path}: {e}") from e
    return BuildingTopology(n_zones=len(params), edges=edges), params
