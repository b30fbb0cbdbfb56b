"""Local controller planners and the maximum-power constraint conversion.

A planner picks setpoint changes delta for one zone over the horizon,
trading comfort (|delta|^2) against matching the coordinator's power target.
DDPN descends the gradient of a deterministic model; SDPN scores a bank of
pre-computed worst-case trajectories of a stochastic model.
"""

import itertools
import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from dpn_building.rssm import RssmModel
from dpn_building.ssm import LocalCost, NonFiniteGradientError, RolloutCost, SsmModel
from dpn_building.units import lattice_values, snap_to_lattice

logger = logging.getLogger(__name__)

DEFAULT_POWER_UNIT_W = 100.0


class ConversionInputError(ValueError):
    """Raised when constraint conversion inputs do not line up."""

    pass


class CandidateOverflowError(ValueError):
    """Raised when enumerating SDPN candidates would exceed the cap."""

    pass


class EmptyBankError(ValueError):
    """Raised when selecting from a bank with no candidates."""

    pass


class NonFiniteObjectiveError(ArithmeticError):
    """Raised when a planner objective is not finite."""

    pass


@dataclass(frozen=True)
class ComfortBounds:
    """Allowed setpoint changes [m, M] on a lattice of the given resolution."""

    m: float = -2.0
    M: float = 0.0
    resolution: float = 0.25

    def __post_init__(self):
        if self.m > self.M:
            raise ValueError(f"comfort bounds need m <= M, got [{self.m}, {self.M}]")
        if self.resolution <= 0:
            raise ValueError("resolution must be > 0")
        steps = (self.M - self.m) / self.resolution
        if abs(steps - round(steps)) > 1e-9:
            raise ValueError(f"[{self.m}, {self.M}] is not a whole number of {self.resolution} steps")

    def lattice(self) -> np.ndarray:
        return lattice_values(self.m, self.M, self.resolution)

    def snap(self, values: np.ndarray) -> np.ndarray:
        return snap_to_lattice(values, self.m, self.M, self.resolution)

    def clip(self, values: np.ndarray) -> np.ndarray:
        return np.clip(values, self.m, self.M)

    def to_dict(self) -> dict:
        return {"m": self.m, "M": self.M, "resolution": self.resolution}


@dataclass(frozen=True, eq=False)
class DrEvent:
    """A demand-response event: building power capped over [start, end) timesteps."""

    start: int
    end: int
    p_max: np.ndarray  # W, one entry per timestep of the event

    def __post_init__(self):
        if self.start >= self.end:
            raise ValueError(f"event needs start < end, got [{self.start}, {self.end})")
        p_max = np.broadcast_to(np.asarray(self.p_max, dtype=np.float64), (self.end - self.start,))
        if np.any(p_max <= 0):
            raise ValueError("p_max must be > 0")
        object.__setattr__(self, "p_max", p_max)

    def covers(self, t: int) -> bool:
        return self.start <= t < self.end

    def window(self, t: int, horizon: int) -> np.ndarray:
        """P^max over t..t+horizon-1, infinite outside the event."""
        limits = np.full(horizon, np.inf)
        for k in range(horizon):
            if self.covers(t + k):
                limits[k] = self.p_max[t + k - self.start]
        return limits


def event_window(events: Sequence[DrEvent], t: int, horizon: int) -> np.ndarray:
    """Tightest P^max over t..t+horizon-1 among all events."""
    limits = np.full(horizon, np.inf)
    for event in events:
        limits = np.minimum(limits, event.window(t, horizon))
    return limits


@dataclass(frozen=True, eq=False)
class NoAction:
    """Business as usual already respects the cap: every delta is 0."""

    p_bu: np.ndarray
    p_lb: np.ndarray


@dataclass(frozen=True, eq=False)
class Saturate:
    """Even the lowest setpoints exceed the cap: every delta is m."""

    p_bu: np.ndarray
    p_lb: np.ndarray


@dataclass(frozen=True, eq=False)
class RunAdmm:
    """The cap is reachable: coordinate towards the total power target p_tot."""

    p_bu: np.ndarray
    p_lb: np.ndarray
    p_tot: np.ndarray


ConversionOutcome = NoAction | Saturate | RunAdmm


class PowerForecaster(Protocol):
    """A zone model bound to its current state, baseline and disturbance forecast."""

    baseline: np.ndarray
    calls: int

    def predict(self, delta: np.ndarray) -> tuple[np.ndarray, np.ndarray]: ...


class SsmForecaster:
    """Deterministic forecasts from an SSM latent; supports gradients."""

    model: SsmModel
    s0: np.ndarray
    baseline: np.ndarray
    dists: np.ndarray
    calls: int

    def __init__(self, model: SsmModel, s0: np.ndarray, baseline: np.ndarray, dists: np.ndarray):
        self.model = model
        self.s0 = np.asarray(s0, dtype=np.float64)
        self.baseline = np.asarray(baseline, dtype=np.float64)
        self.dists = np.asarray(dists, dtype=np.float64)
        self.calls = 0

    @property
    def horizon(self) -> int:
        return len(self.baseline)

    def predict(self, delta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(powers W, temperatures C) for setpoints baseline + delta."""
        self.calls += 1
        return self.model.rollout(self.s0, self.baseline + delta, self.dists)

    def rollout_grad(self, delta: np.ndarray, cost: LocalCost) -> RolloutCost:
        self.calls += 1
        return self.model.rollout_grad(self.s0, delta, self.dists, cost)


class RssmForecaster:
    """Worst-case forecasts over k sampled trajectories of an RSSM.

    Every candidate is rolled out with the same noise draws.
    """

    model: RssmModel
    h0: np.ndarray
    s0: np.ndarray
    baseline: np.ndarray
    dists: np.ndarray
    noise: np.ndarray
    calls: int

    def __init__(
        self,
        model: RssmModel,
        h0: np.ndarray,
        s0: np.ndarray,
        baseline: np.ndarray,
        dists: np.ndarray,
        noise: np.ndarray,
    ):
        """Bind a model to a filtered state.

        Args:
            model: Trained RSSM of the zone
            h0: Deterministic state at the origin
            s0: Latent at the origin
            baseline: (H,) business-as-usual setpoints
            dists: (H, 7) disturbance forecast
            noise: (k, H, d_s) draws shared by every rollout
        """
        self.model = model
        self.h0 = np.asarray(h0, dtype=np.float64)
        self.s0 = np.asarray(s0, dtype=np.float64)
        self.baseline = np.asarray(baseline, dtype=np.float64)
        self.dists = np.asarray(dists, dtype=np.float64)
        self.noise = noise
        self.calls = 0

    @property
    def horizon(self) -> int:
        return len(self.baseline)

    def worst_case(self, deltas: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Per candidate row, the sampled (powers, temps) with the largest total power."""
        deltas = np.atleast_2d(np.asarray(deltas, dtype=np.float64))
        self.calls += 1
        powers, temps = self.model.rollout_candidates(
            self.h0, self.s0, self.baseline[None, :] + deltas, self.dists, self.noise
        )
        worst = np.argmax(powers.sum(axis=2), axis=1)
        rows = np.arange(len(deltas))
        return powers[rows, worst], temps[rows, worst]

    def predict(self, delta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        powers, temps = self.worst_case(np.asarray(delta)[None, :])
        return powers[0], temps[0]


def classify_constraint(p_bu: np.ndarray, p_lb: np.ndarray, p_max: np.ndarray, nu: float) -> ConversionOutcome:
    """Decide between no action, saturation and ADMM from the power envelope.

    NoAction needs business as usual under the slackened cap at every
    timestep; Saturate triggers if the lowest setpoints exceed it at any.
    """
    if not 0.0 <= nu < 1.0:
        raise ConversionInputError(f"nu must be in [0, 1), got {nu}")
    p_bu = np.asarray(p_bu, dtype=np.float64)
    p_lb = np.asarray(p_lb, dtype=np.float64)
    p_max = np.asarray(p_max, dtype=np.float64)
    if not p_bu.shape == p_lb.shape == p_max.shape:
        raise ConversionInputError(f"shapes differ: {p_bu.shape}, {p_lb.shape}, {p_max.shape}")
    cap = (1.0 - nu) * p_max
    if np.all(p_bu <= cap):
        return NoAction(p_bu=p_bu, p_lb=p_lb)
    if np.any(p_lb > cap):
        return Saturate(p_bu=p_bu, p_lb=p_lb)
    return RunAdmm(p_bu=p_bu, p_lb=p_lb, p_tot=np.minimum(p_bu, cap))


def convert_constraint(
    forecasters: Sequence[PowerForecaster],
    p_max: np.ndarray,
    nu: float,
    bounds: Sequence[ComfortBounds],
) -> ConversionOutcome:
    """Turn a P^max cap into a total power target.

    P^bu sums every zone's forecast with delta = 0 and P^lb with delta = m.

    Raises:
        ConversionInputError: If forecasters, bounds and p_max disagree in size
    """
    if len(forecasters) != len(bounds) or not forecasters:
        raise ConversionInputError(f"{len(forecasters)} models for {len(bounds)} bounds")
    horizon = len(p_max)
    p_bu = np.zeros(horizon)
    p_lb = np.zeros(horizon)
    for forecaster, zone_bounds in zip(forecasters, bounds):
        if len(forecaster.baseline) != horizon:
            raise ConversionInputError(f"model horizon {len(forecaster.baseline)} != {horizon}")
        p_bu += forecaster.predict(np.zeros(horizon))[0]
        p_lb += forecaster.predict(np.full(horizon, zone_bounds.m))[0]
    return classify_constraint(p_bu, p_lb, p_max, nu)


@dataclass(frozen=True, eq=False)
class PlanOutcome:
    """A zone's plan: lattice setpoint changes and the power they are predicted to draw."""

    delta: np.ndarray
    u_pred: np.ndarray  # W
    objective: float
    temps: np.ndarray | None = None
    continuous: np.ndarray | None = None
    iterations: int = 0


def ddpn_solve(
    forecaster: SsmForecaster,
    u_bar: np.ndarray,
    lam: np.ndarray,
    rho: float,
    bounds: ComfortBounds,
    power_unit_w: float = DEFAULT_POWER_UNIT_W,
    max_iters: int = 200,
    init: np.ndarray | None = None,
    stable_iters: int = 3,
) -> PlanOutcome:
    """Projected gradient descent on the local objective through the model.

    Each iteration backtracks from step 0.1, halving until the objective does
    not increase. Stops once the lattice-rounded delta is unchanged for
    stable_iters iterations, no step makes progress, or max_iters elapse.
    The returned delta is rounded to the lattice and re-rolled for u_pred.

    Args:
        forecaster: Model bound to the zone's state
        u_bar: (H,) power target in power_unit_w units
        lam: (H,) duals in the same units
        rho: ADMM penalty
        bounds: Comfort bounds and lattice
        power_unit_w: Watts per ADMM power unit
        max_iters: Iteration cap
        init: Starting continuous delta, zeros by default

    Raises:
        NonFiniteObjectiveError: If the model yields a non-finite objective
    """
    cost = LocalCost(
        u_bar=np.asarray(u_bar, dtype=np.float64),
        lam=np.asarray(lam, dtype=np.float64),
        rho=rho,
        baseline=forecaster.baseline,
        power_unit_w=power_unit_w,
    )
    horizon = forecaster.horizon
    delta = bounds.clip(np.zeros(horizon) if init is None else np.asarray(init, dtype=np.float64))
    try:
        current = forecaster.rollout_grad(delta, cost)
        snapped = bounds.snap(delta)
        stable = 0
        iterations = 0
        while iterations < max_iters and stable < stable_iters:
            step = 0.1
            accepted = None
            while step >= 1e-8:
                candidate = bounds.clip(delta - step * current.grad)
                if np.linalg.norm(candidate - delta) <= 1e-12:
                    break
                trial = forecaster.rollout_grad(candidate, cost)
                if trial.value <= current.value:
                    accepted = (candidate, trial)
                    break
                step *= 0.5
            if accepted is None:
                break
            delta, current = accepted
            iterations += 1
            rounded = bounds.snap(delta)
            stable = stable + 1 if np.array_equal(rounded, snapped) else 0
            snapped = rounded
    except NonFiniteGradientError as e:
        raise NonFiniteObjectiveError(f"DDPN objective is not finite: {e}") from e

    final = bounds.snap(delta)
    powers, temps = forecaster.predict(final)
    objective = cost.value(final, powers)
    if not math.isfinite(objective):
        raise NonFiniteObjectiveError(f"objective {objective} at delta {final}")
    logger.debug("ddpn: %d iterations, objective %.4g", iterations, objective)
    return PlanOutcome(
        delta=final, u_pred=powers, objective=objective, temps=temps, continuous=delta, iterations=iterations
    )


def candidate_count(bounds: ComfortBounds, horizon: int, block: int) -> int:
    """|lattice| ** (horizon / block)."""
    if block < 1 or horizon % block:
        raise ValueError(f"block {block} must divide horizon {horizon}")
    return len(bounds.lattice()) ** (horizon // block)


def candidate_sequences(
    bounds: ComfortBounds,
    horizon: int,
    block: int = 2,
    cap: int = 100_000,
    n_random: int | None = None,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Delta sequences constant over blocks of `block` timesteps, (C, horizon).

    Every lattice combination is enumerated up to `cap` candidates; above
    it, n_random combinations are drawn uniformly when n_random is given.

    Raises:
        CandidateOverflowError: If the count exceeds cap and n_random is None
    """
    lattice = bounds.lattice()
    count = candidate_count(bounds, horizon, block)
    n_blocks = horizon // block
    if count <= cap:
        combos = np.array(list(itertools.product(range(len(lattice)), repeat=n_blocks)), dtype=np.int64)
        combos = combos.reshape(count, n_blocks)
    elif n_random is not None:
        rng = rng if rng is not None else np.random.default_rng(0)
        combos = rng.integers(0, len(lattice), size=(n_random, n_blocks))
    else:
        raise CandidateOverflowError(f"{count} candidates exceed the cap of {cap}")
    return np.repeat(lattice[combos], block, axis=1)


@dataclass(frozen=True, eq=False)
class TrajectoryBank:
    """Candidates with their worst-case predicted trajectories."""

    candidates: np.ndarray  # (C, H) delta
    powers: np.ndarray  # (C, H) W
    temps: np.ndarray  # (C, H) C

    def __len__(self) -> int:
        return len(self.candidates)

    @property
    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.candidates, axis=1)


def sdpn_build_bank(
    forecaster: RssmForecaster,
    bounds: ComfortBounds,
    block: int = 2,
    candidate_cap: int = 100_000,
    n_random_candidates: int | None = None,
    rng: np.random.Generator | None = None,
) -> TrajectoryBank:
    """Roll out every candidate k times and keep each one's max-power trajectory."""
    candidates = candidate_sequences(
        bounds, forecaster.horizon, block, candidate_cap, n_random_candidates, rng
    )
    powers, temps = forecaster.worst_case(candidates)
    logger.debug("sdpn bank: %d candidates x %d samples", len(candidates), forecaster.noise.shape[0])
    return TrajectoryBank(candidates=candidates, powers=powers, temps=temps)


def sdpn_scores(
    bank: TrajectoryBank, u_bar: np.ndarray, lam: np.ndarray, rho: float, power_unit_w: float
) -> np.ndarray:
    cost = LocalCost(
        u_bar=np.asarray(u_bar, dtype=np.float64),
        lam=np.asarray(lam, dtype=np.float64),
        rho=rho,
        baseline=np.zeros(bank.candidates.shape[1]),
        power_unit_w=power_unit_w,
    )
    return cost.values(bank.candidates, bank.powers)


def sdpn_select(
    bank: TrajectoryBank,
    u_bar: np.ndarray,
    lam: np.ndarray,
    rho: float,
    power_unit_w: float = DEFAULT_POWER_UNIT_W,
) -> PlanOutcome:
    """Lowest-scoring candidate of the bank; no model is evaluated.

    Ties go to the smaller |delta|, then to the lexicographically smaller delta.

    Raises:
        EmptyBankError: If the bank has no candidates
    """
    if len(bank) == 0:
        raise EmptyBankError("SDPN bank is empty")
    scores = sdpn_scores(bank, u_bar, lam, rho, power_unit_w)
    if not np.all(np.isfinite(scores)):
        raise NonFiniteObjectiveError("SDPN scores are not finite")
    keys = [bank.candidates[:, j] for j in reversed(range(bank.candidates.shape[1]))]
    best = int(np.lexsort([*keys, bank.norms, scores])[0])
    return PlanOutcome(
        delta=bank.candidates[best].copy(),
        u_pred=bank.powers[best].copy(),
        objective=float(scores[best]),
        temps=bank.temps[best].copy(),
    )
