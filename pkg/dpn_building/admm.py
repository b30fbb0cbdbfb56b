"""Consensus ADMM for sharing problems.

    minimize  sum_i g_i(x_i) + l(sum_i x_i)   s.t.  x_i in [m_i, M_i]

Blocks are rows of an (N, H) array, so the aggregate is a column sum and no
selection matrices are ever built. The penalty term is rho/2 |x_bar - x|^2.
Each iteration runs the local updates, then the coordinator update, then
the dual update.
"""

import dataclasses
import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np
import pandas as pd
from scipy.optimize import minimize

logger = logging.getLogger(__name__)

RHO_TOLERANCE = 1e-12


class InvalidPenaltyError(ValueError):
    """Raised when the penalty rho is not positive."""

    pass


class NonFiniteIterateError(ArithmeticError):
    """Raised when an ADMM iterate stops being finite."""

    pass


class UnsupportedCouplingError(ValueError):
    """Raised when no Lipschitz bound can be derived for a coupling."""

    pass


class Coupling(Protocol):
    def value(self, x_bar: np.ndarray) -> float: ...

    def gradient(self, x_bar: np.ndarray) -> np.ndarray: ...

    def solve(self, x: np.ndarray, lam: np.ndarray, rho: float) -> np.ndarray: ...


class LocalObjective(Protocol):
    def value(self, x: np.ndarray) -> float: ...

    def solve(
        self, x_bar: np.ndarray, lam: np.ndarray, rho: float, lower: float, upper: float
    ) -> np.ndarray: ...

    def strong_convexity(self, rho: float) -> float: ...


def check_rho(rho: float) -> None:
    if not rho > 0:
        raise InvalidPenaltyError(f"rho must be > 0, got {rho}")


def coordinator_solve(u: np.ndarray, lam: np.ndarray, p_tot: np.ndarray, rho: float) -> np.ndarray:
    """Targets minimizing |sum_i u_bar_i - P|^2 + sum_i lam_i.(u_bar_i - u_i) + rho/2 |u_bar_i - u_i|^2.

    Per timestep the Hessian is rho I + 2 11^T, inverted by the rank-one
    identity (rho I + 2 11^T)^-1 = (I - 2 11^T / (rho + 2N)) / rho.

    Args:
        u: (N, H) powers proposed by the blocks
        lam: (N, H) duals
        p_tot: (H,) total power target
        rho: Penalty

    Raises:
        InvalidPenaltyError: If rho <= 0
    """
    check_rho(rho)
    u = np.asarray(u, dtype=np.float64)
    n_blocks = u.shape[0]
    b = rho * u - np.asarray(lam) + 2.0 * np.asarray(p_tot)[None, :]
    return (b - 2.0 * b.sum(axis=0, keepdims=True) / (rho + 2.0 * n_blocks)) / rho


@dataclass(frozen=True, eq=False)
class QuadraticCoupling:
    """l(x_bar) = |sum_i x_bar_i - P|^2 summed over timesteps."""

    p_tot: np.ndarray

    def value(self, x_bar: np.ndarray) -> float:
        residual = x_bar.sum(axis=0) - self.p_tot
        return float(residual @ residual)

    def gradient(self, x_bar: np.ndarray) -> np.ndarray:
        residual = x_bar.sum(axis=0) - self.p_tot
        return np.broadcast_to(2.0 * residual, x_bar.shape).copy()

    def solve(self, x: np.ndarray, lam: np.ndarray, rho: float) -> np.ndarray:
        return coordinator_solve(x, lam, self.p_tot, rho)

    def lipschitz(self, n_blocks: int) -> float:
        """2 lambda_max(A^T A) with A summing N blocks: exactly 2N."""
        return 2.0 * n_blocks


@dataclass(frozen=True, eq=False)
class SmoothCoupling:
    """Any smooth coupling given by value and gradient callables.

    The coordinator step is solved numerically with L-BFGS.
    """

    value_fn: Callable[[np.ndarray], float]
    gradient_fn: Callable[[np.ndarray], np.ndarray]
    lipschitz_bound: float | None = None
    convex: bool = False

    def value(self, x_bar: np.ndarray) -> float:
        return float(self.value_fn(x_bar))

    def gradient(self, x_bar: np.ndarray) -> np.ndarray:
        return np.asarray(self.gradient_fn(x_bar), dtype=np.float64)

    def solve(self, x: np.ndarray, lam: np.ndarray, rho: float) -> np.ndarray:
        check_rho(rho)
        shape = x.shape

        def objective(flat: np.ndarray) -> tuple[float, np.ndarray]:
            x_bar = flat.reshape(shape)
            gap = x_bar - x
            value = self.value(x_bar) + float(np.sum(lam * gap)) + 0.5 * rho * float(np.sum(gap * gap))
            grad = self.gradient(x_bar) + lam + rho * gap
            return value, grad.ravel()

        result = minimize(
            objective,
            x.ravel(),
            jac=True,
            method="L-BFGS-B",
            options={"ftol": 1e-15, "gtol": 1e-12, "maxiter": 10_000},
        )
        return result.x.reshape(shape)

    def lipschitz(self, n_blocks: int) -> float:
        if self.lipschitz_bound is None:
            raise UnsupportedCouplingError("smooth coupling given without a Lipschitz bound")
        return float(self.lipschitz_bound)


@dataclass(frozen=True)
class SquaredNorm:
    """g(x) = weight * |x|^2, solved exactly over a box."""

    weight: float = 1.0

    def value(self, x: np.ndarray) -> float:
        return self.weight * float(x @ x)

    def gradient(self, x: np.ndarray) -> np.ndarray:
        return 2.0 * self.weight * x

    def solve(
        self, x_bar: np.ndarray, lam: np.ndarray, rho: float, lower: float, upper: float
    ) -> np.ndarray:
        """argmin over [lower, upper] of g(x) + lam.(x_bar - x) + rho/2 |x_bar - x|^2."""
        return np.clip((lam + rho * x_bar) / (2.0 * self.weight + rho), lower, upper)

    def strong_convexity(self, rho: float) -> float:
        return 2.0 * self.weight + rho


@dataclass(frozen=True, eq=False)
class SharingSpec:
    """A sharing problem: N blocks of length H, local objectives and a coupling."""

    n_blocks: int
    block_len: int
    coupling: QuadraticCoupling | SmoothCoupling
    rho: float
    lower: np.ndarray
    upper: np.ndarray
    local: Sequence[LocalObjective] | None = None

    def __post_init__(self):
        check_rho(self.rho)
        lower = np.broadcast_to(np.asarray(self.lower, dtype=np.float64), (self.n_blocks,))
        upper = np.broadcast_to(np.asarray(self.upper, dtype=np.float64), (self.n_blocks,))
        if np.any(lower > upper):
            raise ValueError("every block needs lower <= upper")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        if self.local is not None and len(self.local) != self.n_blocks:
            raise ValueError(f"{len(self.local)} local objectives for {self.n_blocks} blocks")

    def local_values(self, x: np.ndarray) -> np.ndarray:
        if self.local is None:
            raise ValueError("local objectives are not known to the coordinator")
        return np.array([g.value(x[i]) for i, g in enumerate(self.local)])


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    lagrangian: float
    primal_residual: float
    block_residuals: tuple[float, ...]
    dual_residual: float


@dataclass(frozen=True)
class StopCriteria:
    max_iter: int = 20
    primal_tol: float = 1e-3


@dataclass(frozen=True, eq=False)
class LocalUpdate:
    """New local iterates, plus g_i(x_i) when g is not a function of x alone."""

    x: np.ndarray
    local_values: np.ndarray | None = None


LocalSolver = Callable[[np.ndarray, np.ndarray], LocalUpdate]


@dataclass(eq=False)
class AdmmState:
    x: np.ndarray
    x_bar: np.ndarray
    lam: np.ndarray
    iter: int = 0
    history: list[IterationRecord] = field(default_factory=list)
    local_values: np.ndarray | None = None

    @classmethod
    def start(cls, x: np.ndarray, x_bar: np.ndarray | None = None, lam: np.ndarray | None = None):
        x = np.asarray(x, dtype=np.float64)
        return cls(
            x=x.copy(),
            x_bar=x.copy() if x_bar is None else np.asarray(x_bar, dtype=np.float64).copy(),
            lam=np.zeros_like(x) if lam is None else np.asarray(lam, dtype=np.float64).copy(),
        )

    @property
    def primal_residual(self) -> float:
        return float(np.linalg.norm(self.x_bar - self.x))

    def block_residuals(self) -> np.ndarray:
        return np.linalg.norm(self.x_bar - self.x, axis=1)


def dual_update(state: AdmmState, rho: float) -> AdmmState:
    """lam_i <- lam_i + rho (x_bar_i - x_i) for every block."""
    return dataclasses.replace(state, lam=state.lam + rho * (state.x_bar - state.x))


def lagrangian_value(spec: SharingSpec, state: AdmmState) -> float:
    """sum g(x_i) + l(x_bar) + sum lam_i.(x_bar_i - x_i) + rho/2 sum |x_bar_i - x_i|^2."""
    local = state.local_values if state.local_values is not None else spec.local_values(state.x)
    gap = state.x_bar - state.x
    return (
        float(np.sum(local))
        + spec.coupling.value(state.x_bar)
        + float(np.sum(state.lam * gap))
        + 0.5 * spec.rho * float(np.sum(gap * gap))
    )


def objective_value(spec: SharingSpec, x: np.ndarray) -> float:
    """sum g(x_i) + l(x): the sharing objective evaluated at consensus."""
    return float(np.sum(spec.local_values(x))) + spec.coupling.value(x)


def dual_identity_residual(spec: SharingSpec, state: AdmmState) -> float:
    """max_i |grad_i l(x_bar) + lam_i|_inf; zero after an exact coordinator and dual step."""
    return float(np.max(np.abs(spec.coupling.gradient(state.x_bar) + state.lam)))


def exact_local_solver(spec: SharingSpec) -> LocalSolver:
    """Exact block updates for local objectives that can solve themselves."""
    if spec.local is None:
        raise ValueError("exact local updates need the local objectives")

    def solve(x_bar: np.ndarray, lam: np.ndarray) -> LocalUpdate:
        x = np.stack(
            [
                g.solve(x_bar[i], lam[i], spec.rho, spec.lower[i], spec.upper[i])
                for i, g in enumerate(spec.local)
            ]
        )
        return LocalUpdate(x=x)

    return solve


def _check_finite(state: AdmmState, iteration: int) -> None:
    for name in ("x", "x_bar", "lam"):
        if not np.all(np.isfinite(getattr(state, name))):
            raise NonFiniteIterateError(f"iteration {iteration}: {name} is not finite")


def run_admm(
    spec: SharingSpec,
    lc_solver: LocalSolver,
    init: AdmmState,
    stop: StopCriteria = StopCriteria(),
) -> AdmmState:
    """Iterate local, coordinator and dual updates until the primal residual is small.

    Args:
        spec: The sharing problem
        lc_solver: Maps (x_bar, lam) to new local iterates for every block
        init: Starting iterates
        stop: Iteration cap and primal tolerance

    Returns:
        Final state with one history record per iteration

    Raises:
        NonFiniteIterateError: If any iterate stops being finite
    """
    state = dataclasses.replace(init, history=list(init.history))
    _check_finite(state, state.iter)
    ascents = 0
    while state.iter < stop.max_iter:
        k = state.iter + 1
        update = lc_solver(state.x_bar, state.lam)
        state = dataclasses.replace(
            state, x=np.asarray(update.x, dtype=np.float64), local_values=update.local_values
        )
        state = dataclasses.replace(state, x_bar=spec.coupling.solve(state.x, state.lam, spec.rho))
        state = dual_update(state, spec.rho)
        state.iter = k
        _check_finite(state, k)

        record = IterationRecord(
            iteration=k,
            lagrangian=lagrangian_value(spec, state),
            primal_residual=state.primal_residual,
            block_residuals=tuple(float(r) for r in state.block_residuals()),
            dual_residual=dual_identity_residual(spec, state),
        )
        if state.history and record.lagrangian > state.history[-1].lagrangian + 1e-9:
            ascents += 1
        state.history.append(record)
        logger.debug("admm iter %d: L=%.6g primal=%.3g", k, record.lagrangian, record.primal_residual)
        if record.primal_residual < stop.primal_tol:
            break

    if ascents:
        logger.warning("augmented Lagrangian increased in %d of %d iterations", ascents, state.iter)
    if state.history and state.history[-1].primal_residual >= stop.primal_tol:
        logger.warning(
            "admm stopped at max_iter=%d with primal residual %.3g >= %g",
            stop.max_iter,
            state.history[-1].primal_residual,
            stop.primal_tol,
        )
    return state


@dataclass(frozen=True)
class AssumptionReport:
    """Lipschitz constant, strong-convexity margins and the penalty checks."""

    L: float
    gamma_bar: float
    gamma_i: tuple[float, ...]
    rho_ge_l: bool
    rho_gamma_ok: bool

    @property
    def rho_ok(self) -> bool:
        return self.rho_ge_l and self.rho_gamma_ok


def verify_assumptions(spec: SharingSpec) -> AssumptionReport:
    """Check rho >= L and rho * gamma_bar >= 2 L^2.

    Raises:
        UnsupportedCouplingError: If the coupling carries no Lipschitz bound
    """
    lipschitz = spec.coupling.lipschitz(spec.n_blocks)
    if isinstance(spec.coupling, QuadraticCoupling) or getattr(spec.coupling, "convex", False):
        gamma_bar = spec.rho
    else:
        gamma_bar = spec.rho - lipschitz
    gamma_i = tuple(g.strong_convexity(spec.rho) for g in spec.local) if spec.local else ()
    slack = 1.0 - RHO_TOLERANCE
    return AssumptionReport(
        L=lipschitz,
        gamma_bar=gamma_bar,
        gamma_i=gamma_i,
        rho_ge_l=spec.rho >= lipschitz * slack,
        rho_gamma_ok=spec.rho * gamma_bar >= 2.0 * lipschitz**2 * slack,
    )


def history_frame(history: Sequence[IterationRecord]) -> pd.DataFrame:
    """iter, lagrangian, primal_residual, block_residual_0..N-1."""
    rows = []
    for record in history:
        row = {
            "iter": record.iteration,
            "lagrangian": record.lagrangian,
            "primal_residual": record.primal_residual,
        }
        row.update({f"block_residual_{i}": r for i, r in enumerate(record.block_residuals)})
        rows.append(row)
    return pd.DataFrame(rows)


def write_history_csv(history: Sequence[IterationRecord], path: Path) -> None:
    history_frame(history).to_csv(path, index=False)
