"""Receding-horizon demand-response control of a building.

Every replan_every timesteps the coordinator asks each zone controller for
its business-as-usual and lower-bound power forecasts, converts the active
P^max cap into a total power target and, when that target is reachable,
coordinates the zones with ADMM. Only the first setpoint change of each
zone's plan is applied, and it is held until the next replan.
"""

import dataclasses
import logging
import time
from collections.abc import Sequence
from dataclasses import dataclass
from typing import NoReturn, Self

import numpy as np

from dpn_building.admm import (
    AdmmState,
    LocalUpdate,
    NonFiniteIterateError,
    QuadraticCoupling,
    SharingSpec,
    SquaredNorm,
    StopCriteria,
    check_rho,
    run_admm,
    verify_assumptions,
)
from dpn_building.datahub import Dataset, disturbance_matrix, forecast_origins
from dpn_building.messages import (
    PROTOCOL,
    Abort,
    Converged,
    Forecast,
    Handshake,
    MalformedFrameError,
    Message,
    Observe,
    PowerReply,
    PowerTarget,
)
from dpn_building.nn import ShapeError, TrainConfig
from dpn_building.planners import (
    CandidateOverflowError,
    ComfortBounds,
    DrEvent,
    EmptyBankError,
    NoAction,
    NonFiniteObjectiveError,
    RssmForecaster,
    Saturate,
    SsmForecaster,
    TrajectoryBank,
    classify_constraint,
    ddpn_solve,
    event_window,
    sdpn_build_bank,
    sdpn_select,
)
from dpn_building.rssm import RssmModel, sample_noise, train_rssm
from dpn_building.runlog import EpisodeLog, EpisodeTiming, RunLog
from dpn_building.ssm import SsmModel, train_ssm
from dpn_building.thermal import Simulator, WeatherRecord
from dpn_building.transport import Transport, TransportTimeoutError, handshake, open_transport
from dpn_building.units import on_lattice

logger = logging.getLogger(__name__)

PLANNERS = ("ddpn", "sdpn")
TRANSPORTS = ("inproc", "socket")

Model = SsmModel | RssmModel


class ControlAbortedError(RuntimeError):
    """Raised when a planning episode had to be aborted."""

    pass


@dataclass(frozen=True)
class ControlConfig:
    """Settings of the demand-response controller."""

    horizon: int = 4
    replan_every: int = 2
    rho: float = 55.0
    nu: float = 0.10
    max_admm_iter: int = 20
    primal_tol: float = 1e-3
    planner: str = "ddpn"
    transport: str = "inproc"
    bounds: ComfortBounds = ComfortBounds()
    block: int = 2
    k_samples: int = 100
    max_gd_iters: int = 200
    candidate_cap: int = 100_000
    n_random_candidates: int | None = None
    init_delta: float = -1.0
    baseline_setpoint: float = 21.0
    power_unit_w: float = 100.0
    workers: int = 1
    timeout_s: float = 30.0
    retrain_every: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.replan_every < 1:
            raise ValueError(f"replan_every must be >= 1, got {self.replan_every}")
        if self.horizon < self.replan_every:
            raise ValueError(f"horizon {self.horizon} is shorter than replan_every {self.replan_every}")
        if self.planner not in PLANNERS:
            raise ValueError(f"planner must be one of {PLANNERS}, got {self.planner!r}")
        if self.transport not in TRANSPORTS:
            raise ValueError(f"transport must be one of {TRANSPORTS}, got {self.transport!r}")
        if not 0.0 <= self.nu < 1.0:
            raise ValueError(f"nu must be in [0, 1), got {self.nu}")
        check_rho(self.rho)
        if self.max_admm_iter < 1 or self.primal_tol < 0:
            raise ValueError("max_admm_iter must be >= 1 and primal_tol >= 0")
        if self.power_unit_w <= 0:
            raise ValueError("power_unit_w must be > 0")
        if self.retrain_every < 0:
            raise ValueError("retrain_every must be >= 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> Self:
        data = dict(data)
        if isinstance(data.get("bounds"), dict):
            data["bounds"] = ComfortBounds(**data["bounds"])
        return cls(**data)


def _substream(seed: int, zone: int, t: int) -> int:
    return int(np.random.SeedSequence([seed, zone, t]).generate_state(1)[0])


class LocalController:
    """The planner of one zone, driven by coordinator messages.

    An episode starts with Observe, continues with one PowerTarget per ADMM
    iteration and ends with Converged or Abort.
    """

    zone: int
    model: Model
    config: ControlConfig

    def __init__(self, zone: int, model: Model, config: ControlConfig):
        """Bind a trained zone model to the controller settings.

        Args:
            zone: Zone index
            model: SSM for DDPN, RSSM for SDPN
            config: Controller settings
        """
        self.zone = zone
        self.config = config
        self.model = self._checked(model)
        self._forecaster: SsmForecaster | RssmForecaster | None = None
        self._bank: TrajectoryBank | None = None
        self._warm: np.ndarray | None = None
        self._carry: np.ndarray | None = None
        self._planned = False
        self._last_iter = 0

    def _checked(self, model: Model) -> Model:
        wanted = SsmModel if self.config.planner == "ddpn" else RssmModel
        if not isinstance(model, wanted):
            raise TypeError(
                f"zone {self.zone}: {self.config.planner} needs a {wanted.__name__}, got {type(model).__name__}"
            )
        return model

    def replace_model(self, model: Model) -> None:
        """Swap in a retrained model between episodes."""
        self.model = self._checked(model)

    def handle(self, message: Message) -> Message:
        try:
            match message:
                case Handshake():
                    return self._handshake(message)
                case Observe():
                    return self._observe(message)
                case PowerTarget():
                    return self._plan(message)
                case Converged():
                    self._carry = self._warm if self._planned else None
                    self._end_episode()
                    return message
                case Abort():
                    self._carry = None
                    self._end_episode()
                    return message
        except (NonFiniteObjectiveError, EmptyBankError, CandidateOverflowError, ShapeError) as e:
            logger.exception("Zone %d cannot plan", self.zone)
            return self._drop(f"zone {self.zone}: {e}")
        except Exception as e:
            logger.exception("Zone %d controller failed on %s", self.zone, type(message).__name__)
            return self._drop(f"zone {self.zone}: {type(e).__name__}: {e}")
        return Abort(reason=f"zone {self.zone}: unexpected {type(message).__name__}", zone=self.zone)

    def _drop(self, reason: str) -> Abort:
        self._carry = None
        self._end_episode()
        return Abort(reason=reason, zone=self.zone)

    def _handshake(self, message: Handshake) -> Message:
        if message.proto != PROTOCOL or message.horizon != self.config.horizon:
            return Abort(
                reason=f"zone {self.zone}: expected {PROTOCOL} with horizon {self.config.horizon}",
                zone=self.zone,
            )
        return message

    def _end_episode(self) -> None:
        self._forecaster = None
        self._bank = None
        self._warm = None
        self._planned = False
        self._last_iter = 0

    def _initial_delta(self, horizon: int) -> np.ndarray:
        bounds = self.config.bounds
        carry = self._carry
        if self.config.planner == "ddpn" and carry is not None and len(carry) == horizon:
            shift = self.config.replan_every
            return bounds.clip(np.concatenate([carry[shift:], np.full(shift, carry[-1])]))
        return bounds.snap(np.full(horizon, self.config.init_delta))

    def _bind(self, message: Observe) -> SsmForecaster | RssmForecaster:
        obs_lags = np.asarray(message.obs_lags)
        dist_lags = np.asarray(message.dist_lags)
        act_lags = np.asarray(message.act_lags)
        if len(obs_lags) != self.model.n_lags:
            raise ShapeError(f"{len(obs_lags)} lag frames for a model reading {self.model.n_lags}")
        baseline = np.asarray(message.baseline)
        dists = np.asarray(message.dists)
        if isinstance(self.model, SsmModel):
            s0 = self.model.encode(obs_lags, dist_lags, act_lags)
            return SsmForecaster(self.model, s0, baseline, dists)
        h0, s0 = self.model.filter(obs_lags, dist_lags, act_lags)
        noise = sample_noise(
            self.config.k_samples,
            len(baseline),
            self.model.d_s,
            seed=_substream(self.config.seed, self.zone, message.t),
        )
        return RssmForecaster(self.model, h0, s0, baseline, dists, noise)

    def _observe(self, message: Observe) -> Forecast:
        start = time.perf_counter()
        self._end_episode()
        forecaster = self._bind(message)
        horizon = forecaster.horizon
        bounds = self.config.bounds
        p_bu = forecaster.predict(np.zeros(horizon))[0]
        p_lb = forecaster.predict(np.full(horizon, bounds.m))[0]
        u_init = p_bu
        if message.prepare:
            self._warm = self._initial_delta(horizon)
            u_init = forecaster.predict(self._warm)[0]
            if self.config.planner == "sdpn":
                self._bank = sdpn_build_bank(
                    forecaster,
                    bounds,
                    self.config.block,
                    self.config.candidate_cap,
                    self.config.n_random_candidates,
                    rng=np.random.default_rng(_substream(self.config.seed, self.zone, message.t)),
                )
        if not all(np.all(np.isfinite(p)) for p in (p_bu, p_lb, u_init)):
            raise NonFiniteObjectiveError(f"power forecast at t={message.t} is not finite")
        self._forecaster = forecaster
        return Forecast(
            zone=self.zone, p_bu=p_bu, p_lb=p_lb, u_init=u_init, elapsed=time.perf_counter() - start
        )

    def _plan(self, message: PowerTarget) -> Message:
        if self._forecaster is None:
            return Abort(reason=f"zone {self.zone}: power target before any observation", zone=self.zone)
        if message.iter <= self._last_iter:
            return Abort(
                reason=f"zone {self.zone}: iteration {message.iter} after {self._last_iter}",
                zone=self.zone,
            )
        start = time.perf_counter()
        config = self.config
        u_bar = np.asarray(message.u_bar)
        lam = np.asarray(message.lam)
        if isinstance(self._forecaster, SsmForecaster):
            plan = ddpn_solve(
                self._forecaster,
                u_bar,
                lam,
                config.rho,
                config.bounds,
                config.power_unit_w,
                max_iters=config.max_gd_iters,
                init=self._warm,
            )
            self._warm = plan.continuous
        else:
            if self._bank is None:
                raise EmptyBankError("no candidate bank: the episode was observed without prepare")
            plan = sdpn_select(self._bank, u_bar, lam, config.rho, config.power_unit_w)
        held, _ = self._forecaster.predict(np.full(len(plan.delta), plan.delta[0]))
        self._last_iter = message.iter
        self._planned = True
        return PowerReply(
            zone=self.zone,
            iter=message.iter,
            u_pred=plan.u_pred / config.power_unit_w,
            delta=plan.delta,
            u_held=held / config.power_unit_w,
            elapsed=time.perf_counter() - start,
        )


class Coordinator:
    """Building-side half of the control loop: conversion, ADMM and aborts."""

    transport: Transport
    config: ControlConfig

    def __init__(self, transport: Transport, config: ControlConfig):
        self.transport = transport
        self.config = config

    @property
    def n_zones(self) -> int:
        return self.transport.n_zones

    def abort(self, reason: str, cause: BaseException | None = None) -> NoReturn:
        """Tell every zone to drop the episode, then raise ControlAbortedError."""
        logger.error("Aborting planning episode: %s", reason)
        try:
            self.transport.exchange([Abort(reason=reason)] * self.n_zones)
        except (TransportTimeoutError, MalformedFrameError) as e:
            logger.warning("Abort did not reach every zone: %s", e)
        raise ControlAbortedError(reason) from cause

    def _exchange(self, messages: Sequence[Message], expected: type, phase: str) -> list:
        try:
            replies = self.transport.exchange(messages)
        except (TransportTimeoutError, MalformedFrameError) as e:
            self.abort(f"{phase}: {e}", e)
        for zone, reply in enumerate(replies):
            if isinstance(reply, Abort):
                self.abort(f"zone {zone} aborted during {phase}: {reply.reason}")
            if not isinstance(reply, expected):
                self.abort(f"zone {zone} answered {phase} with {type(reply).__name__}")
            if getattr(reply, "zone", zone) != zone:
                self.abort(f"zone {zone} answered {phase} as zone {reply.zone}")
        return list(replies)

    def _check_replies(self, replies: Sequence[PowerReply], iteration: int) -> None:
        bounds = self.config.bounds
        for zone, reply in enumerate(replies):
            if reply.iter != iteration:
                self.abort(f"zone {zone} answered iteration {iteration} with {reply.iter}")
            if not (np.all(np.isfinite(reply.u_pred)) and np.all(np.isfinite(reply.u_held))):
                self.abort(f"zone {zone} predicted non-finite power at iteration {iteration}")
            if not on_lattice(np.asarray(reply.delta), bounds.m, bounds.M, bounds.resolution):
                self.abort(f"zone {zone} planned off-lattice changes {reply.delta}")

    def plan(self, t: int, observes: Sequence[Observe], p_max: np.ndarray) -> EpisodeLog:
        """Run one planning episode at timestep t.

        Args:
            t: Timestep of the decision
            observes: One Observe per zone
            p_max: (H,) cap in W, inf outside events

        Returns:
            The episode, with every zone's planned setpoint changes

        Raises:
            ControlAbortedError: On a timeout, an Abort reply or a non-finite plan
        """
        start = time.perf_counter()
        config = self.config
        forecasts = self._exchange(observes, Forecast, f"observation at t={t}")
        p_bu_zones = np.array([f.p_bu for f in forecasts])
        p_lb_zones = np.array([f.p_lb for f in forecasts])
        outcome = classify_constraint(p_bu_zones.sum(axis=0), p_lb_zones.sum(axis=0), p_max, config.nu)
        timing = EpisodeTiming()
        horizon = len(p_max)

        if isinstance(outcome, NoAction):
            episode = EpisodeLog(
                t=t,
                outcome="no_action",
                p_max=p_max,
                p_bu=outcome.p_bu,
                p_lb=outcome.p_lb,
                p_tot=None,
                deltas=np.zeros((self.n_zones, horizon)),
                predicted_w=outcome.p_bu,
                timing=timing,
            )
        elif isinstance(outcome, Saturate):
            episode = EpisodeLog(
                t=t,
                outcome="saturate",
                p_max=p_max,
                p_bu=outcome.p_bu,
                p_lb=outcome.p_lb,
                p_tot=None,
                deltas=np.full((self.n_zones, horizon), config.bounds.m),
                predicted_w=outcome.p_lb,
                timing=timing,
            )
            logger.info("t=%d: cap %.0f W unreachable, saturating every zone", t, np.min(p_max))
        else:
            u_init = np.array([f.u_init for f in forecasts]) / config.power_unit_w
            episode = self._coordinate(t, p_max, outcome.p_bu, outcome.p_lb, outcome.p_tot, u_init, timing)

        self._exchange([Converged(iter=episode.iterations)] * self.n_zones, Converged, f"end of t={t}")
        timing.dpn_call = time.perf_counter() - start
        return episode

    def _coordinate(
        self,
        t: int,
        p_max: np.ndarray,
        p_bu: np.ndarray,
        p_lb: np.ndarray,
        p_tot: np.ndarray,
        u_init: np.ndarray,
        timing: EpisodeTiming,
    ) -> EpisodeLog:
        config = self.config
        spec = SharingSpec(
            n_blocks=self.n_zones,
            block_len=len(p_max),
            coupling=QuadraticCoupling(p_tot / config.power_unit_w),
            rho=config.rho,
            lower=0.0,
            upper=np.inf,
        )
        init = AdmmState.start(
            u_init, x_bar=spec.coupling.solve(u_init, np.zeros_like(u_init), config.rho)
        )
        latest: list[PowerReply] = []
        iteration = 0
        coordinator_started: float | None = None

        def lc_solver(x_bar: np.ndarray, lam: np.ndarray) -> LocalUpdate:
            nonlocal iteration, coordinator_started
            if coordinator_started is not None:
                timing.coordinator_iter.append(time.perf_counter() - coordinator_started)
            iteration += 1
            targets = [
                PowerTarget(zone=i, iter=iteration, u_bar=x_bar[i], lam=lam[i]) for i in range(self.n_zones)
            ]
            replies = self._exchange(targets, PowerReply, f"ADMM iteration {iteration} at t={t}")
            self._check_replies(replies, iteration)
            timing.lc_iter.extend(r.elapsed for r in replies)
            latest[:] = replies
            deltas = np.array([r.delta for r in replies])
            coordinator_started = time.perf_counter()
            return LocalUpdate(
                x=np.array([r.u_pred for r in replies]), local_values=np.sum(deltas * deltas, axis=1)
            )

        try:
            state = run_admm(spec, lc_solver, init, StopCriteria(config.max_admm_iter, config.primal_tol))
        except NonFiniteIterateError as e:
            self.abort(f"t={t}: {e}", e)
        if coordinator_started is not None:
            timing.coordinator_iter.append(time.perf_counter() - coordinator_started)

        residual = state.history[-1].primal_residual
        converged = residual < config.primal_tol
        planned = np.sum([r.u_pred for r in latest], axis=0) * config.power_unit_w
        predicted = np.sum([r.u_held for r in latest], axis=0) * config.power_unit_w
        logger.info(
            "t=%d: ADMM %s after %d iterations, residual %.3g, planned peak %.0f W under cap %.0f W",
            t,
            "converged" if converged else "stopped",
            state.iter,
            residual,
            np.max(planned),
            np.min(p_max),
        )
        return EpisodeLog(
            t=t,
            outcome="admm",
            p_max=p_max,
            p_bu=p_bu,
            p_lb=p_lb,
            p_tot=p_tot,
            deltas=np.array([r.delta for r in latest]),
            predicted_w=predicted,
            iterations=state.iter,
            converged=converged,
            history=state.history,
            timing=timing,
        )


def retrain_hook(
    models: Sequence[Model],
    dataset: Dataset,
    cadence: int,
    config: TrainConfig | None,
    new_rows: int | None = None,
) -> list[Model]:
    """Fine-tune every zone model on the rolling dataset.

    Disabled when cadence is 0 or no training config is given. Models come
    back unchanged when there are no new rows or no full training window.

    Raises:
        TrainingDivergedError: If a continuation diverges
    """
    models = list(models)
    if cadence <= 0 or config is None or new_rows == 0:
        return models
    if len(forecast_origins(dataset, config.n_lags, config.horizon)) == 0:
        logger.debug("Skipping retraining: %d rows hold no training window", len(dataset))
        return models
    retrained: list[Model] = []
    for zone, model in enumerate(models):
        if isinstance(model, SsmModel):
            model, _ = train_ssm(dataset, config, zone=zone, init=model)
        else:
            model, _ = train_rssm(dataset, config, zone=zone, init=model)
        retrained.append(model)
    logger.info("Retrained %d zone models on %d rows", len(retrained), len(dataset))
    return retrained


def _check_run(sim: Simulator, weather: Sequence[WeatherRecord], n_steps: int, lookahead: int) -> None:
    if n_steps < 0 or n_steps + lookahead > len(weather):
        raise ValueError(
            f"{n_steps} steps with {lookahead} steps of lookahead need more than {len(weather)} weather rows"
        )
    if sim.n_zones < 1:
        raise ValueError("the building has no zones")


def simulate_baseline(
    sim: Simulator,
    weather: Sequence[WeatherRecord],
    baseline_setpoint: float = 21.0,
    events: Sequence[DrEvent] = (),
    n_steps: int | None = None,
) -> RunLog:
    """Run the building at its baseline setpoints with no controller."""
    n_steps = len(weather) if n_steps is None else n_steps
    _check_run(sim, weather, n_steps, 0)
    log = RunLog(sim.n_zones, meta={"planner": "baseline", "baseline_setpoint": baseline_setpoint})
    setpoints = np.full(sim.n_zones, baseline_setpoint)
    zeros = np.zeros(sim.n_zones)
    for t in range(n_steps):
        state = sim.advance(setpoints, weather[t])
        log.record(
            t,
            weather[t].timestamp,
            event_window(events, t, 1)[0],
            state.heater_powers.sum(),
            float("nan"),
            "baseline",
            -1,
            False,
            zeros,
            state.heater_powers,
        )
    return log


def control_loop(
    sim: Simulator,
    models: Sequence[Model],
    events: Sequence[DrEvent],
    config: ControlConfig,
    weather: Sequence[WeatherRecord],
    n_steps: int | None = None,
    retrain: TrainConfig | None = None,
) -> RunLog:
    """Drive the building through a demand-response run.

    The first n_lags timesteps run at baseline to fill the models' lag
    frames. Afterwards every replan_every timesteps one planning episode
    decides the setpoint changes held until the next one.

    Args:
        sim: Simulator, advanced in place
        models: One trained model per zone
        events: Demand-response events
        config: Controller settings
        weather: Weather per timestep, covering the run plus horizon - 1 steps
        n_steps: Timesteps to run, as many as the weather allows by default
        retrain: Training settings for fine-tuning every retrain_every steps

    Returns:
        The run log, one record per timestep

    Raises:
        ControlAbortedError: If a planning episode is aborted
    """
    n_zones = sim.n_zones
    horizon = config.horizon
    if len(models) != n_zones:
        raise ValueError(f"{len(models)} models for {n_zones} zones")
    n_lags = models[0].n_lags
    if any(model.n_lags != n_lags for model in models):
        raise ValueError("every zone model must read the same number of lag frames")
    n_steps = len(weather) - horizon + 1 if n_steps is None else n_steps
    _check_run(sim, weather, n_steps, horizon - 1)

    assumptions = verify_assumptions(
        SharingSpec(
            n_zones, horizon, QuadraticCoupling(np.zeros(horizon)), config.rho, 0.0, np.inf,
            [SquaredNorm()] * n_zones,
        )
    )
    if not assumptions.rho_ok:
        logger.warning(
            "rho=%g is below the convergence bound for %d zones (L=%g)", config.rho, n_zones, assumptions.L
        )

    dists = disturbance_matrix(weather)
    baseline = np.full(n_zones, config.baseline_setpoint)
    temps = np.empty((n_steps, n_zones))
    powers = np.empty((n_steps, n_zones))
    setpoints = np.empty((n_steps, n_zones))
    controllers = [LocalController(zone, model, config) for zone, model in enumerate(models)]
    log = RunLog(
        n_zones,
        meta={
            **config.to_dict(),
            "n_lags": n_lags,
            "timezone": weather[0].timestamp.timezone_name if n_steps else None,
        },
    )
    logger.info(
        "Control run: %d steps, %d zones, %s planner, %d events", n_steps, n_zones, config.planner, len(events)
    )

    state = sim.observe()
    episode: EpisodeLog | None = None
    delta = np.zeros(n_zones)
    last_retrain = 0
    with open_transport(config.transport, controllers, config.workers, config.timeout_s) as transport:
        handshake(transport, horizon)
        coordinator = Coordinator(transport, config)
        for t in range(n_steps):
            temps[t] = state.temps
            powers[t] = state.heater_powers
            replan = t >= n_lags and (t - n_lags) % config.replan_every == 0
            if replan:
                p_max = event_window(events, t, horizon)
                lags = slice(t - n_lags + 1, t + 1)
                observes = [
                    Observe(
                        zone=i,
                        t=t,
                        obs_lags=np.stack([temps[lags, i], powers[lags, i]], axis=1),
                        dist_lags=dists[lags],
                        act_lags=setpoints[t - n_lags + 1 : t, i],
                        baseline=np.full(horizon, baseline[i]),
                        dists=dists[t : t + horizon],
                        prepare=bool(np.any(np.isfinite(p_max))),
                    )
                    for i in range(n_zones)
                ]
                episode = coordinator.plan(t, observes, p_max)
                log.episodes.append(episode)
                delta = episode.deltas[:, 0].copy()

            setpoints[t] = baseline + delta
            state = sim.advance(setpoints[t], weather[t])
            log.record(
                t,
                weather[t].timestamp,
                event_window(events, t, 1)[0],
                state.heater_powers.sum(),
                float("nan") if episode is None else episode.predicted_w[t - episode.t],
                "warmup" if episode is None else episode.outcome,
                len(log.episodes) - 1,
                replan,
                delta,
                state.heater_powers,
            )

            if config.retrain_every and retrain is not None and (t + 1) % config.retrain_every == 0:
                history = Dataset(
                    [record.timestamp for record in weather[: t + 1]],
                    temps[: t + 1],
                    powers[: t + 1],
                    setpoints[: t + 1],
                    np.array([[r.t_out, r.rh, r.dni] for r in weather[: t + 1]]),
                )
                models = retrain_hook(models, history, config.retrain_every, retrain, t + 1 - last_retrain)
                for controller, model in zip(controllers, models):
                    controller.replace_model(model)
                last_retrain = t + 1
    return log
