"""Pytest configuration and fixtures."""

import numpy as np
import pendulum
import pytest

from dpn_building.admm import IterationRecord
from dpn_building.datahub import Dataset, collect, excitation_schedule
from dpn_building.nn import TrainConfig
from dpn_building.rssm import RssmModel
from dpn_building.runlog import EpisodeLog, EpisodeTiming, RunLog
from dpn_building.ssm import SsmModel, train_ssm
from dpn_building.thermal import Simulator, default_building
from dpn_building.weather import generate_winter_weather, weather_records as to_records

JAN_15 = pendulum.datetime(2024, 1, 15, tz="America/Montreal")


@pytest.fixture(scope="session")
def weather_frame():
    """One synthetic winter week starting on a Monday."""
    return generate_winter_weather(JAN_15, days=7, seed=0)


@pytest.fixture(scope="session")
def weather_records(weather_frame):
    """The synthetic week as WeatherRecords."""
    return to_records(weather_frame)


@pytest.fixture(scope="session")
def small_building():
    """A 2 x 2 building: four zones, four walls/slabs."""
    return default_building(2, 2, seed=0)


@pytest.fixture(scope="session")
def small_dataset(small_building, weather_records) -> Dataset:
    """Excitation data for the small building over the synthetic week."""
    topology, params = small_building
    sim = Simulator(topology, params)
    schedule = excitation_schedule(len(weather_records), topology.n_zones, seed=1)
    return collect(sim, schedule, weather_records)


@pytest.fixture(scope="session")
def tiny_train_config() -> TrainConfig:
    """Small, fast training settings."""
    return TrainConfig(
        horizon=4,
        n_lags=4,
        d_s=8,
        d_h=8,
        hidden=16,
        epochs=3,
        batches_per_epoch=5,
        batch_size=8,
        learning_rate=3e-3,
        seed=0,
    )


@pytest.fixture(scope="session")
def trained_ssm(small_dataset, tiny_train_config) -> SsmModel:
    """A briefly trained SSM for zone 0 of the small building."""
    model, _ = train_ssm(small_dataset, tiny_train_config, zone=0)
    return model


@pytest.fixture
def random_rssm(small_dataset) -> RssmModel:
    """An untrained RSSM with random weights and the small dataset's stats."""
    return RssmModel(stats=small_dataset.stats, d_h=8, d_s=4, hidden=16, n_lags=4, seed=3)


@pytest.fixture
def rng():
    """A seeded random generator."""
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def zone_ssms(small_dataset, tiny_train_config) -> list[SsmModel]:
    """One briefly trained SSM per zone of the small building."""
    return [train_ssm(small_dataset, tiny_train_config, zone=zone)[0] for zone in range(small_dataset.n_zones)]


@pytest.fixture(scope="session")
def zone_rssms(small_dataset) -> list[RssmModel]:
    """One untrained RSSM per zone of the small building."""
    return [
        RssmModel(stats=small_dataset.stats, d_h=8, d_s=4, hidden=16, n_lags=4, seed=zone)
        for zone in range(small_dataset.n_zones)
    ]


@pytest.fixture
def small_simulator(small_building) -> Simulator:
    """A fresh simulator of the small building."""
    topology, params = small_building
    return Simulator(topology, params)


@pytest.fixture
def make_runlog():
    """Factory for run logs with chosen building power, predictions, outcomes and setpoint changes."""

    def make(true_power, predicted=None, outcomes=None, deltas=None, meta=None) -> RunLog:
        true_power = np.asarray(true_power, dtype=np.float64)
        steps = len(true_power)
        predicted = true_power if predicted is None else np.asarray(predicted, dtype=np.float64)
        outcomes = outcomes or ["baseline"] * steps
        deltas = np.zeros((steps, 2)) if deltas is None else np.asarray(deltas, dtype=np.float64)
        n_zones = deltas.shape[1]
        log = RunLog(n_zones, meta if meta is not None else {"planner": "ddpn", "nu": 0.1})
        for t in range(steps):
            log.record(
                t=t,
                timestamp=JAN_15.add(minutes=15 * t),
                p_max_w=1000.0,
                true_power_w=true_power[t],
                predicted_power_w=predicted[t],
                outcome=outcomes[t],
                episode=-1,
                replan=False,
                deltas=deltas[t],
                zone_powers=np.full(n_zones, true_power[t] / n_zones),
            )
        return log

    return make


@pytest.fixture
def make_episode():
    """Factory for ADMM episodes with chosen primal residuals and timing."""

    def make(t: int, outcome: str = "admm", residuals=(), dpn_call: float = 0.0) -> EpisodeLog:
        return EpisodeLog(
            t=t,
            outcome=outcome,
            p_max=np.full(2, 1000.0),
            p_bu=np.full(2, 1200.0),
            p_lb=np.full(2, 500.0),
            p_tot=np.full(2, 1000.0) if outcome == "admm" else None,
            deltas=np.zeros((2, 2)),
            predicted_w=np.full(2, 1000.0),
            iterations=len(residuals),
            history=[
                IterationRecord(
                    iteration=k + 1,
                    lagrangian=0.0,
                    primal_residual=float(r),
                    block_residuals=(float(r),),
                    dual_residual=0.0,
                )
                for k, r in enumerate(residuals)
            ],
            timing=EpisodeTiming(
                dpn_call=dpn_call,
                coordinator_iter=[0.1] * len(residuals),
                lc_iter=[0.01] * len(residuals),
            ),
        )

    return make
