"""Tests for constraint conversion, DDPN and SDPN."""

import itertools

import numpy as np
import pytest

from dpn_building.datahub import forecast_batch
from dpn_building.planners import (
    CandidateOverflowError,
    ComfortBounds,
    ConversionInputError,
    DrEvent,
    EmptyBankError,
    NoAction,
    NonFiniteObjectiveError,
    RssmForecaster,
    RunAdmm,
    Saturate,
    SsmForecaster,
    TrajectoryBank,
    candidate_sequences,
    classify_constraint,
    convert_constraint,
    ddpn_solve,
    event_window,
    sdpn_build_bank,
    sdpn_scores,
    sdpn_select,
)
from dpn_building.rssm import sample_noise
from dpn_building.ssm import LocalCost, RolloutCost
from dpn_building.units import on_lattice

BOUNDS = ComfortBounds(-2.0, 0.0, 0.25)


class LinearToy:
    """Power c + delta per timestep, in ADMM units."""

    def __init__(self, c: np.ndarray, unit: float = 100.0):
        self.c = np.asarray(c, dtype=np.float64)
        self.unit = unit
        self.baseline = np.full(len(c), 21.0)
        self.calls = 0

    @property
    def horizon(self) -> int:
        return len(self.c)

    def predict(self, delta):
        self.calls += 1
        return self.unit * (self.c + delta), self.baseline + delta

    def rollout_grad(self, delta, cost: LocalCost) -> RolloutCost:
        powers, temps = self.predict(delta)
        grad = self.unit * cost.power_gradient(powers) + 2.0 * cost.comfort_weight * delta
        return RolloutCost(value=cost.value(delta, powers), grad=grad, powers=powers, temps=temps)


def brute_force(toy: LinearToy, u_bar, lam, rho) -> np.ndarray:
    cost = LocalCost(u_bar=u_bar, lam=lam, rho=rho, baseline=toy.baseline)
    best, best_value = None, np.inf
    for combo in itertools.product(BOUNDS.lattice(), repeat=toy.horizon):
        delta = np.array(combo)
        value = cost.value(delta, toy.unit * (toy.c + delta))
        if value < best_value:
            best, best_value = delta, value
    return best


@pytest.fixture
def ssm_forecaster(trained_ssm, small_dataset):
    """The trained SSM bound to row 400 of zone 0 with a four-step horizon."""
    batch = forecast_batch(small_dataset, 0, np.array([400]), trained_ssm.n_lags, 4)
    s0 = trained_ssm.encode(batch.obs_lags[0], batch.dist_lags[0], batch.act_lags[0])
    return SsmForecaster(trained_ssm, s0, np.full(4, 21.0), batch.dists[0])


@pytest.fixture
def rssm_forecaster(random_rssm, small_dataset):
    """The random RSSM bound to row 400 of zone 0 with 20 shared samples."""
    batch = forecast_batch(small_dataset, 0, np.array([400]), random_rssm.n_lags, 4)
    h0, s0 = random_rssm.filter(batch.obs_lags[0], batch.dist_lags[0], batch.act_lags[0])
    noise = sample_noise(20, 4, random_rssm.d_s, seed=0)
    return RssmForecaster(random_rssm, h0, s0, np.full(4, 21.0), batch.dists[0], noise)


def test_comfort_bounds_lattice():
    """Test the nine lattice values of [-2, 0] at 0.25."""
    lattice = BOUNDS.lattice()
    assert len(lattice) == 9
    assert lattice[0] == -2.0 and lattice[-1] == 0.0
    with pytest.raises(ValueError):
        ComfortBounds(0.5, 0.0)
    with pytest.raises(ValueError):
        ComfortBounds(-1.0, 0.0, 0.3)


def test_dr_event_window():
    """Test the per-timestep cap with infinity outside the event."""
    event = DrEvent(start=10, end=13, p_max=np.array([5.0, 6.0, 7.0]))
    assert np.array_equal(event.window(9, 4), [np.inf, 5.0, 6.0, 7.0])
    assert np.array_equal(event.window(12, 2), [7.0, np.inf])
    other = DrEvent(start=11, end=12, p_max=4.0)
    assert np.array_equal(event_window([event, other], 10, 3), [5.0, 4.0, 7.0])
    with pytest.raises(ValueError):
        DrEvent(start=5, end=5, p_max=1.0)


def test_classify_no_action():
    """Test that business as usual under the cap needs no action."""
    outcome = classify_constraint([10, 12], [5, 6], [20, 20], nu=0.1)
    assert isinstance(outcome, NoAction)


def test_classify_saturate():
    """Test that the lower envelope above the cap anywhere saturates."""
    outcome = classify_constraint([30, 30], [10, 19], [20, 20], nu=0.1)
    assert isinstance(outcome, Saturate)


def test_classify_run_admm_without_slack():
    """Test P^tot = min(P^bu, P^max) when nu = 0."""
    outcome = classify_constraint([30, 15], [10, 10], [20, 20], nu=0.0)
    assert isinstance(outcome, RunAdmm)
    assert np.array_equal(outcome.p_tot, [20.0, 15.0])


def test_classify_rejects_bad_nu():
    """Test that nu must lie in [0, 1)."""
    with pytest.raises(ConversionInputError):
        classify_constraint([1.0], [1.0], [1.0], nu=1.0)


def test_convert_constraint_sums_zones():
    """Test that the envelope sums every zone's forecasts."""
    toys = [LinearToy(np.full(2, 20.0)), LinearToy(np.full(2, 30.0))]
    outcome = convert_constraint(toys, np.full(2, 4800.0), nu=0.0, bounds=[BOUNDS, BOUNDS])
    assert isinstance(outcome, RunAdmm)
    assert np.allclose(outcome.p_bu, 5000.0)
    assert np.allclose(outcome.p_lb, 4600.0)
    assert np.allclose(outcome.p_tot, 4800.0)


def test_convert_constraint_count_mismatch():
    """Test that one bound per model is required."""
    with pytest.raises(ConversionInputError):
        convert_constraint([LinearToy(np.zeros(2))], np.ones(2), 0.1, [BOUNDS, BOUNDS])


def test_ddpn_matches_known_lattice_answer():
    """Test the linear toy with continuous optima -0.8 and -1.3."""
    toy = LinearToy(np.array([40.0, 35.0]))
    target = np.array([-0.8, -1.3])
    u_bar = toy.c + 1.2 * target
    plan = ddpn_solve(toy, u_bar, np.zeros(2), rho=10.0, bounds=BOUNDS)
    assert np.array_equal(plan.delta, [-0.75, -1.25])
    assert np.array_equal(plan.delta, brute_force(toy, u_bar, np.zeros(2), 10.0))
    assert np.allclose(plan.u_pred, 100.0 * (toy.c + plan.delta))


def test_ddpn_matches_brute_force_on_random_targets():
    """Test DDPN against exhaustive lattice enumeration on the linear toy."""
    rng = np.random.default_rng(3)
    checked = 0
    while checked < 20:
        target = rng.uniform(-1.9, -0.1, 2)
        remainder = np.abs((target / 0.25) - np.floor(target / 0.25) - 0.5)
        if np.any(remainder < 0.2):
            continue
        toy = LinearToy(rng.uniform(20, 60, 2))
        u_bar = toy.c + 1.2 * target
        plan = ddpn_solve(toy, u_bar, np.zeros(2), rho=10.0, bounds=BOUNDS)
        assert np.array_equal(plan.delta, brute_force(toy, u_bar, np.zeros(2), 10.0))
        checked += 1


def test_ddpn_business_as_usual_fixed_point(ssm_forecaster):
    """Test that targets equal to the baseline forecast keep delta at 0."""
    powers, _ = ssm_forecaster.predict(np.zeros(4))
    plan = ddpn_solve(ssm_forecaster, powers / 100.0, np.zeros(4), rho=55.0, bounds=BOUNDS)
    assert np.array_equal(plan.delta, np.zeros(4))
    assert plan.iterations == 0


def test_ddpn_output_on_lattice(ssm_forecaster, rng):
    """Test that DDPN plans lie on the lattice inside the bounds."""
    for _ in range(5):
        u_bar = rng.uniform(0, 40, 4)
        plan = ddpn_solve(ssm_forecaster, u_bar, rng.normal(size=4), rho=55.0, bounds=BOUNDS)
        assert on_lattice(plan.delta, BOUNDS.m, BOUNDS.M, BOUNDS.resolution)
        assert np.all(plan.u_pred >= 0.0)
        assert np.all(plan.continuous >= BOUNDS.m) and np.all(plan.continuous <= BOUNDS.M)


def test_ddpn_descends(ssm_forecaster, rng):
    """Test that the continuous plan never scores worse than the start."""
    u_bar = rng.uniform(0, 40, 4)
    lam = rng.normal(size=4)
    cost = LocalCost(u_bar=u_bar, lam=lam, rho=55.0, baseline=ssm_forecaster.baseline)
    start = ssm_forecaster.rollout_grad(np.zeros(4), cost).value
    plan = ddpn_solve(ssm_forecaster, u_bar, lam, rho=55.0, bounds=BOUNDS)
    assert ssm_forecaster.rollout_grad(plan.continuous, cost).value <= start


def test_ddpn_non_finite(trained_ssm, ssm_forecaster):
    """Test that a NaN state raises NonFiniteObjectiveError."""
    broken = SsmForecaster(
        trained_ssm, np.full(trained_ssm.d_s, np.nan), ssm_forecaster.baseline, ssm_forecaster.dists
    )
    with pytest.raises(NonFiniteObjectiveError):
        ddpn_solve(broken, np.zeros(4), np.zeros(4), rho=55.0, bounds=BOUNDS)


def test_candidate_count_81():
    """Test nine values held over two blocks of two timesteps."""
    candidates = candidate_sequences(BOUNDS, horizon=4, block=2)
    assert candidates.shape == (81, 4)
    assert np.array_equal(candidates[:, 0], candidates[:, 1])
    assert np.array_equal(candidates[:, 2], candidates[:, 3])
    assert len({tuple(c) for c in candidates}) == 81


def test_candidate_overflow():
    """Test the cap: error without sampling, uniform draws with it."""
    with pytest.raises(CandidateOverflowError):
        candidate_sequences(BOUNDS, horizon=16, block=1, cap=100_000)
    sampled = candidate_sequences(
        BOUNDS, horizon=16, block=1, cap=100_000, n_random=50, rng=np.random.default_rng(0)
    )
    assert sampled.shape == (50, 16)
    assert on_lattice(sampled, BOUNDS.m, BOUNDS.M, BOUNDS.resolution)


def test_block_must_divide_horizon():
    """Test that the block length must divide the horizon."""
    with pytest.raises(ValueError):
        candidate_sequences(BOUNDS, horizon=4, block=3)


def test_bank_stores_worst_case(rssm_forecaster):
    """Test that each stored trajectory has the largest total power of its samples."""
    bank = sdpn_build_bank(rssm_forecaster, BOUNDS, block=2)
    assert len(bank) == 81
    assert bank.powers.shape == (81, 4)
    model = rssm_forecaster.model
    for c in (0, 40, 80):
        powers, _ = model.rollout_samples(
            rssm_forecaster.h0,
            rssm_forecaster.s0,
            rssm_forecaster.baseline + bank.candidates[c],
            rssm_forecaster.dists,
            rssm_forecaster.noise,
        )
        assert bank.powers[c].sum() == pytest.approx(powers.sum(axis=1).max(), rel=1e-12)


def test_select_matches_rescan(rssm_forecaster, rng):
    """Test the argmin against an independent re-scoring, with no model calls."""
    bank = sdpn_build_bank(rssm_forecaster, BOUNDS, block=2)
    calls = rssm_forecaster.calls
    for _ in range(10):
        u_bar = rng.uniform(0, 40, 4)
        lam = rng.normal(size=4)
        plan = sdpn_select(bank, u_bar, lam, rho=55.0)
        scores = [
            float(d @ d) + float(lam @ (u_bar - p / 100.0)) + 27.5 * float(np.sum((u_bar - p / 100.0) ** 2))
            for d, p in zip(bank.candidates, bank.powers)
        ]
        assert plan.objective == pytest.approx(min(scores), rel=1e-12)
        assert plan.objective == pytest.approx(scores[int(np.argmin(scores))])
    assert rssm_forecaster.calls == calls


def test_select_is_pure(rssm_forecaster):
    """Test that identical inputs give identical plans."""
    bank = sdpn_build_bank(rssm_forecaster, BOUNDS)
    a = sdpn_select(bank, np.full(4, 10.0), np.ones(4), 55.0)
    b = sdpn_select(bank, np.full(4, 10.0), np.ones(4), 55.0)
    assert np.array_equal(a.delta, b.delta)
    assert a.objective == b.objective


def test_select_own_trajectory_wins(rssm_forecaster):
    """Test that targets equal to the zero candidate's trajectory select it."""
    bank = sdpn_build_bank(rssm_forecaster, BOUNDS)
    zero = int(np.flatnonzero(np.all(bank.candidates == 0.0, axis=1))[0])
    plan = sdpn_select(bank, bank.powers[zero] / 100.0, np.zeros(4), 55.0)
    assert np.array_equal(plan.delta, np.zeros(4))
    assert plan.objective == 0.0


def test_select_tie_breaks():
    """Test ties: smaller norm first, then lexicographic order."""
    bank = TrajectoryBank(
        candidates=np.array([[0.0, -0.5], [-0.5, 0.0], [-1.0, 0.0], [0.0, 0.0]]),
        powers=np.array([[100.0, 0.0], [100.0, 0.0], [100.0, 0.0], [0.0, 0.0]]),
        temps=np.zeros((4, 2)),
    )
    u_bar = np.array([1.0, 0.0])
    scores = sdpn_scores(bank, u_bar, np.zeros(2), 2.0, 100.0)
    assert scores.tolist() == [0.25, 0.25, 1.0, 1.0]
    assert np.array_equal(sdpn_select(bank, u_bar, np.zeros(2), 2.0).delta, [-0.5, 0.0])
    tied = TrajectoryBank(bank.candidates[2:], bank.powers[2:], bank.temps[2:])
    assert np.array_equal(sdpn_select(tied, u_bar, np.zeros(2), 2.0).delta, [0.0, 0.0])


def test_select_empty_bank():
    """Test that an empty bank cannot be selected from."""
    empty = TrajectoryBank(np.zeros((0, 4)), np.zeros((0, 4)), np.zeros((0, 4)))
    with pytest.raises(EmptyBankError):
        sdpn_select(empty, np.zeros(4), np.zeros(4), 55.0)
