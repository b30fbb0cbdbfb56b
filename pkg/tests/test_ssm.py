"""Tests for the deterministic zone model and its reverse pass."""

import json

import numpy as np
import pytest

from dpn_building.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from dpn_building.datahub import Dataset, NormStats, forecast_batch, forecast_origins
from dpn_building.nn import ShapeError, TrainConfig
from dpn_building.ssm import (
    LocalCost,
    NonFiniteGradientError,
    SsmModel,
    TrainingDivergedError,
    train_ssm,
    validation_batch,
)

# Large power mean keeps every prediction strictly positive, away from the clip at 0 W.
POSITIVE_STATS = NormStats(
    mean=(21.0, 5000.0, 21.0, -10.0, 70.0, 100.0),
    std=(2.0, 1000.0, 2.0, 8.0, 15.0, 200.0),
)


def random_inputs(rng: np.random.Generator, n_lags: int, horizon: int):
    obs = np.column_stack([rng.uniform(19, 23, n_lags), rng.uniform(2000, 8000, n_lags)])
    dist = np.column_stack(
        [
            rng.uniform(-25, 0, n_lags + horizon),
            rng.uniform(40, 95, n_lags + horizon),
            rng.uniform(0, 600, n_lags + horizon),
            rng.uniform(-1, 1, (n_lags + horizon, 4)),
        ]
    )
    act = rng.uniform(19, 23, n_lags - 1)
    return obs, dist[:n_lags], act, dist[n_lags:]


def random_cost(rng: np.random.Generator, horizon: int, power_weight: float = 1.0) -> LocalCost:
    return LocalCost(
        u_bar=rng.uniform(40, 60, horizon),
        lam=rng.uniform(-5, 5, horizon),
        rho=float(rng.uniform(1, 60)),
        baseline=rng.uniform(20, 22, horizon),
        power_weight=power_weight,
    )


def cost_of(model: SsmModel, s0, delta, dists, cost: LocalCost) -> float:
    powers, _ = model.rollout(s0, cost.baseline + delta, dists)
    return cost.value(delta, powers)


def test_encode_deterministic(rng):
    """Test that identical lag frames give identical latents."""
    model = SsmModel(POSITIVE_STATS, d_s=6, n_lags=3, hidden=8, seed=1)
    obs, dist, act, _ = random_inputs(rng, 3, 2)
    assert np.array_equal(model.encode(obs, dist, act), model.encode(obs, dist, act))
    assert model.encode(obs, dist, act).shape == (6,)


def test_encode_zero_weights():
    """Test that an all-zero encoder yields the zero latent."""
    model = SsmModel(POSITIVE_STATS, d_s=5, n_lags=4, hidden=8, zero=True)
    obs, dist, act, _ = random_inputs(np.random.default_rng(0), 4, 1)
    assert np.array_equal(model.encode(obs, dist, act), np.zeros(5))


def test_encode_wrong_lag_count(rng):
    """Test that the encoder insists on exactly n_lags frames."""
    model = SsmModel(POSITIVE_STATS, d_s=4, n_lags=4, hidden=8)
    obs, dist, act, _ = random_inputs(rng, 3, 1)
    with pytest.raises(ShapeError):
        model.encode(obs, dist, act)


def test_latent_sensitive_to_latest_frame(trained_ssm, small_dataset):
    """Test that the latest observation moves the latent of a trained model."""
    batch = forecast_batch(small_dataset, 0, np.array([200]), trained_ssm.n_lags, 1)
    obs, dist, act = batch.obs_lags[0], batch.dist_lags[0], batch.act_lags[0]
    base = trained_ssm.encode(obs, dist, act)
    bumped = obs.copy()
    bumped[-1, 0] += 0.5
    assert np.linalg.norm(trained_ssm.encode(bumped, dist, act) - base) > 0.0


def test_rollout_empty_horizon(rng):
    """Test that H = 0 gives empty trajectories."""
    model = SsmModel(POSITIVE_STATS, d_s=4, n_lags=2, hidden=8)
    powers, temps = model.rollout(np.zeros(4), np.zeros(0), np.zeros((0, 7)))
    assert powers.shape == (0,)
    assert temps.shape == (0,)


def test_rollout_deterministic(rng):
    """Test that the same inputs give identical rollouts."""
    model = SsmModel(POSITIVE_STATS, d_s=6, n_lags=3, hidden=8, seed=2)
    obs, dist, act, future = random_inputs(rng, 3, 5)
    s0 = model.encode(obs, dist, act)
    setpoints = np.full(5, 21.0)
    a = model.rollout(s0, setpoints, future)
    b = model.rollout(s0, setpoints, future)
    assert np.array_equal(a[0], b[0])
    assert np.array_equal(a[1], b[1])


def test_one_step_rollout_composes(rng):
    """Test that a one-step rollout equals transition then decode, bitwise."""
    model = SsmModel(POSITIVE_STATS, d_s=6, n_lags=3, hidden=8, seed=4)
    obs, dist, act, future = random_inputs(rng, 3, 1)
    s0 = model.encode(obs, dist, act)
    powers, temps = model.rollout(s0, np.array([20.5]), future)
    temp, power = model.decode(model.transition(s0, 20.5, future[0]))
    assert powers[0] == power
    assert temps[0] == temp


def test_rollout_shape_mismatch(rng):
    """Test that disturbances must match the number of actions."""
    model = SsmModel(POSITIVE_STATS, d_s=4, n_lags=2, hidden=8)
    with pytest.raises(ShapeError):
        model.rollout(np.zeros(4), np.full(3, 21.0), np.zeros((2, 7)))


def test_power_clipped_at_zero():
    """Test that a strongly negative decoded power is clipped to 0 W."""
    stats = NormStats(mean=(21.0, -1e6, 21.0, 0.0, 50.0, 0.0), std=(1.0,) * 6)
    model = SsmModel(stats, d_s=3, n_lags=1, hidden=4, seed=0)
    powers, _ = model.rollout(np.zeros(3), np.full(4, 21.0), np.zeros((4, 7)))
    assert np.all(powers == 0.0)


def test_gradient_matches_finite_differences():
    """Test reverse-mode gradients against central differences on 100 random cases."""
    rng = np.random.default_rng(7)
    step = 1e-4 * POSITIVE_STATS.scale("setpoint")
    worst = 0.0
    for case in range(100):
        horizon = int(rng.integers(1, 6))
        model = SsmModel(POSITIVE_STATS, d_s=int(rng.integers(2, 7)), n_lags=3, hidden=8, seed=case)
        obs, dist, act, future = random_inputs(rng, 3, horizon)
        s0 = model.encode(obs, dist, act)
        delta = rng.uniform(-2, 0, horizon)
        cost = random_cost(rng, horizon)
        result = model.rollout_grad(s0, delta, future, cost)
        for k in range(horizon):
            plus, minus = delta.copy(), delta.copy()
            plus[k] += step
            minus[k] -= step
            fd = (cost_of(model, s0, plus, future, cost) - cost_of(model, s0, minus, future, cost)) / (
                2 * step
            )
            error = abs(fd - result.grad[k]) / max(abs(result.grad[k]), 1e-2)
            worst = max(worst, error)
    assert worst < 1e-4


def test_gradient_value_matches_rollout(rng):
    """Test that the reported cost equals the cost of the plain rollout."""
    model = SsmModel(POSITIVE_STATS, d_s=5, n_lags=3, hidden=8, seed=3)
    obs, dist, act, future = random_inputs(rng, 3, 4)
    s0 = model.encode(obs, dist, act)
    delta = np.array([-0.5, -1.0, 0.0, -2.0])
    cost = random_cost(rng, 4)
    result = model.rollout_grad(s0, delta, future, cost)
    assert result.value == pytest.approx(cost_of(model, s0, delta, future, cost), rel=1e-12)
    assert result.grad.shape == (4,)


def test_gradient_without_power_term(rng):
    """Test that with no power weight and zero duals the gradient is 2 delta."""
    model = SsmModel(POSITIVE_STATS, d_s=5, n_lags=3, hidden=8, seed=5)
    obs, dist, act, future = random_inputs(rng, 3, 4)
    delta = np.array([-0.25, -1.5, 0.0, -2.0])
    cost = LocalCost(
        u_bar=np.zeros(4), lam=np.zeros(4), rho=10.0, baseline=np.full(4, 21.0), power_weight=0.0
    )
    result = model.rollout_grad(model.encode(obs, dist, act), delta, future, cost)
    assert np.allclose(result.grad, 2 * delta, atol=1e-15)


def test_gradient_constant_decoder(rng):
    """Test that a zero-weight model contributes nothing through the power term."""
    model = SsmModel(POSITIVE_STATS, d_s=4, n_lags=2, hidden=8, zero=True)
    _, _, _, future = random_inputs(rng, 2, 3)
    delta = np.array([-1.0, -0.5, -0.75])
    result = model.rollout_grad(np.zeros(4), delta, future, random_cost(rng, 3))
    assert np.allclose(result.grad, 2 * delta, atol=1e-15)


def test_gradient_non_finite_input(rng):
    """Test that a NaN latent raises NonFiniteGradientError."""
    model = SsmModel(POSITIVE_STATS, d_s=4, n_lags=2, hidden=8)
    _, _, _, future = random_inputs(rng, 2, 2)
    with pytest.raises(NonFiniteGradientError):
        model.rollout_grad(np.full(4, np.nan), np.zeros(2), future, random_cost(rng, 2))


def test_gradient_non_finite_weight(rng):
    """Test that a NaN weight raises NonFiniteGradientError."""
    model = SsmModel(POSITIVE_STATS, d_s=4, n_lags=2, hidden=8)
    model.decoder.weights[-1][0, 1] = np.nan
    _, _, _, future = random_inputs(rng, 2, 2)
    with pytest.raises(NonFiniteGradientError):
        model.rollout_grad(np.ones(4), np.zeros(2), future, random_cost(rng, 2))


def test_forecast_matches_single_rollouts(trained_ssm, small_dataset):
    """Test that batched forecasts agree with encode plus rollout per origin."""
    origins = forecast_origins(small_dataset, trained_ssm.n_lags, 4)[:5]
    batch = forecast_batch(small_dataset, 0, origins, trained_ssm.n_lags, 4)
    batched = trained_ssm.forecast(batch)
    for b in range(len(origins)):
        s0 = trained_ssm.encode(batch.obs_lags[b], batch.dist_lags[b], batch.act_lags[b])
        powers, _ = trained_ssm.rollout(s0, batch.actions[b], batch.dists[b])
        assert np.allclose(batched[b], powers, rtol=1e-12, atol=1e-9)


def test_training_deterministic(small_dataset, tiny_train_config):
    """Test that the same seed gives identical final weights."""
    a, curve_a = train_ssm(small_dataset, tiny_train_config, zone=1)
    b, curve_b = train_ssm(small_dataset, tiny_train_config, zone=1)
    for name, value in a.parameters().items():
        assert np.array_equal(value, b.parameters()[name])
    assert curve_a.steps == curve_b.steps


def test_training_beats_untrained(small_dataset):
    """Test that validation loss after training is below the untrained loss."""
    config = TrainConfig(
        horizon=4, n_lags=4, d_s=8, d_h=8, hidden=16, epochs=8, batches_per_epoch=10,
        batch_size=16, learning_rate=3e-3,
    )
    untrained = SsmModel(small_dataset.stats, config.d_s, config.n_lags, config.hidden, config.seed)
    batch = validation_batch(small_dataset, 0, config)
    model, curve = train_ssm(small_dataset, config, zone=0, val=small_dataset)
    assert model.evaluate_loss(batch) < untrained.evaluate_loss(batch)
    assert len(curve.epochs) == 8
    assert len(curve.steps) == 80


def test_training_diverges_on_nan(small_dataset, tiny_train_config):
    """Test that NaN targets raise TrainingDivergedError."""
    hvac = small_dataset.hvac_w.copy()
    hvac[:] = np.nan
    broken = Dataset(
        small_dataset.timestamps,
        small_dataset.zone_temp,
        hvac,
        small_dataset.setpoint,
        small_dataset.weather,
        small_dataset.stats,
    )
    with pytest.raises(TrainingDivergedError):
        train_ssm(broken, tiny_train_config)


def test_training_warm_start_leaves_init(small_dataset, tiny_train_config, trained_ssm):
    """Test that continuing training copies the initial model."""
    before = {k: v.copy() for k, v in trained_ssm.parameters().items()}
    train_ssm(small_dataset, tiny_train_config, zone=0, init=trained_ssm)
    for name, value in trained_ssm.parameters().items():
        assert np.array_equal(value, before[name])


def test_checkpoint_roundtrip(tmp_path, trained_ssm, tiny_train_config):
    """Test that a checkpoint restores the weights bit for bit."""
    path = tmp_path / "zone_00.json"
    save_checkpoint(trained_ssm, path, tiny_train_config)
    loaded = load_checkpoint(path)
    assert isinstance(loaded, SsmModel)
    assert loaded.stats == trained_ssm.stats
    for name, value in trained_ssm.parameters().items():
        assert np.array_equal(loaded.parameters()[name], value)


def test_checkpoint_rejects_garbage(tmp_path):
    """Test that malformed checkpoints raise CheckpointError."""
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    path.write_text('{"kind": "lstm"}')
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_checkpoint_shape_mismatch(tmp_path, trained_ssm):
    """Test that weights that do not fit the architecture are rejected."""
    document = trained_ssm.to_document()
    document["arch"]["d_s"] += 1
    path = tmp_path / "zone.json"
    path.write_text(json.dumps(document))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
