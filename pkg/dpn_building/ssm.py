"""Deterministic zone state-space model.

    s_0     = enc(o, d, a over the lag frames)
    s_{k+1} = f(s_k, a_k, d_k)
    o_{k+1} = dec(s_{k+1})

Observations are [zone temperature, heating power]. Actions are absolute
setpoints; planners work in setpoint changes around a baseline schedule and
get gradients with respect to those changes from rollout_grad().
"""

import copy
import logging
from dataclasses import dataclass
from typing import Self

import numpy as np

from dpn_building.datahub import (
    DISTURBANCE_SIZE,
    OBS_SIZE,
    Dataset,
    EmptyPartitionError,
    ForecastBatch,
    NormStats,
    forecast_batch,
    forecast_origins,
)
from dpn_building.nn import (
    Adam,
    GruCache,
    GruCell,
    Mlp,
    MlpCache,
    ShapeError,
    TrainConfig,
    TrainingCurve,
    load_weights,
    weights_to_json,
)

logger = logging.getLogger(__name__)

TEMP, POWER = 0, 1
VALIDATION_ORIGINS = 512


class NonFiniteGradientError(ValueError):
    """Raised when a rollout cost or its gradient is not finite."""

    pass


class TrainingDivergedError(RuntimeError):
    """Raised when the training loss becomes non-finite."""

    pass


@dataclass(frozen=True, eq=False)
class LocalCost:
    """Local controller objective for one zone over a horizon.

        J(delta) = c * |delta|^2 + w * (lam . (u_bar - u) + rho/2 |u_bar - u|^2)

    with u the predicted power in units of power_unit_w watts.
    """

    u_bar: np.ndarray
    lam: np.ndarray
    rho: float
    baseline: np.ndarray
    power_unit_w: float = 100.0
    power_weight: float = 1.0
    comfort_weight: float = 1.0

    @property
    def horizon(self) -> int:
        return len(self.baseline)

    def value(self, delta: np.ndarray, powers_w: np.ndarray) -> float:
        gap = self.u_bar - np.asarray(powers_w) / self.power_unit_w
        power_term = float(self.lam @ gap) + 0.5 * self.rho * float(gap @ gap)
        return self.comfort_weight * float(delta @ delta) + self.power_weight * power_term

    def values(self, deltas: np.ndarray, powers_w: np.ndarray) -> np.ndarray:
        """value() for every row of (C, H) candidate arrays."""
        gap = self.u_bar[None, :] - np.asarray(powers_w) / self.power_unit_w
        power_term = gap @ self.lam + 0.5 * self.rho * np.sum(gap * gap, axis=1)
        return self.comfort_weight * np.sum(deltas * deltas, axis=1) + self.power_weight * power_term

    def power_gradient(self, powers_w: np.ndarray) -> np.ndarray:
        """dJ/dP in per-watt units."""
        gap = self.u_bar - np.asarray(powers_w) / self.power_unit_w
        return self.power_weight * (-self.lam - self.rho * gap) / self.power_unit_w


@dataclass(frozen=True, eq=False)
class RolloutCost:
    value: float
    grad: np.ndarray
    powers: np.ndarray
    temps: np.ndarray


@dataclass
class _Rollout:
    out: np.ndarray  # (B, H, 2) normalized
    dynamics: list[GruCache]
    decoder: list[MlpCache]


class SsmModel:
    """Encoder, transition cell and decoder for one zone."""

    stats: NormStats
    d_s: int
    n_lags: int
    hidden: int
    seed: int
    encoder: GruCell
    dynamics: GruCell
    decoder: Mlp

    def __init__(
        self,
        stats: NormStats,
        d_s: int = 32,
        n_lags: int = 8,
        hidden: int = 64,
        seed: int = 0,
        zero: bool = False,
    ):
        """Build a model with Glorot-initialized weights.

        Args:
            stats: Normalization statistics of the training data
            d_s: Latent width
            n_lags: Number of observation frames the encoder reads
            hidden: Width of the decoder's two hidden layers
            seed: Initialization seed
            zero: Use all-zero weights instead of random ones
        """
        if d_s < 1 or n_lags < 1 or hidden < 1:
            raise ShapeError("d_s, n_lags and hidden must be >= 1")
        self.stats = stats
        self.d_s = d_s
        self.n_lags = n_lags
        self.hidden = hidden
        self.seed = seed
        rng = None if zero else np.random.default_rng(seed)
        self.encoder = GruCell("encoder", OBS_SIZE + DISTURBANCE_SIZE + 1, d_s, rng)
        self.dynamics = GruCell("dynamics", 1 + DISTURBANCE_SIZE, d_s, rng)
        self.decoder = Mlp("decoder", [d_s, hidden, hidden, OBS_SIZE], rng)

    def parameters(self) -> dict[str, np.ndarray]:
        return {
            **self.encoder.parameters(),
            **self.dynamics.parameters(),
            **self.decoder.parameters(),
        }

    def copy(self) -> "SsmModel":
        return copy.deepcopy(self)

    # Batched internals, all in normalized units.

    def _frames(self, obs_lags: np.ndarray, dist_lags: np.ndarray, act_lags: np.ndarray) -> np.ndarray:
        """Encoder inputs (B, L, 10): frame j sees the setpoint applied after frame j-1."""
        batch, n_lags = obs_lags.shape[:2]
        if n_lags != self.n_lags or dist_lags.shape[1] != self.n_lags:
            raise ShapeError(f"expected {self.n_lags} lag frames, got {n_lags}")
        if act_lags.shape != (batch, self.n_lags - 1):
            raise ShapeError(f"expected {self.n_lags - 1} lag actions, got {act_lags.shape[1:]}")
        previous = np.zeros((batch, self.n_lags, 1))
        previous[:, 1:, 0] = self.stats.normalize("setpoint", act_lags)
        return np.concatenate(
            [self.stats.normalize_obs(obs_lags), self.stats.normalize_dist(dist_lags), previous],
            axis=-1,
        )

    def _encode(self, frames: np.ndarray) -> tuple[np.ndarray, list[GruCache]]:
        s = np.zeros((frames.shape[0], self.d_s))
        caches = []
        for j in range(frames.shape[1]):
            s, cache = self.encoder.forward(frames[:, j], s)
            caches.append(cache)
        return s, caches

    def _roll(self, s: np.ndarray, actions: np.ndarray, dists: np.ndarray) -> _Rollout:
        batch, horizon = actions.shape
        out = np.zeros((batch, horizon, OBS_SIZE))
        dynamics, decoder = [], []
        for k in range(horizon):
            x = np.concatenate([actions[:, k : k + 1], dists[:, k]], axis=1)
            s, cache = self.dynamics.forward(x, s)
            out[:, k], dec_cache = self.decoder.forward(s)
            dynamics.append(cache)
            decoder.append(dec_cache)
        return _Rollout(out=out, dynamics=dynamics, decoder=decoder)

    def _roll_backward(
        self, rollout: _Rollout, dout: np.ndarray, grads: dict | None
    ) -> tuple[np.ndarray, np.ndarray]:
        """Returns (d loss / d normalized actions, d loss / d s_0)."""
        batch, horizon = dout.shape[:2]
        ds = np.zeros((batch, self.d_s))
        dactions = np.zeros((batch, horizon))
        for k in reversed(range(horizon)):
            ds = ds + self.decoder.backward(rollout.decoder[k], dout[:, k], grads)
            dx, ds = self.dynamics.backward(rollout.dynamics[k], ds, grads)
            dactions[:, k] = dx[:, 0]
        return dactions, ds

    def _check_horizon(self, actions: np.ndarray, dists: np.ndarray) -> None:
        if dists.shape != (len(actions), DISTURBANCE_SIZE):
            raise ShapeError(
                f"{len(actions)} actions need ({len(actions)}, {DISTURBANCE_SIZE}) disturbances, "
                f"got {dists.shape}"
            )

    # Single-zone, single-origin API in physical units.

    def encode(self, obs_lags: np.ndarray, dist_lags: np.ndarray, act_lags: np.ndarray) -> np.ndarray:
        """Latent state after reading the lag frames.

        Args:
            obs_lags: (n_lags, 2) observations, oldest first
            dist_lags: (n_lags, 7) disturbances of the same rows
            act_lags: (n_lags - 1,) setpoints applied between the frames
        """
        obs_lags = np.asarray(obs_lags, dtype=np.float64)
        dist_lags = np.asarray(dist_lags, dtype=np.float64)
        act_lags = np.asarray(act_lags, dtype=np.float64)
        if obs_lags.ndim != 2 or dist_lags.ndim != 2 or act_lags.ndim != 1:
            raise ShapeError("encode takes one origin: (L, 2), (L, 7) and (L - 1,) arrays")
        s, _ = self._encode(self._frames(obs_lags[None], dist_lags[None], act_lags[None]))
        return s[0]

    def transition(self, s: np.ndarray, setpoint: float, dist: np.ndarray) -> np.ndarray:
        a = self.stats.normalize("setpoint", np.array([[setpoint]]))
        x = np.concatenate([a, self.stats.normalize_dist(np.asarray(dist)[None])], axis=1)
        s_next, _ = self.dynamics.forward(x, np.asarray(s)[None])
        return s_next[0]

    def decode(self, s: np.ndarray) -> tuple[float, float]:
        """(temperature in C, power in W) predicted from a latent state."""
        out, _ = self.decoder.forward(np.asarray(s)[None])
        temp = float(self.stats.denormalize("zone_temp", out[0, TEMP]))
        power = max(float(self.stats.denormalize("hvac_w", out[0, POWER])), 0.0)
        return temp, power

    def rollout(
        self, s0: np.ndarray, setpoints: np.ndarray, dists: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray]:
        """Predicted (powers W, temperatures C) for the next len(setpoints) steps."""
        setpoints = np.asarray(setpoints, dtype=np.float64)
        dists = np.asarray(dists, dtype=np.float64).reshape(-1, DISTURBANCE_SIZE)
        self._check_horizon(setpoints, dists)
        if len(setpoints) == 0:
            return np.zeros(0), np.zeros(0)
        rollout = self._roll(
            np.asarray(s0)[None],
            self.stats.normalize("setpoint", setpoints)[None],
            self.stats.normalize_dist(dists)[None],
        )
        return self._powers(rollout.out[0]), self._temps(rollout.out[0])

    def rollout_grad(
        self, s0: np.ndarray, delta: np.ndarray, dists: np.ndarray, cost: LocalCost
    ) -> RolloutCost:
        """Cost of the setpoint changes delta and its exact gradient.

        Raises:
            NonFiniteGradientError: If the inputs, the cost or the gradient is not finite
        """
        delta = np.asarray(delta, dtype=np.float64)
        dists = np.asarray(dists, dtype=np.float64).reshape(-1, DISTURBANCE_SIZE)
        self._check_horizon(delta, dists)
        if cost.horizon != len(delta):
            raise ShapeError(f"cost covers {cost.horizon} steps, delta {len(delta)}")
        if not (np.all(np.isfinite(s0)) and np.all(np.isfinite(delta)) and np.all(np.isfinite(dists))):
            raise NonFiniteGradientError("rollout inputs are not finite")
        if len(delta) == 0:
            return RolloutCost(value=0.0, grad=np.zeros(0), powers=np.zeros(0), temps=np.zeros(0))

        rollout = self._roll(
            np.asarray(s0)[None],
            self.stats.normalize("setpoint", cost.baseline + delta)[None],
            self.stats.normalize_dist(dists)[None],
        )
        raw = self.stats.denormalize("hvac_w", rollout.out[0, :, POWER])
        powers = np.maximum(raw, 0.0)
        value = cost.value(delta, powers)

        dout = np.zeros_like(rollout.out)
        dout[0, :, POWER] = cost.power_gradient(powers) * (raw > 0.0) * self.stats.scale("hvac_w")
        dactions, _ = self._roll_backward(rollout, dout, None)
        std_setpoint = self.stats.scale("setpoint")
        grad = dactions[0] / std_setpoint + 2.0 * cost.comfort_weight * delta

        if not np.isfinite(value) or not np.all(np.isfinite(grad)):
            raise NonFiniteGradientError(f"non-finite cost {value} or gradient {grad}")
        return RolloutCost(value=value, grad=grad, powers=powers, temps=self._temps(rollout.out[0]))

    def _powers(self, out: np.ndarray) -> np.ndarray:
        return np.maximum(self.stats.denormalize("hvac_w", out[..., POWER]), 0.0)

    def _temps(self, out: np.ndarray) -> np.ndarray:
        return self.stats.denormalize("zone_temp", out[..., TEMP])

    # Batched evaluation and training.

    def encode_batch(self, batch: ForecastBatch) -> np.ndarray:
        s, _ = self._encode(self._frames(batch.obs_lags, batch.dist_lags, batch.act_lags))
        return s

    def forecast(self, batch: ForecastBatch) -> np.ndarray:
        """Mean predicted power (B, H) in W for every origin of the batch."""
        s = self.encode_batch(batch)
        rollout = self._roll(
            s,
            self.stats.normalize("setpoint", batch.actions),
            self.stats.normalize_dist(batch.dists),
        )
        return self._powers(rollout.out)

    def loss_and_grads(self, batch: ForecastBatch, temp_weight: float = 0.1) -> tuple[float, dict]:
        """Multi-step normalized MSE on power plus weighted temperature MSE."""
        frames = self._frames(batch.obs_lags, batch.dist_lags, batch.act_lags)
        s, encoder_caches = self._encode(frames)
        rollout = self._roll(
            s,
            self.stats.normalize("setpoint", batch.actions),
            self.stats.normalize_dist(batch.dists),
        )
        error = rollout.out - self.stats.normalize_obs(batch.truth)
        weights = np.zeros(OBS_SIZE)
        weights[TEMP], weights[POWER] = temp_weight, 1.0
        count = error.shape[0] * error.shape[1]
        loss = float(np.sum(weights * error * error)) / count

        grads: dict[str, np.ndarray] = {}
        _, ds = self._roll_backward(rollout, 2.0 * weights * error / count, grads)
        for cache in reversed(encoder_caches):
            _, ds = self.encoder.backward(cache, ds, grads)
        return loss, grads

    def evaluate_loss(self, batch: ForecastBatch, temp_weight: float = 0.1) -> float:
        loss, _ = self.loss_and_grads(batch, temp_weight)
        return loss

    def to_document(self, train_config: TrainConfig | None = None) -> dict:
        return {
            "kind": "ssm",
            "arch": {"d_s": self.d_s, "n_lags": self.n_lags, "hidden": self.hidden},
            "weights": weights_to_json(self.parameters()),
            "norm_stats": self.stats.to_dict(),
            "seed": self.seed,
            "train_config": train_config.to_dict() if train_config else None,
        }

    @classmethod
    def from_document(cls, document: dict) -> Self:
        """Rebuild a model from to_document() output.

        Raises:
            ShapeError: If the weights do not fit the stored architecture
        """
        arch = document["arch"]
        model = cls(
            NormStats.from_dict(document["norm_stats"]),
            d_s=arch["d_s"],
            n_lags=arch["n_lags"],
            hidden=arch["hidden"],
            seed=document["seed"],
            zero=True,
        )
        load_weights(model.parameters(), document["weights"])
        return model


def training_batch(dataset: Dataset, zone: int, config: TrainConfig, stride: int = 1) -> ForecastBatch:
    """Every usable window of one zone, ready for sampling.

    Raises:
        EmptyPartitionError: If the dataset has no window of n_lags + horizon rows
    """
    origins = forecast_origins(dataset, config.n_lags, config.horizon, stride)
    if len(origins) == 0:
        raise EmptyPartitionError(
            f"no window of {config.n_lags + config.horizon} contiguous rows for zone {zone}"
        )
    return forecast_batch(dataset, zone, origins, config.n_lags, config.horizon)


def validation_batch(dataset: Dataset, zone: int, config: TrainConfig) -> ForecastBatch:
    """Evenly spaced origins of a held-out dataset, at most VALIDATION_ORIGINS."""
    full = forecast_origins(dataset, config.n_lags, config.horizon)
    stride = max(1, -(-len(full) // VALIDATION_ORIGINS))
    return training_batch(dataset, zone, config, stride=stride)


def train_ssm(
    dataset: Dataset,
    config: TrainConfig,
    zone: int = 0,
    val: Dataset | None = None,
    init: SsmModel | None = None,
) -> tuple[SsmModel, TrainingCurve]:
    """Fit an SSM for one zone by Adam on sampled windows.

    Args:
        dataset: Training data; its stats (or stats fitted on it) normalize the model
        config: Training hyperparameters
        zone: Zone whose columns are used
        val: Optional held-out data evaluated after every epoch
        init: Continue from a copy of this model instead of a fresh one

    Returns:
        Tuple of (trained model, training curve)

    Raises:
        TrainingDivergedError: If a minibatch loss is not finite
    """
    if init is not None:
        model = init.copy()
    else:
        stats = dataset.stats if dataset.stats is not None else NormStats.fit(dataset)
        model = SsmModel(stats, config.d_s, config.n_lags, config.hidden, config.seed)
    batch = training_batch(dataset, zone, config)
    val_batch = validation_batch(val, zone, config) if val is not None else None

    rng = np.random.default_rng(config.seed)
    optimizer = Adam(model.parameters(), config.learning_rate, config.clip_norm)
    curve = TrainingCurve()
    for epoch in range(config.epochs):
        losses = []
        for _ in range(config.batches_per_epoch):
            index = rng.integers(0, len(batch), size=config.batch_size)
            loss, grads = model.loss_and_grads(batch.take(index), config.temp_weight)
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"zone {zone}: non-finite loss in epoch {epoch}")
            grad_norm = optimizer.step(grads)
            curve.log_step(epoch=epoch, loss=loss, grad_norm=grad_norm)
            losses.append(loss)
        val_loss = model.evaluate_loss(val_batch, config.temp_weight) if val_batch is not None else float("nan")
        curve.log_epoch(train_loss=float(np.mean(losses)), val_loss=val_loss)
        if epoch % config.log_every == 0 or epoch == config.epochs - 1:
            logger.info(
                "ssm zone %d epoch %d: train %.4f val %.4f", zone, epoch, np.mean(losses), val_loss
            )
    return model, curve
