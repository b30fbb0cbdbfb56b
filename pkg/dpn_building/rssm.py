"""Recurrent state-space model with a stochastic latent.

    h_{t+1} = f(h_t, s_t, a_t, d_t)          deterministic path
    s_t     ~ N(mu_p(h_t), sigma_p(h_t))     prior, used for planning
    s_t     ~ N(mu_q(h_t, o_t), sigma_q)     posterior, used for filtering and training
    o_t     = dec(h_t, s_t)

Standard deviations are softplus outputs floored at MIN_STD.
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
    ForecastBatch,
    NormStats,
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
    sigmoid,
    softplus,
    weights_to_json,
)
from dpn_building.ssm import TrainingDivergedError, training_batch, validation_batch

logger = logging.getLogger(__name__)

MIN_STD = 1e-3
TEMP, POWER = 0, 1
FORECAST_SAMPLES = 30


@dataclass(frozen=True, eq=False)
class RssmStep:
    h: np.ndarray
    prior_mean: np.ndarray
    prior_std: np.ndarray
    s: np.ndarray


@dataclass
class _ElboCache:
    cell: GruCache | None
    prior: MlpCache
    posterior: MlpCache
    decoder: MlpCache
    prior_raw: np.ndarray
    posterior_raw: np.ndarray
    mu_p: np.ndarray
    sigma_p: np.ndarray
    mu_q: np.ndarray
    sigma_q: np.ndarray
    eps: np.ndarray
    error: np.ndarray
    kl: np.ndarray


def sample_noise(k: int, horizon: int, d_s: int, seed: int) -> np.ndarray:
    """Standard normal draws (k, horizon, d_s), one independent substream per sample."""
    children = np.random.SeedSequence(seed).spawn(k)
    if k == 0:
        return np.zeros((0, horizon, d_s))
    return np.stack(
        [np.random.default_rng(child).standard_normal((horizon, d_s)) for child in children]
    )


class RssmModel:
    """Deterministic recurrent path plus Gaussian latent for one zone."""

    stats: NormStats
    d_h: int
    d_s: int
    hidden: int
    n_lags: int
    seed: int
    cell: GruCell
    prior: Mlp
    posterior: Mlp
    decoder: Mlp

    def __init__(
        self,
        stats: NormStats,
        d_h: int = 32,
        d_s: int = 32,
        hidden: int = 64,
        n_lags: int = 8,
        seed: int = 0,
        zero: bool = False,
    ):
        """Build a model with Glorot-initialized weights.

        Args:
            stats: Normalization statistics of the training data
            d_h: Width of the deterministic state
            d_s: Width of the stochastic latent
            hidden: Hidden width of the heads and decoder
            n_lags: Number of frames filtered before a forecast
            seed: Initialization seed
            zero: Use all-zero weights instead of random ones
        """
        if min(d_h, d_s, hidden, n_lags) < 1:
            raise ShapeError("d_h, d_s, hidden and n_lags must be >= 1")
        self.stats = stats
        self.d_h = d_h
        self.d_s = d_s
        self.hidden = hidden
        self.n_lags = n_lags
        self.seed = seed
        rng = None if zero else np.random.default_rng(seed)
        self.cell = GruCell("cell", d_s + 1 + DISTURBANCE_SIZE, d_h, rng)
        self.prior = Mlp("prior", [d_h, hidden, 2 * d_s], rng)
        self.posterior = Mlp("posterior", [d_h + OBS_SIZE, hidden, 2 * d_s], rng)
        self.decoder = Mlp("decoder", [d_h + d_s, hidden, hidden, OBS_SIZE], rng)

    def parameters(self) -> dict[str, np.ndarray]:
        return {
            **self.cell.parameters(),
            **self.prior.parameters(),
            **self.posterior.parameters(),
            **self.decoder.parameters(),
        }

    def copy(self) -> "RssmModel":
        return copy.deepcopy(self)

    def _gaussian(self, head: Mlp, x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, MlpCache]:
        out, cache = head.forward(x)
        raw = out[:, self.d_s :]
        return out[:, : self.d_s], softplus(raw) + MIN_STD, raw, cache

    def _advance(self, h: np.ndarray, s: np.ndarray, action: np.ndarray, dist: np.ndarray):
        """h' = f(h, s, a, d) on normalized (B, .) inputs."""
        return self.cell.forward(np.concatenate([s, action, dist], axis=1), h)

    def _check_frames(self, obs_lags: np.ndarray, act_lags: np.ndarray) -> None:
        if obs_lags.shape[1] != self.n_lags:
            raise ShapeError(f"expected {self.n_lags} lag frames, got {obs_lags.shape[1]}")
        if act_lags.shape[1] != self.n_lags - 1:
            raise ShapeError(f"expected {self.n_lags - 1} lag actions, got {act_lags.shape[1]}")

    def _filter(
        self, obs_lags: np.ndarray, dist_lags: np.ndarray, act_lags: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray]:
        """Posterior-mean filtering over (B, L) lag frames; returns (h, s) at the last frame."""
        self._check_frames(obs_lags, act_lags)
        obs = self.stats.normalize_obs(obs_lags)
        dist = self.stats.normalize_dist(dist_lags)
        act = self.stats.normalize("setpoint", act_lags)
        h = np.zeros((obs.shape[0], self.d_h))
        s = None
        for j in range(self.n_lags):
            if j > 0:
                h, _ = self._advance(h, s, act[:, j - 1 : j], dist[:, j - 1])
            s, _, _, _ = self._gaussian(self.posterior, np.concatenate([h, obs[:, j]], axis=1))
        return h, s

    def filter(
        self, obs_lags: np.ndarray, dist_lags: np.ndarray, act_lags: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray]:
        """State (h, s) after filtering one origin's lag frames.

        Args:
            obs_lags: (n_lags, 2) observations, oldest first
            dist_lags: (n_lags, 7) disturbances of the same rows
            act_lags: (n_lags - 1,) setpoints applied between the frames
        """
        h, s = self._filter(
            np.asarray(obs_lags, dtype=np.float64)[None],
            np.asarray(dist_lags, dtype=np.float64)[None],
            np.asarray(act_lags, dtype=np.float64)[None],
        )
        return h[0], s[0]

    def step(
        self,
        h: np.ndarray,
        s: np.ndarray,
        setpoint: float,
        dist: np.ndarray,
        rng: np.random.Generator,
    ) -> RssmStep:
        """Advance the deterministic state and sample the next latent from the prior."""
        h = np.asarray(h, dtype=np.float64)
        s = np.asarray(s, dtype=np.float64)
        if h.shape != (self.d_h,) or s.shape != (self.d_s,):
            raise ShapeError(f"expected h ({self.d_h},) and s ({self.d_s},), got {h.shape}, {s.shape}")
        action = self.stats.normalize("setpoint", np.array([[setpoint]]))
        dist = self.stats.normalize_dist(np.asarray(dist, dtype=np.float64)[None])
        h_next, _ = self._advance(h[None], s[None], action, dist)
        mu, sigma, _, _ = self._gaussian(self.prior, h_next)
        s_next = mu + sigma * rng.standard_normal((1, self.d_s))
        return RssmStep(h=h_next[0], prior_mean=mu[0], prior_std=sigma[0], s=s_next[0])

    def _sample_rollout(
        self,
        h: np.ndarray,
        s: np.ndarray,
        actions: np.ndarray,
        dists: np.ndarray,
        noise: np.ndarray,
        force_min_std: bool,
    ) -> np.ndarray:
        """Normalized decoded observations (n, H, 2) of n sampled rollouts."""
        n, horizon = actions.shape
        out = np.zeros((n, horizon, OBS_SIZE))
        for k in range(horizon):
            h, _ = self._advance(h, s, actions[:, k : k + 1], dists[:, k])
            mu, sigma, _, _ = self._gaussian(self.prior, h)
            if force_min_std:
                sigma = np.full_like(sigma, MIN_STD)
            s = mu + sigma * noise[:, k]
            out[:, k], _ = self.decoder.forward(np.concatenate([h, s], axis=1))
        return out

    def _physical(self, out: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        powers = np.maximum(self.stats.denormalize("hvac_w", out[..., POWER]), 0.0)
        return powers, self.stats.denormalize("zone_temp", out[..., TEMP])

    def rollout_samples(
        self,
        h0: np.ndarray,
        s0: np.ndarray,
        setpoints: np.ndarray,
        dists: np.ndarray,
        noise: np.ndarray,
        force_min_std: bool = False,
    ) -> tuple[np.ndarray, np.ndarray]:
        """Sampled trajectories from one state, one per noise row.

        Args:
            h0: Deterministic state at the origin
            s0: Latent at the origin
            setpoints: (H,) setpoints in C
            dists: (H, 7) disturbance forecast
            noise: (k, H, d_s) standard normal draws, see sample_noise()
            force_min_std: Replace every prior std by MIN_STD

        Returns:
            Tuple of (powers (k, H) in W, temperatures (k, H) in C)
        """
        setpoints = np.asarray(setpoints, dtype=np.float64)
        dists = np.asarray(dists, dtype=np.float64).reshape(-1, DISTURBANCE_SIZE)
        horizon = len(setpoints)
        if dists.shape[0] != horizon or noise.shape[1:] != (horizon, self.d_s):
            raise ShapeError(
                f"horizon {horizon}: disturbances {dists.shape}, noise {noise.shape}"
            )
        k = noise.shape[0]
        if k < 1:
            raise ShapeError("at least one sample is required")
        if horizon == 0:
            return np.zeros((k, 0)), np.zeros((k, 0))
        out = self._sample_rollout(
            np.repeat(np.asarray(h0)[None], k, axis=0),
            np.repeat(np.asarray(s0)[None], k, axis=0),
            np.repeat(self.stats.normalize("setpoint", setpoints)[None], k, axis=0),
            np.repeat(self.stats.normalize_dist(dists)[None], k, axis=0),
            noise,
            force_min_std,
        )
        return self._physical(out)

    def rollout_candidates(
        self,
        h0: np.ndarray,
        s0: np.ndarray,
        setpoints: np.ndarray,
        dists: np.ndarray,
        noise: np.ndarray,
    ) -> tuple[np.ndarray, np.ndarray]:
        """Sampled trajectories of many setpoint sequences sharing the same noise.

        Args:
            setpoints: (C, H) candidate setpoint sequences
            noise: (k, H, d_s) draws reused for every candidate

        Returns:
            Tuple of (powers (C, k, H), temperatures (C, k, H))
        """
        setpoints = np.asarray(setpoints, dtype=np.float64)
        n_candidates, horizon = setpoints.shape
        k = noise.shape[0]
        dists = np.asarray(dists, dtype=np.float64).reshape(horizon, DISTURBANCE_SIZE)
        out = self._sample_rollout(
            np.broadcast_to(np.asarray(h0), (n_candidates * k, self.d_h)).copy(),
            np.broadcast_to(np.asarray(s0), (n_candidates * k, self.d_s)).copy(),
            np.repeat(self.stats.normalize("setpoint", setpoints), k, axis=0),
            np.broadcast_to(self.stats.normalize_dist(dists), (n_candidates * k, horizon, DISTURBANCE_SIZE)),
            np.tile(noise, (n_candidates, 1, 1)),
            False,
        )
        powers, temps = self._physical(out)
        return powers.reshape(n_candidates, k, horizon), temps.reshape(n_candidates, k, horizon)

    def forecast(self, batch: ForecastBatch, n_samples: int = FORECAST_SAMPLES, seed: int = 0) -> np.ndarray:
        """Mean power (B, H) in W over n_samples sampled trajectories per origin."""
        h, s = self._filter(batch.obs_lags, batch.dist_lags, batch.act_lags)
        n, horizon = batch.actions.shape
        rng = np.random.default_rng(seed)
        noise = rng.standard_normal((n * n_samples, horizon, self.d_s))
        out = self._sample_rollout(
            np.repeat(h, n_samples, axis=0),
            np.repeat(s, n_samples, axis=0),
            np.repeat(self.stats.normalize("setpoint", batch.actions), n_samples, axis=0),
            np.repeat(self.stats.normalize_dist(batch.dists), n_samples, axis=0),
            noise,
            False,
        )
        powers, _ = self._physical(out)
        return powers.reshape(n, n_samples, horizon).mean(axis=1)

    def loss_and_grads(
        self,
        batch: ForecastBatch,
        rng: np.random.Generator,
        temp_weight: float = 0.1,
        free_nats: float = 1.0,
    ) -> tuple[float, dict, dict[str, float]]:
        """Negative ELBO over the full window and its gradients.

        The window is every lag frame followed by the horizon. Per step the
        loss is the weighted squared reconstruction error plus the KL from
        posterior to prior, floored at free_nats. Latents are reparameterized.

        Returns:
            Tuple of (loss, parameter gradients, diagnostics)
        """
        obs = self.stats.normalize_obs(np.concatenate([batch.obs_lags, batch.truth], axis=1))
        dists = self.stats.normalize_dist(np.concatenate([batch.dist_lags, batch.dists], axis=1))
        actions = self.stats.normalize("setpoint", np.concatenate([batch.act_lags, batch.actions], axis=1))
        n, length = obs.shape[:2]
        weights = np.zeros(OBS_SIZE)
        weights[TEMP], weights[POWER] = temp_weight, 1.0

        caches: list[_ElboCache] = []
        h = np.zeros((n, self.d_h))
        s = None
        for j in range(length):
            cell_cache = None
            if j > 0:
                h, cell_cache = self._advance(h, s, actions[:, j - 1 : j], dists[:, j - 1])
            mu_p, sigma_p, prior_raw, prior_cache = self._gaussian(self.prior, h)
            mu_q, sigma_q, post_raw, post_cache = self._gaussian(
                self.posterior, np.concatenate([h, obs[:, j]], axis=1)
            )
            eps = rng.standard_normal((n, self.d_s))
            s = mu_q + sigma_q * eps
            recon, dec_cache = self.decoder.forward(np.concatenate([h, s], axis=1))
            kl = np.sum(
                np.log(sigma_p / sigma_q)
                + (sigma_q**2 + (mu_q - mu_p) ** 2) / (2.0 * sigma_p**2)
                - 0.5,
                axis=1,
            )
            caches.append(
                _ElboCache(
                    cell=cell_cache,
                    prior=prior_cache,
                    posterior=post_cache,
                    decoder=dec_cache,
                    prior_raw=prior_raw,
                    posterior_raw=post_raw,
                    mu_p=mu_p,
                    sigma_p=sigma_p,
                    mu_q=mu_q,
                    sigma_q=sigma_q,
                    eps=eps,
                    error=recon - obs[:, j],
                    kl=kl,
                )
            )

        count = n * length
        recon_total = sum(0.5 * float(np.sum(weights * c.error**2)) for c in caches)
        kl_terms = np.stack([np.maximum(c.kl, free_nats) for c in caches])
        loss = (recon_total + float(np.sum(kl_terms))) / count

        grads: dict[str, np.ndarray] = {}
        dh = np.zeros((n, self.d_h))
        ds = np.zeros((n, self.d_s))
        for j in reversed(range(length)):
            c = caches[j]
            dx = self.decoder.backward(c.decoder, weights * c.error / count, grads)
            dh = dh + dx[:, : self.d_h]
            ds = ds + dx[:, self.d_h :]

            active = ((c.kl > free_nats) / count)[:, None]
            diff = c.mu_q - c.mu_p
            var_p = c.sigma_p**2
            d_mu_q = ds + active * diff / var_p
            d_sigma_q = ds * c.eps + active * (-1.0 / c.sigma_q + c.sigma_q / var_p)
            d_mu_p = -active * diff / var_p
            d_sigma_p = active * (1.0 / c.sigma_p - (c.sigma_q**2 + diff**2) / (var_p * c.sigma_p))

            d_post = self.posterior.backward(
                c.posterior,
                np.concatenate([d_mu_q, d_sigma_q * sigmoid(c.posterior_raw)], axis=1),
                grads,
            )
            d_prior = self.prior.backward(
                c.prior,
                np.concatenate([d_mu_p, d_sigma_p * sigmoid(c.prior_raw)], axis=1),
                grads,
            )
            dh = dh + d_post[:, : self.d_h] + d_prior
            if c.cell is not None:
                dx, dh = self.cell.backward(c.cell, dh, grads)
                ds = dx[:, : self.d_s]

        diagnostics = {
            "kl": float(np.mean([c.kl for c in caches])),
            "kl_term": float(np.mean(kl_terms)),
            "prior_std": float(np.mean([c.sigma_p for c in caches])),
            "posterior_std": float(np.mean([c.sigma_q for c in caches])),
        }
        return loss, grads, diagnostics

    def to_document(self, train_config: TrainConfig | None = None) -> dict:
        return {
            "kind": "rssm",
            "arch": {"d_h": self.d_h, "d_s": self.d_s, "hidden": self.hidden, "n_lags": self.n_lags},
            "weights": weights_to_json(self.parameters()),
            "norm_stats": self.stats.to_dict(),
            "seed": self.seed,
            "train_config": train_config.to_dict() if train_config else None,
        }

    @classmethod
    def from_document(cls, document: dict) -> Self:
        arch = document["arch"]
        model = cls(
            NormStats.from_dict(document["norm_stats"]),
            d_h=arch["d_h"],
            d_s=arch["d_s"],
            hidden=arch["hidden"],
            n_lags=arch["n_lags"],
            seed=document["seed"],
            zero=True,
        )
        load_weights(model.parameters(), document["weights"])
        return model


def train_rssm(
    dataset: Dataset,
    config: TrainConfig,
    zone: int = 0,
    val: Dataset | None = None,
    init: RssmModel | None = None,
) -> tuple[RssmModel, TrainingCurve]:
    """Fit an RSSM for one zone by maximizing the ELBO on sampled windows.

    Raises:
        TrainingDivergedError: If the loss becomes non-finite
    """
    if init is not None:
        model = init.copy()
    else:
        stats = dataset.stats if dataset.stats is not None else NormStats.fit(dataset)
        model = RssmModel(stats, config.d_h, config.d_s, config.hidden, config.n_lags, config.seed)
    batch = training_batch(dataset, zone, config)
    val_batch = validation_batch(val, zone, config) if val is not None else None

    rng = np.random.default_rng(config.seed)
    optimizer = Adam(model.parameters(), config.learning_rate, config.clip_norm)
    curve = TrainingCurve()
    for epoch in range(config.epochs):
        losses = []
        for _ in range(config.batches_per_epoch):
            index = rng.integers(0, len(batch), size=config.batch_size)
            loss, grads, diagnostics = model.loss_and_grads(
                batch.take(index), rng, config.temp_weight, config.free_nats
            )
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"zone {zone}: non-finite ELBO in epoch {epoch}")
            grad_norm = optimizer.step(grads)
            curve.log_step(epoch=epoch, loss=loss, elbo=-loss, grad_norm=grad_norm, **diagnostics)
            losses.append(loss)
        val_loss = float("nan")
        if val_batch is not None:
            val_loss, _, _ = model.loss_and_grads(
                val_batch, np.random.default_rng(config.seed), config.temp_weight, config.free_nats
            )
        curve.log_epoch(train_loss=float(np.mean(losses)), val_loss=val_loss)
        if epoch % config.log_every == 0 or epoch == config.epochs - 1:
            logger.info(
                "rssm zone %d epoch %d: -elbo %.4f val %.4f", zone, epoch, np.mean(losses), val_loss
            )
    return model, curve
