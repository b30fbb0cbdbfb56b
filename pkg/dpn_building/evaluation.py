"""Rolling-origin forecast evaluation of zone models."""

import logging
from collections.abc import Sequence
from dataclasses import dataclass
from typing import Protocol

import numpy as np
import pandas as pd

from dpn_building.datahub import Dataset, ForecastBatch, forecast_batch, forecast_origins
from dpn_building.rssm import FORECAST_SAMPLES, RssmModel
from dpn_building.units import HorizonError, format_horizon

logger = logging.getLogger(__name__)

MAPE_FLOOR_W = 100.0
DEFAULT_HORIZONS = (4, 8, 16)
CHUNK = 512


class Forecaster(Protocol):
    n_lags: int

    def forecast(self, batch: ForecastBatch) -> np.ndarray: ...


@dataclass(frozen=True, eq=False)
class EvaluationResult:
    """Errors by horizon: per-zone MAE in W and building MAPE in percent."""

    horizons: tuple[int, ...]
    mae: np.ndarray  # (N, len(horizons))
    mape: np.ndarray  # (len(horizons),)
    n_origins: int

    def mae_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.mae, columns=[format_horizon(h) for h in self.horizons])
        frame.index.name = "zone"
        return frame

    def to_dict(self) -> dict:
        return {
            "horizons": list(self.horizons),
            "n_origins": self.n_origins,
            "mape_pct": {format_horizon(h): float(m) for h, m in zip(self.horizons, self.mape)},
            "mae_w": {
                format_horizon(h): self.mae[:, i].tolist() for i, h in enumerate(self.horizons)
            },
        }


def _predict(model: Forecaster, batch: ForecastBatch, n_samples: int, seed: int) -> np.ndarray:
    if isinstance(model, RssmModel):
        return model.forecast(batch, n_samples=n_samples, seed=seed)
    return model.forecast(batch)


def mape(predicted: np.ndarray, truth: np.ndarray, floor_w: float = MAPE_FLOOR_W) -> float:
    """Mean absolute percentage error, skipping entries with truth below floor_w."""
    mask = truth >= floor_w
    if not np.any(mask):
        return float("nan")
    return float(100.0 * np.mean(np.abs(predicted[mask] - truth[mask]) / truth[mask]))


def evaluate_model(
    models: Sequence[Forecaster],
    dataset: Dataset,
    horizons: Sequence[int] = DEFAULT_HORIZONS,
    stride: int = 1,
    n_samples: int = FORECAST_SAMPLES,
    seed: int = 0,
) -> EvaluationResult:
    """Forecast every origin of a dataset with one model per zone.

    The error at horizon h averages steps 1..h of each origin. Building MAPE
    compares the per-timestep sum of zone powers.

    Args:
        models: One model per zone, in zone order
        dataset: Held-out data
        horizons: Horizons in timesteps
        stride: Distance between consecutive origins
        n_samples: Sampled trajectories averaged per origin for RSSMs
        seed: Sampling seed for RSSMs

    Raises:
        HorizonError: If no origin has enough rows for the longest horizon
        ValueError: If the model count differs from the dataset's zones
    """
    horizons = tuple(int(h) for h in horizons)
    if not horizons or min(horizons) < 1:
        raise HorizonError(f"horizons must be >= 1, got {horizons}")
    if len(models) != dataset.n_zones:
        raise ValueError(f"{len(models)} models for {dataset.n_zones} zones")
    longest = max(horizons)
    n_lags = max(model.n_lags for model in models)
    origins = forecast_origins(dataset, n_lags, longest, stride)
    if len(origins) == 0:
        raise HorizonError(
            f"horizon {longest} with {n_lags} lags does not fit in {len(dataset)} rows"
        )

    predicted = np.zeros((dataset.n_zones, len(origins), longest))
    truth = np.zeros_like(predicted)
    for zone, model in enumerate(models):
        for start in range(0, len(origins), CHUNK):
            chunk = origins[start : start + CHUNK]
            batch = forecast_batch(dataset, zone, chunk, model.n_lags, longest)
            predicted[zone, start : start + len(chunk)] = _predict(model, batch, n_samples, seed)
            truth[zone, start : start + len(chunk)] = batch.truth[..., 1]

    mae = np.array(
        [[np.mean(np.abs(predicted[z, :, :h] - truth[z, :, :h])) for h in horizons] for z in range(dataset.n_zones)]
    )
    building_pred = predicted.sum(axis=0)
    building_truth = truth.sum(axis=0)
    building_mape = np.array([mape(building_pred[:, :h], building_truth[:, :h]) for h in horizons])
    logger.info(
        "evaluated %d origins: %s",
        len(origins),
        ", ".join(f"{format_horizon(h)} MAPE {m:.2f}%" for h, m in zip(horizons, building_mape)),
    )
    return EvaluationResult(horizons=horizons, mae=mae, mape=building_mape, n_origins=len(origins))


def summarize_seeds(results: dict[str, Sequence[EvaluationResult]]) -> pd.DataFrame:
    """Building MAPE mean, min and max over training seeds, per model kind and horizon.

    Args:
        results: Evaluation results keyed by model kind, one per seed
    """
    rows = []
    for kind, runs in results.items():
        if not runs:
            continue
        for i, horizon in enumerate(runs[0].horizons):
            values = np.array([run.mape[i] for run in runs])
            rows.append(
                {
                    "model": kind,
                    "horizon": format_horizon(horizon),
                    "mape_mean": float(np.mean(values)),
                    "mape_min": float(np.min(values)),
                    "mape_max": float(np.max(values)),
                    "seeds": len(values),
                }
            )
    return pd.DataFrame(rows, columns=["model", "horizon", "mape_mean", "mape_min", "mape_max", "seeds"])
