"""Small numpy networks with hand-written reverse passes.

Only the pieces the zone models need: a gated recurrent cell, a tanh MLP and
an Adam optimizer. Every backward() accumulates parameter gradients into a
caller-owned dict keyed by parameter name, or skips them when it is None.
"""

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Self

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

Grads = dict[str, np.ndarray]


class ShapeError(ValueError):
    """Raised when network inputs have the wrong shape."""

    pass


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters shared by SSM and RSSM training."""

    horizon: int = 16
    n_lags: int = 8
    d_s: int = 32
    d_h: int = 32
    hidden: int = 64
    epochs: int = 40
    batches_per_epoch: int = 50
    batch_size: int = 32
    learning_rate: float = 1e-3
    clip_norm: float = 1.0
    temp_weight: float = 0.1
    free_nats: float = 1.0
    seed: int = 0
    log_every: int = 5

    def __post_init__(self):
        for name in ("horizon", "n_lags", "d_s", "d_h", "hidden", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.epochs < 0 or self.batches_per_epoch < 1:
            raise ValueError("epochs must be >= 0 and batches_per_epoch >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> Self:
        return cls(**data)


@dataclass
class TrainingCurve:
    """Loss history: one row per optimizer update and one per epoch."""

    steps: list[dict[str, float]] = field(default_factory=list)
    epochs: list[dict[str, float]] = field(default_factory=list)

    def log_step(self, **values: float) -> None:
        self.steps.append({"step": len(self.steps), **values})

    def log_epoch(self, **values: float) -> None:
        self.epochs.append({"epoch": len(self.epochs), **values})

    def step_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.steps)

    def epoch_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.epochs)

    def column(self, name: str) -> np.ndarray:
        """One per-step column as an array."""
        return np.array([row[name] for row in self.steps], dtype=np.float64)

    def save_csv(self, path: Path) -> None:
        self.epoch_frame().to_csv(path, index=False)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def glorot(rng: np.random.Generator | None, fan_in: int, fan_out: int) -> np.ndarray:
    """Glorot-uniform weights, or zeros when rng is None."""
    if rng is None:
        return np.zeros((fan_in, fan_out))
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def _accumulate(grads: Grads | None, name: str, value: np.ndarray) -> None:
    if grads is None:
        return
    if name in grads:
        grads[name] += value
    else:
        grads[name] = value.copy()


@dataclass
class GruCache:
    x: np.ndarray
    h: np.ndarray
    z: np.ndarray
    r: np.ndarray
    n: np.ndarray
    gh_n: np.ndarray


class GruCell:
    """Gated recurrent cell with gates stacked as [update, reset, candidate].

        z = sigmoid(x Wx_z + bx_z + h Wh_z + bh_z)
        r = sigmoid(x Wx_r + bx_r + h Wh_r + bh_r)
        n = tanh(x Wx_n + bx_n + r * (h Wh_n + bh_n))
        h' = (1 - z) * n + z * h
    """

    name: str
    d_in: int
    d_hidden: int
    wx: np.ndarray
    wh: np.ndarray
    bx: np.ndarray
    bh: np.ndarray

    def __init__(self, name: str, d_in: int, d_hidden: int, rng: np.random.Generator | None):
        """Initialize weights.

        Args:
            name: Prefix for parameter names
            d_in: Input width
            d_hidden: State width
            rng: Generator for Glorot init; None gives all-zero weights
        """
        self.name = name
        self.d_in = d_in
        self.d_hidden = d_hidden
        self.wx = glorot(rng, d_in, 3 * d_hidden)
        self.wh = glorot(rng, d_hidden, 3 * d_hidden)
        self.bx = np.zeros(3 * d_hidden)
        self.bh = np.zeros(3 * d_hidden)

    def parameters(self) -> dict[str, np.ndarray]:
        return {
            f"{self.name}.wx": self.wx,
            f"{self.name}.wh": self.wh,
            f"{self.name}.bx": self.bx,
            f"{self.name}.bh": self.bh,
        }

    def forward(self, x: np.ndarray, h: np.ndarray) -> tuple[np.ndarray, GruCache]:
        """One step on a batch: x (B, d_in), h (B, d_hidden)."""
        if x.shape[-1] != self.d_in or h.shape[-1] != self.d_hidden:
            raise ShapeError(
                f"{self.name}: got x {x.shape}, h {h.shape}; "
                f"expected widths {self.d_in}, {self.d_hidden}"
            )
        d = self.d_hidden
        gx = x @ self.wx + self.bx
        gh = h @ self.wh + self.bh
        z = sigmoid(gx[:, :d] + gh[:, :d])
        r = sigmoid(gx[:, d : 2 * d] + gh[:, d : 2 * d])
        gh_n = gh[:, 2 * d :]
        n = np.tanh(gx[:, 2 * d :] + r * gh_n)
        h_new = (1.0 - z) * n + z * h
        return h_new, GruCache(x=x, h=h, z=z, r=r, n=n, gh_n=gh_n)

    def backward(
        self, cache: GruCache, dh_new: np.ndarray, grads: Grads | None
    ) -> tuple[np.ndarray, np.ndarray]:
        """Reverse pass of one step.

        Returns:
            Tuple of (gradient w.r.t. x, gradient w.r.t. the previous state h)
        """
        z, r, n, h = cache.z, cache.r, cache.n, cache.h
        dn = dh_new * (1.0 - z)
        dz = dh_new * (h - n)
        dh = dh_new * z

        da_n = dn * (1.0 - n * n)
        dr = da_n * cache.gh_n
        da_z = dz * z * (1.0 - z)
        da_r = dr * r * (1.0 - r)

        dgx = np.concatenate([da_z, da_r, da_n], axis=1)
        dgh = np.concatenate([da_z, da_r, da_n * r], axis=1)

        dx = dgx @ self.wx.T
        dh = dh + dgh @ self.wh.T

        _accumulate(grads, f"{self.name}.wx", cache.x.T @ dgx)
        _accumulate(grads, f"{self.name}.bx", dgx.sum(axis=0))
        _accumulate(grads, f"{self.name}.wh", cache.h.T @ dgh)
        _accumulate(grads, f"{self.name}.bh", dgh.sum(axis=0))
        return dx, dh


@dataclass
class MlpCache:
    inputs: list[np.ndarray]
    activations: list[np.ndarray]


class Mlp:
    """Feed-forward net: tanh hidden layers, linear output."""

    name: str
    sizes: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __init__(self, name: str, sizes: list[int], rng: np.random.Generator | None):
        """Initialize weights.

        Args:
            name: Prefix for parameter names
            sizes: Layer widths, input first, output last
            rng: Generator for Glorot init; None gives all-zero weights
        """
        if len(sizes) < 2:
            raise ShapeError(f"{name}: an MLP needs at least input and output sizes")
        self.name = name
        self.sizes = list(sizes)
        self.weights = [glorot(rng, a, b) for a, b in zip(sizes[:-1], sizes[1:])]
        self.biases = [np.zeros(b) for b in sizes[1:]]

    def parameters(self) -> dict[str, np.ndarray]:
        params = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            params[f"{self.name}.w{i}"] = w
            params[f"{self.name}.b{i}"] = b
        return params

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, MlpCache]:
        if x.shape[-1] != self.sizes[0]:
            raise ShapeError(f"{self.name}: input width {x.shape[-1]}, expected {self.sizes[0]}")
        inputs, activations = [], []
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(x)
            x = x @ w + b
            if i < last:
                x = np.tanh(x)
            activations.append(x)
        return x, MlpCache(inputs=inputs, activations=activations)

    def backward(self, cache: MlpCache, dy: np.ndarray, grads: Grads | None) -> np.ndarray:
        """Reverse pass; returns the gradient w.r.t. the input."""
        last = len(self.weights) - 1
        for i in range(last, -1, -1):
            if i < last:
                a = cache.activations[i]
                dy = dy * (1.0 - a * a)
            _accumulate(grads, f"{self.name}.w{i}", cache.inputs[i].T @ dy)
            _accumulate(grads, f"{self.name}.b{i}", dy.sum(axis=0))
            dy = dy @ self.weights[i].T
        return dy


class Adam:
    """Adam with global-norm gradient clipping, updating arrays in place."""

    params: dict[str, np.ndarray]
    learning_rate: float
    clip_norm: float
    steps: int

    def __init__(
        self,
        params: dict[str, np.ndarray],
        learning_rate: float = 1e-3,
        clip_norm: float = 1.0,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = params
        self.learning_rate = learning_rate
        self.clip_norm = clip_norm
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.steps = 0
        self._m = {k: np.zeros_like(v) for k, v in params.items()}
        self._v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: Grads) -> float:
        """Apply one update; returns the pre-clipping gradient norm."""
        norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
        scale = 1.0
        if self.clip_norm > 0 and norm > self.clip_norm:
            scale = self.clip_norm / norm
        self.steps += 1
        c1 = 1.0 - self.beta1**self.steps
        c2 = 1.0 - self.beta2**self.steps
        for name, grad in grads.items():
            g = grad * scale
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            self.params[name] -= self.learning_rate * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return norm


def weights_to_json(params: dict[str, np.ndarray]) -> dict:
    """Flat arrays by layer name with their shapes."""
    return {
        name: {"shape": list(value.shape), "data": value.ravel().tolist()}
        for name, value in sorted(params.items())
    }


def load_weights(params: dict[str, np.ndarray], document: dict) -> None:
    """Copy weights from weights_to_json output into existing arrays.

    Raises:
        ShapeError: If names or shapes disagree
    """
    if set(document) != set(params):
        missing = sorted(set(params) ^ set(document))
        raise ShapeError(f"checkpoint weights do not match the architecture: {missing}")
    for name, value in params.items():
        entry = document[name]
        data = np.asarray(entry["data"], dtype=np.float64)
        if list(value.shape) != list(entry["shape"]) or data.size != value.size:
            raise ShapeError(f"{name}: checkpoint shape {entry['shape']}, model {list(value.shape)}")
        value[...] = data.reshape(value.shape)
