"""
Variational autoencoder over encoded feature matrices
Reconstruction is split into a geographic term (the two coordinate
columns) and a term for every other column, weighted separately.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from app.core.dataset import EncodedMatrix, LayoutEntry
from app.errors import ConfigError, NonFiniteLossError, ShapeError, TooFewSamplesError
from app.nn import diffnet as dn
from app.nn.diffnet import DenseNet, ParamStore, TrainConfig

logger = logging.getLogger(__name__)

MIN_TRAINING_ROWS = 100


@dataclass(frozen=True)
class LossWeights:
    """Weights of the three loss terms; geography outweighs the rest, which outweighs KL"""
    alpha_geo: float = 10.0
    alpha_r: float = 1.0
    alpha_kl: float = 0.1

    def __post_init__(self):
        if not self.alpha_kl > 0:
            raise ConfigError("alpha_kl must be positive")
        if not (self.alpha_geo > self.alpha_r > self.alpha_kl):
            raise ConfigError(
                f"Loss weights must satisfy alpha_geo > alpha_r > alpha_kl, got "
                f"({self.alpha_geo}, {self.alpha_r}, {self.alpha_kl})"
            )


@dataclass(frozen=True)
class VaeLossBreakdown:
    l_geo: float
    l_r: float
    l_kl: float
    total: float


@dataclass
class VaeArch:
    """Latent size (None picks max(2, ceil(M / 4))) and hidden widths of both networks"""
    latent_dim: Optional[int] = None
    hidden: List[int] = field(default_factory=lambda: [128, 128])

    def resolve_latent_dim(self, width: int) -> int:
        k = self.latent_dim if self.latent_dim is not None else max(2, math.ceil(width / 4))
        if k < 1:
            raise ConfigError("latent_dim must be at least 1")
        if k >= width:
            raise ConfigError(f"latent_dim {k} must be smaller than the column count {width}")
        return k


class VaeModel:
    """Encoder (M -> 2k: mean and log-variance) and decoder (k -> M) sharing one ParamStore"""

    def __init__(self, layout: Sequence[LayoutEntry], geo_indices: Sequence[int], latent_dim: int,
                 hidden: Sequence[int], weights: LossWeights,
                 store: Optional[ParamStore] = None, seed: int = 0):
        self.layout = list(layout)
        self.width = len(self.layout)
        self.geo_indices = [int(i) for i in geo_indices]
        if len(self.geo_indices) != 2:
            raise ConfigError("VAE needs exactly two geographic columns")
        if not 1 <= latent_dim < self.width:
            raise ConfigError(f"latent_dim {latent_dim} must be in [1, {self.width})")
        self.latent_dim = latent_dim
        self.hidden = [int(h) for h in hidden]
        self.weights = weights
        initialize = store is None
        self.store = store if store is not None else ParamStore()
        rng = np.random.default_rng(seed)
        self.encoder = DenseNet([self.width] + self.hidden + [2 * latent_dim], self.store, "vae.encoder",
                                rng=rng, initialize=initialize)
        self.decoder = DenseNet([latent_dim] + self.hidden + [self.width], self.store, "vae.decoder",
                                rng=rng, initialize=initialize)
        self.geo_mask = np.zeros(self.width)
        self.geo_mask[self.geo_indices] = 1.0
        self.history: List[float] = []
        self.term_history: List[VaeLossBreakdown] = []

    def decode_latent(self, latent: np.ndarray) -> np.ndarray:
        return self.decoder.forward(latent).data

    def to_dict(self) -> Dict:
        return {
            "kind": "vae",
            "layout": [[e.column, e.role, e.level] for e in self.layout],
            "geo_indices": self.geo_indices,
            "latent_dim": self.latent_dim,
            "hidden": self.hidden,
            "weights": [self.weights.alpha_geo, self.weights.alpha_r, self.weights.alpha_kl],
            "history": [float.hex(float(v)) for v in self.history],
        }

    @classmethod
    def from_dict(cls, metadata: Dict, store: ParamStore) -> 'VaeModel':
        model = cls([LayoutEntry(*entry) for entry in metadata["layout"]], metadata["geo_indices"],
                    metadata["latent_dim"], metadata["hidden"], LossWeights(*metadata["weights"]), store=store)
        model.history = [float.fromhex(v) for v in metadata.get("history", [])]
        return model


def vae_loss(model: VaeModel, batch: np.ndarray, seed: Union[int, Sequence[int]],
             accumulate_gradients: bool = True) -> VaeLossBreakdown:
    """
    Weighted three-term loss of one batch

    Encodes, reparameterizes with seeded standard-normal noise and decodes;
    gradients of the total are added to ``model.store`` unless disabled.

    Raises:
        ShapeError: Batch width differs from the model layout
        NonFiniteLossError: NaN/inf activations
    """
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != model.width:
        raise ShapeError(f"Batch of shape {batch.shape} does not match {model.width} columns")
    k = model.latent_dim
    encoded = model.encoder.forward(batch)
    mu, log_var = encoded[:, :k], encoded[:, k:]
    noise = np.random.default_rng(seed).standard_normal((batch.shape[0], k))
    latent = mu + dn.exp(0.5 * log_var) * noise
    reconstruction = model.decoder.forward(latent)
    if not (np.all(np.isfinite(encoded.data)) and np.all(np.isfinite(reconstruction.data))):
        raise NonFiniteLossError("Non-finite activations in the VAE")

    squared = dn.square(reconstruction - batch)
    l_geo = dn.reduce_mean(dn.reduce_sum(squared * model.geo_mask, axis=1))
    l_r = dn.reduce_mean(dn.reduce_sum(squared * (1.0 - model.geo_mask), axis=1))
    l_kl = dn.reduce_mean(0.5 * dn.reduce_sum(dn.square(mu) + dn.exp(log_var) - log_var - 1.0, axis=1))
    w = model.weights
    total = w.alpha_geo * l_geo + w.alpha_r * l_r + w.alpha_kl * l_kl
    if accumulate_gradients:
        dn.backpropagate(total, 1.0)

    geo, rest, kl = float(l_geo.data), float(l_r.data), float(l_kl.data)
    return VaeLossBreakdown(geo, rest, kl, w.alpha_geo * geo + w.alpha_r * rest + w.alpha_kl * kl)


def train_vae(data: EncodedMatrix, config: TrainConfig, arch: Optional[VaeArch] = None,
              weights: Optional[LossWeights] = None) -> VaeModel:
    """
    Train a VAE on an encoded matrix

    Args:
        data: Training matrix; its coordinate columns drive the geographic term
        config: Optimizer settings (seed fixes initialization, shuffling and noise)
        arch: Latent size and hidden widths
        weights: Loss weights

    Returns:
        Trained VaeModel with per-epoch totals in ``history`` and per-epoch
        term means in ``term_history``

    Raises:
        ConfigError: latent_dim >= column count
        TooFewSamplesError: Fewer than 100 rows
    """
    arch = arch or VaeArch()
    weights = weights or LossWeights()
    values = np.asarray(data.values, dtype=np.float64)
    k = arch.resolve_latent_dim(data.width)
    if values.shape[0] < MIN_TRAINING_ROWS:
        raise TooFewSamplesError(f"VAE training needs at least {MIN_TRAINING_ROWS} rows, got {values.shape[0]}")
    model = VaeModel(data.layout, data.coordinate_indices(), k, arch.hidden, weights, seed=config.seed)

    epoch_terms: Dict[int, List] = {}

    def objective(batch: np.ndarray, epoch: int, batch_index: int) -> float:
        breakdown = vae_loss(model, batch, [config.seed, epoch, batch_index])
        epoch_terms.setdefault(epoch, []).append((len(batch), breakdown))
        return breakdown.total

    logger.info("Training VAE: %d rows, %d columns, latent %d", values.shape[0], data.width, k)
    model.history = dn.train_loop(objective, values, config, model.store)
    for epoch in sorted(epoch_terms):
        rows = sum(n for n, _ in epoch_terms[epoch])
        means = [sum(n * getattr(b, name) for n, b in epoch_terms[epoch]) / rows
                 for name in ("l_geo", "l_r", "l_kl", "total")]
        model.term_history.append(VaeLossBreakdown(*means))
    return model


def vae_sample(model: VaeModel, n: int, seed: int) -> np.ndarray:
    """Decode n seeded standard-normal latents; rows are in encoded space"""
    if n < 0:
        raise ConfigError("Sample size must be non-negative")
    if n == 0:
        return np.zeros((0, model.width))
    latent = np.random.default_rng(seed).standard_normal((n, model.latent_dim))
    return model.decode_latent(latent)


def save_vae(model: VaeModel, path: str):
    dn.save_checkpoint(model.store, model.to_dict(), path)


def load_vae(path: str) -> VaeModel:
    store, metadata = dn.load_checkpoint(path)
    if metadata.get("kind") != "vae":
        raise ConfigError(f"{path} is not a VAE checkpoint")
    return VaeModel.from_dict(metadata, store)
