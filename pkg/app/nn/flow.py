"""
Rational-quadratic spline flow over 2-D coordinates
Coupling layers alternate which coordinate is transformed; the other one
feeds a small conditioner network that emits the spline parameters.
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np

from app.errors import ConfigError, DataError, DegenerateDataError, TooFewSamplesError
from app.nn import diffnet as dn
from app.nn.diffnet import DenseNet, ParamStore, Tensor, TrainConfig

logger = logging.getLogger(__name__)

MIN_BIN_WIDTH = 1e-3
MIN_BIN_HEIGHT = 1e-3
MIN_DERIVATIVE = 1e-3
MIN_TRAINING_ROWS = 100
LOG_TWO_PI = math.log(2.0 * math.pi)

# softplus(u) == 1 - MIN_DERIVATIVE, so the knot derivative is exactly 1
IDENTITY_DERIVATIVE_PARAM = math.log(math.expm1(1.0 - MIN_DERIVATIVE))


class Direction(str, Enum):
    FORWARD = "forward"
    INVERSE = "inverse"


@dataclass
class RQSpline:
    """
    Unnormalized parameters of a batch of splines on [-T, T]

    Rows are independent splines (one per data row inside a coupling
    layer). A single spline is a 1-row batch.
    """
    widths: np.ndarray          # N x B
    heights: np.ndarray         # N x B
    derivatives: np.ndarray     # N x (B - 1)
    tail_bound: float = 4.0

    @property
    def n_bins(self) -> int:
        return self.widths.shape[-1]

    @classmethod
    def identity(cls, n_bins: int, tail_bound: float = 4.0, rows: int = 1) -> 'RQSpline':
        return cls(np.zeros((rows, n_bins)), np.zeros((rows, n_bins)),
                   np.full((rows, n_bins - 1), IDENTITY_DERIVATIVE_PARAM), tail_bound)


def _knots(widths, heights, derivatives, tail_bound: float):
    """Knot positions, bin sizes and knot derivatives as tensors"""
    n_bins = widths.shape[-1]
    rows = widths.shape[0]
    span = 2.0 * tail_bound
    bin_widths = (MIN_BIN_WIDTH + (1.0 - MIN_BIN_WIDTH * n_bins) * dn.softmax(widths, axis=-1)) * span
    bin_heights = (MIN_BIN_HEIGHT + (1.0 - MIN_BIN_HEIGHT * n_bins) * dn.softmax(heights, axis=-1)) * span
    zero = np.zeros((rows, 1))
    knots_x = dn.concat([zero, dn.cumsum(bin_widths, axis=-1)], axis=-1) - tail_bound
    knots_y = dn.concat([zero, dn.cumsum(bin_heights, axis=-1)], axis=-1) - tail_bound
    one = np.ones((rows, 1))
    knot_derivs = dn.concat([one, MIN_DERIVATIVE + dn.softplus(derivatives), one], axis=-1)
    return knots_x, knots_y, bin_widths, bin_heights, knot_derivs


def _bin_index(values: np.ndarray, knots: np.ndarray) -> np.ndarray:
    interior = knots[:, 1:-1]
    return np.sum(values[:, None] >= interior, axis=1)


def rq_spline_forward(x, widths, heights, derivatives, tail_bound: float) -> Tuple[Tensor, Tensor]:
    """
    Differentiable forward evaluation of a batch of splines

    Args:
        x: N values (tensor or array)
        widths, heights: N x B unnormalized parameters
        derivatives: N x (B - 1) unnormalized interior derivatives
        tail_bound: Half-width T of the spline interval

    Returns:
        (y, log |dy/dx|), each of length N
    """
    x = dn.as_tensor(x)
    inside = (x.data >= -tail_bound) & (x.data <= tail_bound)
    xc = dn.clip(x, -tail_bound, tail_bound)
    knots_x, knots_y, bin_widths, bin_heights, knot_derivs = _knots(widths, heights, derivatives, tail_bound)
    k = _bin_index(xc.data, knots_x.data)

    x_k = dn.take_rows(knots_x, k)
    y_k = dn.take_rows(knots_y, k)
    w_k = dn.take_rows(bin_widths, k)
    h_k = dn.take_rows(bin_heights, k)
    d_k = dn.take_rows(knot_derivs, k)
    d_k1 = dn.take_rows(knot_derivs, k + 1)

    slope = h_k / w_k
    theta = (xc - x_k) / w_k
    theta_one_minus = theta * (1.0 - theta)
    denominator = slope + (d_k1 + d_k - 2.0 * slope) * theta_one_minus
    y = y_k + h_k * (slope * dn.square(theta) + d_k * theta_one_minus) / denominator
    derivative_numerator = dn.square(slope) * (
        d_k1 * dn.square(theta) + 2.0 * slope * theta_one_minus + d_k * dn.square(1.0 - theta)
    )
    logabsdet = dn.log(derivative_numerator) - 2.0 * dn.log(denominator)

    return dn.where(inside, y, x), dn.where(inside, logabsdet, 0.0)


def rq_spline_inverse(y: np.ndarray, widths: np.ndarray, heights: np.ndarray, derivatives: np.ndarray,
                      tail_bound: float) -> Tuple[np.ndarray, np.ndarray]:
    """Inverse of rq_spline_forward by the per-bin quadratic; returns (x, log |dx/dy|)"""
    y = np.asarray(y, dtype=np.float64)
    inside = (y >= -tail_bound) & (y <= tail_bound)
    yc = np.clip(y, -tail_bound, tail_bound)
    knots_x, knots_y, bin_widths, bin_heights, knot_derivs = (
        t.data for t in _knots(dn.as_tensor(widths), dn.as_tensor(heights), dn.as_tensor(derivatives), tail_bound)
    )
    k = _bin_index(yc, knots_y)
    rows = np.arange(len(y))

    x_k, y_k = knots_x[rows, k], knots_y[rows, k]
    w_k, h_k = bin_widths[rows, k], bin_heights[rows, k]
    d_k, d_k1 = knot_derivs[rows, k], knot_derivs[rows, k + 1]

    slope = h_k / w_k
    shift = yc - y_k
    curvature = d_k1 + d_k - 2.0 * slope
    a = h_k * (slope - d_k) + shift * curvature
    b = h_k * d_k - shift * curvature
    c = -slope * shift
    discriminant = np.maximum(b * b - 4.0 * a * c, 0.0)
    theta = (2.0 * c) / (-b - np.sqrt(discriminant))
    x = theta * w_k + x_k

    theta_one_minus = theta * (1.0 - theta)
    denominator = slope + curvature * theta_one_minus
    derivative_numerator = slope ** 2 * (d_k1 * theta ** 2 + 2.0 * slope * theta_one_minus + d_k * (1.0 - theta) ** 2)
    logabsdet = -(np.log(derivative_numerator) - 2.0 * np.log(denominator))

    return np.where(inside, x, y), np.where(inside, logabsdet, 0.0)


def rq_spline_apply(x, spline: RQSpline, direction: Direction = Direction.FORWARD) -> Tuple[np.ndarray, np.ndarray]:
    """
    Evaluate a spline batch in either direction

    Scalars broadcast against a 1-row spline. Outside [-T, T] the map is the
    identity with log-derivative 0.
    """
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    rows = len(x)
    widths, heights, derivatives = (np.broadcast_to(p, (rows, p.shape[-1])) if p.shape[0] == 1 else p
                                    for p in (np.atleast_2d(spline.widths), np.atleast_2d(spline.heights),
                                              np.atleast_2d(spline.derivatives)))
    if Direction(direction) is Direction.FORWARD:
        y, logabsdet = rq_spline_forward(x, widths, heights, derivatives, spline.tail_bound)
        return y.data, logabsdet.data
    return rq_spline_inverse(x, widths, heights, derivatives, spline.tail_bound)


@dataclass
class FlowArch:
    """K coupling layers, B bins, tail bound T and conditioner hidden widths"""
    n_layers: int = 8
    n_bins: int = 8
    tail_bound: float = 4.0
    hidden: List[int] = field(default_factory=lambda: [64, 64])

    def __post_init__(self):
        if self.n_layers < 1:
            raise ConfigError("Flow needs at least one coupling layer")
        if self.n_bins < 2:
            raise ConfigError("Spline needs at least two bins")
        if not self.tail_bound > 0:
            raise ConfigError("tail_bound must be positive")
        if MIN_BIN_WIDTH * self.n_bins >= 1.0:
            raise ConfigError("Too many bins for the minimum bin width")

    def to_dict(self) -> Dict:
        return {"n_layers": self.n_layers, "n_bins": self.n_bins,
                "tail_bound": self.tail_bound, "hidden": list(self.hidden)}

    @classmethod
    def from_dict(cls, data: Dict) -> 'FlowArch':
        return cls(**data)


class CouplingLayer:
    """
    Transforms coordinate ``target`` with a spline conditioned on the other one

    ``to_latent`` (data towards the base) evaluates the spline forward;
    ``to_data`` solves it backwards.
    """

    def __init__(self, target: int, conditioner: DenseNet, arch: FlowArch):
        self.target = target
        self.conditioner = conditioner
        self.arch = arch

    @property
    def source(self) -> int:
        return 1 - self.target

    def _spline_params(self, condition):
        out = self.conditioner.forward(condition)
        b = self.arch.n_bins
        return out[:, :b], out[:, b:2 * b], out[:, 2 * b:]

    def _assemble(self, x, transformed):
        transformed = dn.reshape(transformed, (transformed.shape[0], 1))
        kept = x[:, self.source:self.source + 1]
        parts = [transformed, kept] if self.target == 0 else [kept, transformed]
        return dn.concat(parts, axis=1)

    def to_latent(self, x: Tensor) -> Tuple[Tensor, Tensor]:
        widths, heights, derivs = self._spline_params(x[:, self.source:self.source + 1])
        y, logabsdet = rq_spline_forward(x[:, self.target], widths, heights, derivs, self.arch.tail_bound)
        return self._assemble(x, y), logabsdet

    def to_data(self, z: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        widths, heights, derivs = (p.data for p in self._spline_params(z[:, self.source:self.source + 1]))
        x_target, logabsdet = rq_spline_inverse(z[:, self.target], widths, heights, derivs, self.arch.tail_bound)
        x = z.copy()
        x[:, self.target] = x_target
        return x, logabsdet


class FlowModel:
    """Stack of coupling layers over standardized (lon, lat) with a standard-normal base"""

    def __init__(self, arch: FlowArch, mean: np.ndarray, std: np.ndarray,
                 store: Optional[ParamStore] = None, seed: int = 0):
        self.arch = arch
        self.mean = np.asarray(mean, dtype=np.float64).reshape(2)
        self.std = np.asarray(std, dtype=np.float64).reshape(2)
        if not np.all(self.std > 0):
            raise DegenerateDataError("Coordinate standard deviation must be positive")
        initialize = store is None
        self.store = store if store is not None else ParamStore()
        rng = np.random.default_rng(seed)
        widths = [1] + list(arch.hidden) + [3 * arch.n_bins - 1]
        self.layers: List[CouplingLayer] = []
        for i in range(arch.n_layers):
            net = DenseNet(widths, self.store, f"flow.layer{i}", "relu", "identity", rng=rng, initialize=initialize)
            if initialize:
                self._identity_output(net)
            self.layers.append(CouplingLayer(i % 2, net, arch))
        self.history: List[float] = []

    def _identity_output(self, net: DenseNet):
        last = net.n_layers - 1
        self.store.set(net.weight_name(last), np.zeros_like(self.store.params[net.weight_name(last)]))
        bias = np.zeros(3 * self.arch.n_bins - 1)
        bias[2 * self.arch.n_bins:] = IDENTITY_DERIVATIVE_PARAM
        self.store.set(net.bias_name(last), bias)

    @property
    def log_std_sum(self) -> float:
        return float(np.sum(np.log(self.std)))

    def latent_tensor(self, coords) -> Tuple[Tensor, Tensor]:
        """Differentiable data->latent map: (latent, total logdet)"""
        x = dn.as_tensor((np.asarray(coords, dtype=np.float64) - self.mean) / self.std)
        logdet = dn.as_tensor(np.full(x.shape[0], -self.log_std_sum))
        for layer in self.layers:
            x, layer_logdet = layer.to_latent(x)
            logdet = logdet + layer_logdet
        return x, logdet

    def to_dict(self) -> Dict:
        return {
            "kind": "flow",
            "arch": self.arch.to_dict(),
            "mean": [float.hex(float(v)) for v in self.mean],
            "std": [float.hex(float(v)) for v in self.std],
            "history": [float.hex(float(v)) for v in self.history],
        }

    @classmethod
    def from_dict(cls, metadata: Dict, store: ParamStore) -> 'FlowModel':
        model = cls(FlowArch.from_dict(metadata["arch"]),
                    [float.fromhex(v) for v in metadata["mean"]],
                    [float.fromhex(v) for v in metadata["std"]], store=store)
        model.history = [float.fromhex(v) for v in metadata.get("history", [])]
        return model


def _check_coords(coords) -> np.ndarray:
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise DataError(f"Expected an N x 2 coordinate matrix, got shape {coords.shape}")
    if not np.all(np.isfinite(coords)):
        raise DataError("Coordinates must be finite")
    return coords


def coords_to_latent(model: FlowModel, coords: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Map coordinates to the base space

    Returns:
        (latent N x 2, logdet N) where logdet = log |det d latent / d coords|

    Raises:
        DataError: Non-finite or mis-shaped input
    """
    latent, logdet = model.latent_tensor(_check_coords(coords))
    return latent.data, logdet.data


def latent_to_coords_logdet(model: FlowModel, latent: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Map base-space points back to coordinates

    Returns:
        (coords N x 2, logdet N) where logdet = log |det d coords / d latent|,
        the negative of the coords_to_latent logdet at the image
    """
    x = _check_coords(latent).copy()
    logdet = np.full(x.shape[0], model.log_std_sum)
    for layer in reversed(model.layers):
        x, layer_logdet = layer.to_data(x)
        logdet = logdet + layer_logdet
    return x * model.std + model.mean, logdet


def latent_to_coords(model: FlowModel, latent: np.ndarray) -> np.ndarray:
    """Exact inverse of coords_to_latent, de-standardization included"""
    return latent_to_coords_logdet(model, latent)[0]


def flow_log_likelihood(model: FlowModel, coords: np.ndarray) -> np.ndarray:
    """Per-row log density in data space under the change of variables"""
    latent, logdet = coords_to_latent(model, coords)
    return -LOG_TWO_PI - 0.5 * np.sum(latent * latent, axis=1) + logdet


def mean_nll(model: FlowModel, coords: np.ndarray) -> Tensor:
    """Differentiable mean negative log-likelihood, the training loss"""
    latent, logdet = model.latent_tensor(coords)
    nll = 0.5 * dn.reduce_sum(dn.square(latent), axis=1) + LOG_TWO_PI - logdet
    return dn.reduce_mean(nll)


def train_flow(coords: np.ndarray, config: TrainConfig, arch: Optional[FlowArch] = None) -> FlowModel:
    """
    Fit a flow to coordinates by maximum likelihood

    Args:
        coords: N x 2 (lon, lat) training coordinates
        config: Optimizer settings; the seed also fixes initialization
        arch: Architecture, defaults to FlowArch()

    Returns:
        Trained FlowModel; per-epoch mean NLL in ``model.history``

    Raises:
        TooFewSamplesError: Fewer than 100 rows
        NonFiniteLossError: Training diverged
    """
    coords = _check_coords(coords)
    if coords.shape[0] < MIN_TRAINING_ROWS:
        raise TooFewSamplesError(f"Flow training needs at least {MIN_TRAINING_ROWS} rows, got {coords.shape[0]}")
    arch = arch or FlowArch()
    model = FlowModel(arch, coords.mean(axis=0), coords.std(axis=0), seed=config.seed)

    def objective(batch: np.ndarray, epoch: int, batch_index: int) -> float:
        loss = mean_nll(model, batch)
        dn.backpropagate(loss, 1.0)
        return float(loss.data)

    logger.info("Training flow: %d rows, %d layers, %d bins", coords.shape[0], arch.n_layers, arch.n_bins)
    model.history = dn.train_loop(objective, coords, config, model.store)
    return model


def flow_sample(model: FlowModel, n: int, seed: int) -> np.ndarray:
    """Draw n coordinates by pushing standard-normal latents through the inverse map"""
    if n < 0:
        raise ConfigError("Sample size must be non-negative")
    latent = np.random.default_rng(seed).standard_normal((n, 2))
    if n == 0:
        return np.empty((0, 2))
    return latent_to_coords(model, latent)


def save_flow(model: FlowModel, path: str):
    dn.save_checkpoint(model.store, model.to_dict(), path)


def load_flow(path: str) -> FlowModel:
    store, metadata = dn.load_checkpoint(path)
    if metadata.get("kind") != "flow":
        raise ConfigError(f"{path} is not a flow checkpoint")
    return FlowModel.from_dict(metadata, store)
