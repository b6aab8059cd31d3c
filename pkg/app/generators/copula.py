"""
Gaussian copula over mixed numeric and categorical columns
Numerics keep their empirical marginals; categoricals map to frequency
intervals of [0, 1]. Dependence lives in a normal-score correlation matrix.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List

import numpy as np
from scipy.stats import norm, rankdata

from app.errors import ConfigError, EmptyDataError

logger = logging.getLogger(__name__)

EIGEN_FLOOR = 1e-10
UNIFORM_MARGIN = 1e-12


@dataclass
class CopulaState:
    """
    Fitted copula

    ``columns`` fixes the column order of sampled matrices; discrete
    columns are listed in ``levels`` and come out as level indices.
    """
    columns: List[str]
    sorted_values: Dict[str, np.ndarray] = field(default_factory=dict)
    levels: Dict[str, List[Any]] = field(default_factory=dict)
    frequencies: Dict[str, np.ndarray] = field(default_factory=dict)
    correlation: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    def is_discrete(self, column: str) -> bool:
        return column in self.levels

    def interval_bounds(self, column: str) -> np.ndarray:
        """Upper ends of the level intervals, last one forced to 1"""
        upper = np.cumsum(self.frequencies[column])
        upper[-1] = 1.0
        return upper

    def to_dict(self) -> Dict:
        def hexed(values):
            return [float.hex(float(v)) for v in np.ravel(values)]

        return {
            "columns": self.columns,
            "sorted_values": {k: hexed(v) for k, v in self.sorted_values.items()},
            "levels": self.levels,
            "frequencies": {k: hexed(v) for k, v in self.frequencies.items()},
            "correlation": hexed(self.correlation),
        }

    @classmethod
    def from_dict(cls, data: Dict) -> 'CopulaState':
        def unhexed(values):
            return np.array([float.fromhex(v) for v in values], dtype=np.float64)

        size = len(data["columns"])
        return cls(
            columns=list(data["columns"]),
            sorted_values={k: unhexed(v) for k, v in data["sorted_values"].items()},
            levels={k: list(v) for k, v in data["levels"].items()},
            frequencies={k: unhexed(v) for k, v in data["frequencies"].items()},
            correlation=unhexed(data["correlation"]).reshape(size, size),
        )


def nearest_psd_correlation(matrix: np.ndarray) -> np.ndarray:
    """Clip eigenvalues at 1e-10 and rescale back to a unit diagonal"""
    matrix = 0.5 * (matrix + matrix.T)
    eigenvalues, eigenvectors = np.linalg.eigh(matrix)
    repaired = (eigenvectors * np.maximum(eigenvalues, EIGEN_FLOOR)) @ eigenvectors.T
    scale = np.sqrt(np.diag(repaired))
    repaired = repaired / np.outer(scale, scale)
    repaired = 0.5 * (repaired + repaired.T)
    np.fill_diagonal(repaired, 1.0)
    return repaired


def copula_fit(columns: Dict[str, np.ndarray], levels: Dict[str, List[Any]], seed: int) -> CopulaState:
    """
    Fit marginals and the latent correlation

    Args:
        columns: Column name -> values, in the order samples should use
        levels: Level lists of the discrete columns (others are numeric)
        seed: Seed of the within-interval jitter for discrete columns

    Returns:
        CopulaState with a symmetric, unit-diagonal, PSD correlation
    """
    names = list(columns)
    if not names:
        raise ConfigError("Copula needs at least one column")
    rows = len(next(iter(columns.values())))
    if rows == 0:
        raise EmptyDataError("Cannot fit a copula on zero rows")
    rng = np.random.default_rng(seed)
    state = CopulaState(columns=names)
    scores = np.empty((rows, len(names)))

    for j, name in enumerate(names):
        values = np.asarray(columns[name])
        if name in levels:
            level_list = list(levels[name])
            codes = np.array([level_list.index(v) for v in values.tolist()])
            freq = np.bincount(codes, minlength=len(level_list)) / rows
            state.levels[name] = level_list
            state.frequencies[name] = freq
            lower = np.concatenate([[0.0], np.cumsum(freq)[:-1]])
            uniform = lower[codes] + freq[codes] * rng.random(rows)
        else:
            values = values.astype(np.float64)
            state.sorted_values[name] = np.sort(values)
            uniform = (rankdata(values) - 0.5) / rows
        scores[:, j] = norm.ppf(np.clip(uniform, UNIFORM_MARGIN, 1.0 - UNIFORM_MARGIN))

    if len(names) == 1 or rows < 2:
        correlation = np.eye(len(names))
    else:
        with np.errstate(invalid="ignore", divide="ignore"):
            correlation = np.atleast_2d(np.corrcoef(scores, rowvar=False))
        correlation = np.nan_to_num(correlation, nan=0.0)
        np.fill_diagonal(correlation, 1.0)
    state.correlation = nearest_psd_correlation(correlation)
    logger.debug("Copula fitted on %d rows x %d columns", rows, len(names))
    return state


def _factor(correlation: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(correlation)
    except np.linalg.LinAlgError:
        eigenvalues, eigenvectors = np.linalg.eigh(correlation)
        return eigenvectors * np.sqrt(np.maximum(eigenvalues, 0.0))


def copula_sample(state: CopulaState, n: int, seed: int) -> np.ndarray:
    """
    Draw n rows in marginal space

    Returns:
        n x C matrix in ``state.columns`` order; numerics by linear
        interpolation of the sorted values, discrete columns as level indices
    """
    if n < 0:
        raise ConfigError("Sample size must be non-negative")
    rng = np.random.default_rng(seed)
    size = len(state.columns)
    latent = rng.standard_normal((n, size)) @ _factor(state.correlation).T
    uniform = norm.cdf(latent)
    out = np.empty((n, size))
    for j, name in enumerate(state.columns):
        if state.is_discrete(name):
            index = np.searchsorted(state.interval_bounds(name), uniform[:, j], side="right")
            out[:, j] = np.minimum(index, len(state.levels[name]) - 1)
        else:
            values = state.sorted_values[name]
            out[:, j] = np.interp(uniform[:, j] * (len(values) - 1), np.arange(len(values)), values)
    return out
