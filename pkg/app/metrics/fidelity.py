"""
Fidelity metrics
Geographic (sliced Wasserstein), spatial autocorrelation (Moran) and
local grid-cell feature distances between a real and a synthetic table.
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Optional

import numpy as np
import pandas as pd
from scipy.spatial import cKDTree
from scipy.spatial.distance import pdist
from sklearn.decomposition import PCA
from sklearn.preprocessing import StandardScaler

from app.core.dataset import GeoTable, feature_matrix
from app.errors import ConfigError, DegenerateDataError, EvaluationError, NoNeighborsError, NoOverlapError

logger = logging.getLogger(__name__)

EXPLAINED_VARIANCE_TARGET = 0.95
CELL_EPSILON = 1e-9


# --- Wasserstein --------------------------------------------------------------

def wasserstein_1d(a, b, p: float = 2.0) -> float:
    """
    p-Wasserstein distance between two 1-D samples via their quantile functions

    Unequal sizes are compared on a common grid of max(|a|, |b|) quantile
    levels (k + 0.5) / L.
    """
    a = np.sort(np.asarray(a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(b, dtype=np.float64).ravel())
    if a.size == 0 or b.size == 0:
        raise EvaluationError("Wasserstein distance needs non-empty samples")
    if a.size != b.size:
        levels = (np.arange(max(a.size, b.size)) + 0.5) / max(a.size, b.size)
        a = a[np.ceil(a.size * levels).astype(np.int64) - 1]
        b = b[np.ceil(b.size * levels).astype(np.int64) - 1]
    return float(np.mean(np.abs(a - b) ** p) ** (1.0 / p))


def projection_directions(n_proj: int, seed: int) -> np.ndarray:
    """
    n_proj unit vectors: equispaced angles on [0, pi) under one seeded rotation

    Each direction is marginally uniform on the half circle, which covers
    every line through the origin exactly once.
    """
    if n_proj < 1:
        raise ConfigError("n_proj must be at least 1")
    offset = np.random.default_rng(seed).uniform(0.0, math.pi / n_proj)
    angles = offset + np.arange(n_proj) * (math.pi / n_proj)
    return np.column_stack([np.cos(angles), np.sin(angles)])


def sliced_wasserstein(a: np.ndarray, b: np.ndarray, n_proj: int = 1000, p: float = 2.0, seed: int = 0) -> float:
    """Mean 1-D Wasserstein distance over projections of two N x 2 point sets (raw degrees)"""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 2)
    if len(a) == 0 or len(b) == 0:
        raise EvaluationError("Sliced Wasserstein distance needs non-empty point sets")
    directions = projection_directions(n_proj, seed)
    projected_a = a @ directions.T
    projected_b = b @ directions.T
    distances = [wasserstein_1d(projected_a[:, j], projected_b[:, j], p) for j in range(n_proj)]
    return float(np.mean(distances))


def geo_distance(real: GeoTable, synth: GeoTable, n_proj: int = 1000, p: float = 2.0, seed: int = 0) -> float:
    return sliced_wasserstein(real.coords(), synth.coords(), n_proj, p, seed)


# --- PCA basis ----------------------------------------------------------------

@dataclass
class PcaBasis:
    """Standardization plus the leading components of the real non-spatial features"""
    scaler: StandardScaler
    pca: PCA
    n_components: int
    names: List[str]

    @property
    def components(self) -> np.ndarray:
        return self.pca.components_[:self.n_components]

    @property
    def eigenvalues(self) -> np.ndarray:
        return self.pca.explained_variance_[:self.n_components]

    @property
    def weights(self) -> np.ndarray:
        """Eigenvalues normalized to sum to 1"""
        return self.eigenvalues / np.sum(self.eigenvalues)

    def project(self, table: GeoTable) -> np.ndarray:
        matrix, names = feature_matrix(table)
        if names != self.names:
            raise EvaluationError("Table features do not match the PCA basis")
        return self.pca.transform(self.scaler.transform(matrix))[:, :self.n_components]


def pca_fit(real_table: GeoTable) -> PcaBasis:
    """
    Fit the basis on real data: one-hot + z-score features, keep the fewest
    components explaining at least 95% of the variance

    Raises:
        EvaluationError: Fewer than 2 rows or no non-spatial column
        DegenerateDataError: Every feature is constant
    """
    matrix, names = feature_matrix(real_table)
    if matrix.shape[0] < 2 or matrix.shape[1] == 0:
        raise EvaluationError("PCA needs at least 2 rows and 1 non-spatial column")
    if not np.any(np.ptp(matrix, axis=0) > 0):
        raise DegenerateDataError("All non-spatial features are constant")
    scaler = StandardScaler().fit(matrix)
    pca = PCA(svd_solver="full").fit(scaler.transform(matrix))
    ratios = pca.explained_variance_ / np.sum(pca.explained_variance_)
    n_components = int(np.searchsorted(np.cumsum(ratios), EXPLAINED_VARIANCE_TARGET - 1e-12) + 1)
    n_components = min(n_components, len(ratios))
    logger.debug("PCA keeps %d of %d components", n_components, len(ratios))
    return PcaBasis(scaler, pca, n_components, names)


# --- Moran ----------------------------------------------------------------------

@dataclass
class MoranConfig:
    """Neighbor threshold m (None: derive from the real coordinates) and how to derive it"""
    threshold: Optional[float] = None
    percentile: float = 0.01
    pair_cap: int = 2_000_000
    pair_subsample: int = 1_000_000
    seed: int = 0

    def __post_init__(self):
        if self.threshold is not None and not self.threshold > 0:
            raise ConfigError("Moran threshold must be positive")
        if not 0.0 <= self.percentile <= 1.0:
            raise ConfigError("percentile must lie in [0, 1]")


def pairwise_percentile(coords: np.ndarray, q: float = 0.01, cap: int = 2_000_000, seed: int = 0,
                        subsample: Optional[int] = None) -> float:
    """
    q-quantile of pairwise Euclidean distances

    Exact when N(N-1)/2 <= cap, otherwise estimated from ``subsample``
    (default: cap) seeded random pairs of distinct rows.
    """
    coords = np.asarray(coords, dtype=np.float64)
    n = len(coords)
    if n < 2:
        raise EvaluationError("Pairwise distances need at least 2 points")
    if n * (n - 1) // 2 <= cap:
        distances = pdist(coords)
    else:
        rng = np.random.default_rng(seed)
        count = subsample if subsample is not None else cap
        first = rng.integers(n, size=count)
        second = rng.integers(n - 1, size=count)
        second = second + (second >= first)
        distances = np.linalg.norm(coords[first] - coords[second], axis=1)
    return float(np.quantile(distances, q))


def neighbor_pairs(coords: np.ndarray, m: float) -> np.ndarray:
    """Index pairs (i < j) at distance strictly below m"""
    coords = np.asarray(coords, dtype=np.float64)
    pairs = cKDTree(coords).query_pairs(m, output_type="ndarray")
    if len(pairs) == 0:
        return pairs.reshape(0, 2)
    distances = np.linalg.norm(coords[pairs[:, 0]] - coords[pairs[:, 1]], axis=1)
    return pairs[distances < m]


def moran_index(values: np.ndarray, coords: np.ndarray, m: float, pairs: Optional[np.ndarray] = None) -> float:
    """
    Global Moran's I with binary weights w_ij = 1 for i != j and |x_i - x_j| < m

    Distinct rows at the same location are neighbors.

    Raises:
        EvaluationError: Fewer than 3 values
        DegenerateDataError: Constant values
        NoNeighborsError: No pair closer than m
    """
    values = np.asarray(values, dtype=np.float64)
    n = len(values)
    if n < 3:
        raise EvaluationError("Moran's I needs at least 3 observations")
    deviations = values - values.mean()
    denominator = float(np.sum(deviations * deviations))
    if denominator == 0.0:
        raise DegenerateDataError("Moran's I of a constant variable is undefined")
    if pairs is None:
        pairs = neighbor_pairs(coords, m)
    if len(pairs) == 0:
        raise NoNeighborsError(f"No pair of points closer than m = {m}")
    # Each unordered pair contributes w_ij and w_ji
    weight_sum = 2.0 * len(pairs)
    cross = 2.0 * float(np.sum(deviations[pairs[:, 0]] * deviations[pairs[:, 1]]))
    return n / weight_sum * cross / denominator


def _standardize_like(coords: np.ndarray, reference: np.ndarray) -> np.ndarray:
    scaler = StandardScaler().fit(reference)
    return scaler.transform(coords)


def aggregate_moran(projections: np.ndarray, coords: np.ndarray, weights: np.ndarray, m: float) -> float:
    """Eigenvalue-weighted sum of per-component Moran indices"""
    pairs = neighbor_pairs(coords, m)
    return float(sum(w * moran_index(projections[:, j], coords, m, pairs) for j, w in enumerate(weights)))


def spatial_autocorr_distance(real: GeoTable, synth: GeoTable, basis: PcaBasis,
                              cfg: Optional[MoranConfig] = None) -> float:
    """
    |I - I~| between real and synthetic weighted Moran aggregates

    Coordinates of both tables are standardized with the real mean and
    std; the threshold m comes from the real coordinates only.
    """
    cfg = cfg or MoranConfig()
    if real.N == 0 or synth.N == 0:
        raise EvaluationError("Spatial autocorrelation needs non-empty tables")
    real_coords = real.coords()
    real_std = _standardize_like(real_coords, real_coords)
    synth_std = _standardize_like(synth.coords(), real_coords)
    m = cfg.threshold
    if m is None:
        m = pairwise_percentile(real_std, cfg.percentile, cfg.pair_cap, cfg.seed, cfg.pair_subsample)
    if not m > 0:
        raise NoNeighborsError("Neighbor threshold is zero (duplicate real coordinates)")
    real_index = aggregate_moran(basis.project(real), real_std, basis.weights, m)
    synth_index = aggregate_moran(basis.project(synth), synth_std, basis.weights, m)
    logger.debug("Moran aggregate: real %.6f, synthetic %.6f (m=%.6g)", real_index, synth_index, m)
    return abs(real_index - synth_index)


# --- Grid cells -------------------------------------------------------------------

@dataclass(frozen=True)
class GridSpec:
    """Square cells of ``cell_size`` degrees anchored at integer multiples"""
    cell_size: float = 0.01

    def __post_init__(self):
        if not self.cell_size > 0:
            raise ConfigError("cell_size must be positive")

    def cells(self, coords: np.ndarray) -> np.ndarray:
        return np.floor(np.asarray(coords, dtype=np.float64) / self.cell_size + CELL_EPSILON).astype(np.int64)


def _cell_means(table: GeoTable, basis: PcaBasis, grid: GridSpec) -> pd.DataFrame:
    cells = grid.cells(table.coords())
    frame = pd.DataFrame(basis.project(table))
    frame["cell_x"], frame["cell_y"] = cells[:, 0], cells[:, 1]
    return frame.groupby(["cell_x", "cell_y"], sort=True).mean()


def local_feature_distance(real: GeoTable, synth: GeoTable, basis: PcaBasis,
                           grid: Optional[GridSpec] = None) -> float:
    """
    Mean over shared grid cells of the weighted squared gap between
    real and synthetic per-cell mean projections

    Raises:
        NoOverlapError: No cell holds both real and synthetic rows
    """
    grid = grid or GridSpec()
    if real.N == 0 or synth.N == 0:
        raise EvaluationError("Local feature distance needs non-empty tables")
    real_means = _cell_means(real, basis, grid)
    synth_means = _cell_means(synth, basis, grid)
    shared = real_means.index.intersection(synth_means.index)
    if len(shared) == 0:
        raise NoOverlapError("Real and synthetic tables share no grid cell")
    gaps = real_means.loc[shared].to_numpy() - synth_means.loc[shared].to_numpy()
    per_cell = (gaps * gaps) @ basis.weights
    return float(np.mean(per_cell))
