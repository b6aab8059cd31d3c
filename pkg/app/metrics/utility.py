"""
Utility metric: hedonic price regression, train on synthetic, test on real
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
from scipy.linalg import solve_triangular
from sklearn.metrics import r2_score

from app.core.dataset import GeoTable, feature_matrix
from app.core.geometry import RegionGeometry, assign_subregion
from app.errors import DataError, EvaluationError, SchemaError

logger = logging.getLogger(__name__)

RIDGE = 1e-8


@dataclass
class HedonicModel:
    """log(price) = intercept + features . coefficients + fixed_effects[subregion]"""
    price_column: str
    feature_names: List[str]
    intercept: float
    coefficients: np.ndarray
    fixed_effects: Dict[str, float] = field(default_factory=dict)
    include_coordinates: bool = True
    r2_train: float = float("nan")

    @property
    def mean_fixed_effect(self) -> float:
        return float(np.mean(list(self.fixed_effects.values()))) if self.fixed_effects else 0.0


def _design(table: GeoTable, price_column: str, include_coordinates: bool):
    matrix, names = feature_matrix(table, exclude=(price_column,), drop_first=True)
    if include_coordinates:
        matrix = np.hstack([table.coords(), matrix])
        names = [table.longitude_column, table.latitude_column] + names
    return matrix, names


def log_prices(table: GeoTable, price_column: str) -> np.ndarray:
    """
    Raises:
        SchemaError: Unknown or non-numeric price column
        DataError: A non-positive price
    """
    spec = table.spec(price_column)
    if not spec.is_numeric or spec.is_coordinate:
        raise SchemaError(f"Price column {price_column} must be numeric")
    prices = table.frame[price_column].to_numpy(dtype=np.float64)
    if np.any(prices <= 0):
        raise DataError(f"Price column {price_column} has non-positive values")
    return np.log(prices)


def _ridge_lstsq(design: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Least squares with RIDGE on the diagonal, solved by QR of the augmented system"""
    width = design.shape[1]
    augmented = np.vstack([design, np.sqrt(RIDGE) * np.eye(width)])
    rhs = np.concatenate([target, np.zeros(width)])
    q, r = np.linalg.qr(augmented)
    return solve_triangular(r, q.T @ rhs)


def hedonic_fit(table: GeoTable, geom: RegionGeometry, price_column: str,
                include_coordinates: bool = True) -> HedonicModel:
    """
    Fit log(price) on the non-price features plus subregion fixed effects

    The first subregion (in id order) is the reference level with effect 0.

    Raises:
        DataError: Non-positive prices, or no subregion holding 2 rows
        ConfigError: Geometry without subregions
    """
    target = log_prices(table, price_column)
    subregions = assign_subregion(table, geom)
    levels, counts = np.unique(subregions.astype(str), return_counts=True)
    if not np.any(counts >= 2):
        raise DataError("Hedonic regression needs a subregion with at least 2 rows")

    features, names = _design(table, price_column, include_coordinates)
    dummies = np.column_stack([subregions == level for level in levels[1:]]).astype(np.float64) \
        if len(levels) > 1 else np.zeros((table.N, 0))
    design = np.hstack([np.ones((table.N, 1)), features, dummies])
    if design.shape[0] < design.shape[1]:
        logger.warning("Hedonic design has %d rows for %d columns; relying on the ridge",
                       design.shape[0], design.shape[1])
    beta = _ridge_lstsq(design, target)

    width = features.shape[1]
    effects = {str(levels[0]): 0.0}
    effects.update({str(level): float(beta[1 + width + i]) for i, level in enumerate(levels[1:])})
    model = HedonicModel(price_column, names, float(beta[0]), beta[1:1 + width], effects, include_coordinates)
    model.r2_train = float(r2_score(target, design @ beta))
    return model


def hedonic_predict(model: HedonicModel, table: GeoTable, geom: RegionGeometry) -> np.ndarray:
    """Predicted log-prices; unseen subregions get the mean fixed effect"""
    features, names = _design(table, model.price_column, model.include_coordinates)
    if names != model.feature_names:
        raise EvaluationError("Table features do not match the hedonic model")
    subregions = assign_subregion(table, geom)
    fallback = model.mean_fixed_effect
    effects = np.array([model.fixed_effects.get(str(s), fallback) for s in subregions], dtype=np.float64)
    return model.intercept + features @ model.coefficients + effects


def utility_distance(real: GeoTable, synth: GeoTable, geom: RegionGeometry, price_column: str,
                     include_coordinates: bool = True) -> float:
    """|R2(real model) - R2(synthetic model)|, both scored on the real log-prices"""
    target = log_prices(real, price_column)
    real_model = hedonic_fit(real, geom, price_column, include_coordinates)
    synth_model = hedonic_fit(synth, geom, price_column, include_coordinates)
    r2_real = r2_score(target, hedonic_predict(real_model, real, geom))
    r2_synth = r2_score(target, hedonic_predict(synth_model, real, geom))
    logger.debug("TSTR R2: real %.6f, synthetic %.6f", r2_real, r2_synth)
    return float(abs(r2_real - r2_synth))


def default_price_column(table: GeoTable, price_column: Optional[str] = None) -> str:
    """The configured price column, else a numeric column named "price" """
    if price_column is not None:
        table.spec(price_column)
        return price_column
    for spec in table.feature_specs:
        if spec.is_numeric and spec.name.lower() == "price":
            return spec.name
    raise SchemaError("No price column configured and none named 'price'")
