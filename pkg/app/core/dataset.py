"""
Geolocated tabular data: schema, loading, encoding and splitting
Rows are units (homes, schools, ...) with one latitude and one longitude column
"""

import json
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from app.errors import ConfigError, EmptyDataError, SchemaError

logger = logging.getLogger(__name__)

TRUE_TOKENS = {"true", "t", "yes", "y", "1"}
FALSE_TOKENS = {"false", "f", "no", "n", "0"}

COORDINATE_LIMITS = {
    "latitude": (-90.0, 90.0),
    "longitude": (-180.0, 180.0),
}


class ColumnKind(str, Enum):
    """Admissible column kinds"""
    LATITUDE = "latitude"
    LONGITUDE = "longitude"
    NUMERIC = "numeric"
    INTEGER = "integer"
    BOOLEAN = "boolean"
    CATEGORICAL = "categorical"


NUMERIC_KINDS = (ColumnKind.LATITUDE, ColumnKind.LONGITUDE, ColumnKind.NUMERIC, ColumnKind.INTEGER)
DISCRETE_KINDS = (ColumnKind.BOOLEAN, ColumnKind.CATEGORICAL)


@dataclass(frozen=True)
class ColumnSpec:
    """One column of a geolocated table"""
    name: str
    kind: ColumnKind
    categories: Tuple[str, ...] = ()
    bounds: Optional[Tuple[float, float]] = None

    @property
    def is_coordinate(self) -> bool:
        return self.kind in (ColumnKind.LATITUDE, ColumnKind.LONGITUDE)

    @property
    def is_numeric(self) -> bool:
        return self.kind in NUMERIC_KINDS

    @property
    def is_discrete(self) -> bool:
        return self.kind in DISCRETE_KINDS

    def levels(self) -> List[Any]:
        """Ordered admissible levels of a discrete column"""
        if self.kind == ColumnKind.BOOLEAN:
            return [True, False]
        if self.kind == ColumnKind.CATEGORICAL:
            return list(self.categories)
        return []

    def value_range(self) -> Tuple[float, float]:
        """Closed interval every value of a numeric column must lie in"""
        low, high = COORDINATE_LIMITS.get(self.kind.value, (-math.inf, math.inf))
        if self.bounds is not None:
            low, high = max(low, self.bounds[0]), min(high, self.bounds[1])
        return low, high

    def to_dict(self) -> Dict:
        data: Dict[str, Any] = {"name": self.name, "kind": self.kind.value}
        if self.categories:
            data["categories"] = list(self.categories)
        if self.bounds is not None:
            data["bounds"] = [self.bounds[0], self.bounds[1]]
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> 'ColumnSpec':
        try:
            name = str(data["name"])
            kind = ColumnKind(data["kind"])
        except (KeyError, ValueError, TypeError) as e:
            raise SchemaError(f"Invalid column entry {data!r}: {e}")
        categories = tuple(str(c) for c in data.get("categories") or ())
        bounds = data.get("bounds")
        if bounds is not None:
            if len(bounds) != 2 or float(bounds[0]) > float(bounds[1]):
                raise SchemaError(f"Column {name}: bounds must be [min, max] with min <= max")
            bounds = (float(bounds[0]), float(bounds[1]))
        return cls(name=name, kind=kind, categories=categories, bounds=bounds)


def validate_schema(schema: Sequence[ColumnSpec]):
    """
    Check the schema-level invariants

    Raises:
        SchemaError: duplicate names, not exactly one latitude and one
            longitude column, or a categorical column without unique levels
    """
    names = [spec.name for spec in schema]
    if len(set(names)) != len(names):
        raise SchemaError("Column names must be unique")
    for kind in (ColumnKind.LATITUDE, ColumnKind.LONGITUDE):
        count = sum(1 for spec in schema if spec.kind == kind)
        if count != 1:
            raise SchemaError(f"Schema needs exactly one {kind.value} column, found {count}")
    for spec in schema:
        if spec.kind == ColumnKind.CATEGORICAL:
            if not spec.categories:
                raise SchemaError(f"Categorical column {spec.name} lists no categories")
            if len(set(spec.categories)) != len(spec.categories):
                raise SchemaError(f"Categorical column {spec.name} has duplicate levels")
        elif spec.categories:
            raise SchemaError(f"Only categorical columns may list categories ({spec.name})")


def load_schema(path: str) -> List[ColumnSpec]:
    """Read and validate a schema JSON file (a list of column entries)"""
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except FileNotFoundError:
        raise SchemaError(f"Schema file not found: {path}")
    except json.JSONDecodeError as e:
        raise SchemaError(f"Schema file {path} is not valid JSON: {e}")
    if not isinstance(data, list):
        raise SchemaError(f"Schema file {path} must hold a JSON list")
    schema = [ColumnSpec.from_dict(entry) for entry in data]
    validate_schema(schema)
    return schema


def save_schema(schema: Sequence[ColumnSpec], path: str):
    """Write a schema JSON file"""
    with open(path, 'w', encoding='utf-8') as f:
        json.dump([spec.to_dict() for spec in schema], f, indent=2)


@dataclass
class GeoTable:
    """
    Schema-typed rows, one geolocated unit each

    The frame holds float64 for coordinates/numerics, int64 for integers,
    bool for booleans and str for categoricals. Treat instances as
    immutable: every transformation returns a new table.
    """
    schema: List[ColumnSpec]
    frame: pd.DataFrame
    rejected: int = 0

    @property
    def N(self) -> int:
        return len(self.frame)

    def __len__(self) -> int:
        return len(self.frame)

    def spec(self, name: str) -> ColumnSpec:
        for spec in self.schema:
            if spec.name == name:
                return spec
        raise SchemaError(f"Unknown column: {name}")

    @property
    def longitude_column(self) -> str:
        return next(s.name for s in self.schema if s.kind == ColumnKind.LONGITUDE)

    @property
    def latitude_column(self) -> str:
        return next(s.name for s in self.schema if s.kind == ColumnKind.LATITUDE)

    @property
    def feature_specs(self) -> List[ColumnSpec]:
        """Non-spatial columns in schema order"""
        return [s for s in self.schema if not s.is_coordinate]

    def coords(self) -> np.ndarray:
        """N x 2 array of (longitude, latitude)"""
        return np.column_stack([
            self.frame[self.longitude_column].to_numpy(dtype=np.float64),
            self.frame[self.latitude_column].to_numpy(dtype=np.float64),
        ]).reshape(len(self.frame), 2)

    def take(self, indices: Sequence[int]) -> 'GeoTable':
        """Rows at the given positions, in the given order"""
        frame = self.frame.iloc[np.asarray(indices, dtype=np.int64)].reset_index(drop=True)
        return GeoTable(self.schema, frame)

    def with_coords(self, coords: np.ndarray) -> 'GeoTable':
        """Copy with longitude/latitude replaced by an N x 2 array"""
        frame = self.frame.copy()
        frame[self.longitude_column] = np.asarray(coords[:, 0], dtype=np.float64)
        frame[self.latitude_column] = np.asarray(coords[:, 1], dtype=np.float64)
        return GeoTable(self.schema, frame)

    @classmethod
    def empty(cls, schema: Sequence[ColumnSpec]) -> 'GeoTable':
        return cls.from_columns(schema, {spec.name: [] for spec in schema})

    @classmethod
    def from_columns(cls, schema: Sequence[ColumnSpec], columns: Dict[str, Any]) -> 'GeoTable':
        """Build a table from per-column values, coercing to the schema dtypes"""
        schema = list(schema)
        validate_schema(schema)
        data = {}
        for spec in schema:
            if spec.name not in columns:
                raise SchemaError(f"Missing column: {spec.name}")
            data[spec.name] = _coerce(columns[spec.name], spec)
        return cls(schema, pd.DataFrame(data, columns=[s.name for s in schema]))


def _coerce(values: Any, spec: ColumnSpec) -> pd.Series:
    if spec.kind == ColumnKind.INTEGER:
        return pd.Series(np.asarray(values, dtype=np.int64))
    if spec.is_numeric:
        return pd.Series(np.asarray(values, dtype=np.float64))
    if spec.kind == ColumnKind.BOOLEAN:
        return pd.Series(np.asarray(values, dtype=bool))
    return pd.Series([str(v) for v in values], dtype=object)


def _to_float(text: str) -> float:
    try:
        return float(text)
    except ValueError:
        return math.nan


def _parse_column(raw: pd.Series, spec: ColumnSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Parse one string column; returns (values, valid mask)"""
    cells = raw.astype(str).str.strip().to_numpy()
    if spec.is_numeric:
        # float() is correctly rounded, so written floats reload bit-exactly
        values = np.array([_to_float(c) for c in cells], dtype=np.float64)
        low, high = spec.value_range()
        with np.errstate(invalid="ignore"):
            valid = np.isfinite(values) & (values >= low) & (values <= high)
            if spec.kind == ColumnKind.INTEGER:
                valid &= np.floor(values) == values
        return values, valid
    if spec.kind == ColumnKind.BOOLEAN:
        lowered = [c.lower() for c in cells]
        values = np.array([c in TRUE_TOKENS for c in lowered], dtype=bool)
        valid = np.array([c in TRUE_TOKENS or c in FALSE_TOKENS for c in lowered], dtype=bool)
        return values, valid
    levels = set(spec.categories)
    valid = np.array([c in levels for c in cells], dtype=bool)
    return cells.astype(object), valid


def load_table(path: str, schema: Sequence[ColumnSpec]) -> GeoTable:
    """
    Load a CSV file into a GeoTable

    Rows with a missing, unparseable, out-of-bounds or unknown-level cell
    are rejected; their count is logged and kept in ``table.rejected``.

    Args:
        path: CSV file with a header row (RFC-4180, UTF-8)
        schema: Column specifications; extra CSV columns are ignored

    Returns:
        GeoTable of the valid rows

    Raises:
        ConfigError: If the file does not exist
        SchemaError: If a schema column is missing from the header
        EmptyDataError: If no row survives validation
    """
    schema = list(schema)
    validate_schema(schema)
    try:
        raw = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"Data file not found: {path}")

    missing = [spec.name for spec in schema if spec.name not in raw.columns]
    if missing:
        raise SchemaError(f"{path}: missing column(s) {', '.join(missing)}")

    valid = np.ones(len(raw), dtype=bool)
    parsed = {}
    for spec in schema:
        values, ok = _parse_column(raw[spec.name], spec)
        parsed[spec.name] = values
        valid &= ok

    rejected = int((~valid).sum())
    if rejected:
        logger.warning("%s: rejected %d of %d rows", path, rejected, len(raw))
    if not valid.any():
        raise EmptyDataError(f"{path}: no valid rows")

    table = GeoTable.from_columns(schema, {name: values[valid] for name, values in parsed.items()})
    table.rejected = rejected
    logger.info("Loaded %d rows from %s", table.N, path)
    return table


def save_table(table: GeoTable, path: str):
    """
    Write a GeoTable as CSV

    Floats are written in shortest round-trip form and booleans as
    true/false, so load_table reproduces the table exactly.
    """
    out = {}
    for spec in table.schema:
        column = table.frame[spec.name]
        if spec.kind == ColumnKind.BOOLEAN:
            out[spec.name] = ["true" if v else "false" for v in column]
        elif spec.kind == ColumnKind.INTEGER:
            out[spec.name] = [str(int(v)) for v in column]
        elif spec.is_numeric:
            out[spec.name] = [repr(float(v)) for v in column]
        else:
            out[spec.name] = [str(v) for v in column]
    frame = pd.DataFrame(out, columns=[s.name for s in table.schema])
    frame.to_csv(path, index=False, encoding="utf-8", lineterminator="\n")


# --- Encoding ---------------------------------------------------------------

@dataclass(frozen=True)
class LayoutEntry:
    """Maps one matrix column to its source column"""
    column: str
    role: str  # "coordinate", "numeric" or "onehot"
    level: Any = None


@dataclass(frozen=True)
class Scaler:
    """Affine rescaling: encoded = (value - offset) / scale"""
    offset: float
    scale: float

    def apply(self, values: np.ndarray) -> np.ndarray:
        return (values - self.offset) / self.scale

    def invert(self, values: np.ndarray) -> np.ndarray:
        return values * self.scale + self.offset

    @classmethod
    def minmax(cls, values: np.ndarray) -> 'Scaler':
        low, high = float(np.min(values)), float(np.max(values))
        # Constant columns map to 0
        return cls(low, high - low if high > low else 1.0)

    @classmethod
    def zscore(cls, values: np.ndarray) -> 'Scaler':
        std = float(np.std(values))
        return cls(float(np.mean(values)), std if std > 0 else 1.0)

    @classmethod
    def identity(cls) -> 'Scaler':
        return cls(0.0, 1.0)


@dataclass
class EncodedMatrix:
    """Numeric N x M view of a GeoTable plus what is needed to undo it"""
    values: np.ndarray
    layout: List[LayoutEntry]
    scalers: Dict[str, Scaler]
    schema: List[ColumnSpec]
    mode: str = "model"

    @property
    def width(self) -> int:
        return len(self.layout)

    def indices(self, column: str) -> List[int]:
        return [i for i, entry in enumerate(self.layout) if entry.column == column]

    def coordinate_indices(self) -> List[int]:
        """Matrix columns of (longitude, latitude), in that order"""
        lon = next(s.name for s in self.schema if s.kind == ColumnKind.LONGITUDE)
        lat = next(s.name for s in self.schema if s.kind == ColumnKind.LATITUDE)
        return self.indices(lon) + self.indices(lat)

    def with_values(self, values: np.ndarray) -> 'EncodedMatrix':
        return EncodedMatrix(np.asarray(values, dtype=np.float64), self.layout, self.scalers, self.schema, self.mode)


def encode(table: GeoTable, mode: str = "model", reference: Optional[EncodedMatrix] = None,
           coordinate_scaling: Optional[str] = None) -> EncodedMatrix:
    """
    Encode a table as a real matrix

    Args:
        table: Table to encode
        mode: "model" z-scores coordinates and numerics; "distance" min-max
            rescales every numeric column (coordinates included) to [0, 1].
            Discrete columns are one-hot encoded in both modes.
        reference: Reuse the scalers of an earlier encoding instead of
            fitting new ones (e.g. synthetic rows scaled like the real ones)
        coordinate_scaling: Override for the coordinate columns,
            "zscore" or "minmax"

    Returns:
        EncodedMatrix whose layout follows schema order
    """
    if mode not in ("model", "distance"):
        raise ConfigError(f"Unknown encoding mode: {mode}")
    if reference is None and table.N == 0:
        raise EmptyDataError("Cannot fit an encoding on an empty table")
    if coordinate_scaling is None:
        coordinate_scaling = "zscore" if mode == "model" else "minmax"
    numeric_scaling = "zscore" if mode == "model" else "minmax"

    blocks = []
    layout: List[LayoutEntry] = []
    scalers: Dict[str, Scaler] = {}
    for spec in table.schema:
        column = table.frame[spec.name]
        if spec.is_numeric:
            values = column.to_numpy(dtype=np.float64)
            if reference is not None:
                scaler = reference.scalers[spec.name]
            else:
                how = coordinate_scaling if spec.is_coordinate else numeric_scaling
                scaler = Scaler.minmax(values) if how == "minmax" else Scaler.zscore(values)
            scalers[spec.name] = scaler
            blocks.append(scaler.apply(values)[:, None])
            layout.append(LayoutEntry(spec.name, "coordinate" if spec.is_coordinate else "numeric"))
        else:
            levels = spec.levels()
            raw = column.to_numpy()
            onehot = np.zeros((table.N, len(levels)), dtype=np.float64)
            for j, level in enumerate(levels):
                onehot[:, j] = raw == level
                layout.append(LayoutEntry(spec.name, "onehot", level))
            blocks.append(onehot)

    values = np.hstack(blocks) if blocks else np.zeros((table.N, 0))
    return EncodedMatrix(values.reshape(table.N, len(layout)), layout, scalers, list(table.schema), mode)


def clamp_numeric(spec: ColumnSpec, values: np.ndarray) -> np.ndarray:
    """Round integers half-up, then clamp into the column's admissible range"""
    values = np.asarray(values, dtype=np.float64)
    low, high = spec.value_range()
    if spec.kind == ColumnKind.INTEGER:
        values = np.floor(values + 0.5)
        low = math.ceil(low) if math.isfinite(low) else low
        high = math.floor(high) if math.isfinite(high) else high
    return np.clip(values, low, high)


def decode(matrix: EncodedMatrix) -> GeoTable:
    """
    Map an encoded matrix back to schema-typed rows

    One-hot groups resolve by argmax (first level wins ties), numerics are
    inverse-scaled and clamped to their admissible range, integers are
    rounded half-up before clamping.
    """
    columns = {}
    values = np.asarray(matrix.values, dtype=np.float64).reshape(-1, matrix.width)
    for spec in matrix.schema:
        idx = matrix.indices(spec.name)
        if spec.is_numeric:
            columns[spec.name] = clamp_numeric(spec, matrix.scalers[spec.name].invert(values[:, idx[0]]))
        else:
            levels = spec.levels()
            if values.shape[0] == 0:
                columns[spec.name] = []
            else:
                choice = np.argmax(values[:, idx], axis=1)
                columns[spec.name] = [levels[k] for k in choice]
    return GeoTable.from_columns(matrix.schema, columns)


def feature_matrix(table: GeoTable, exclude: Sequence[str] = (), drop_first: bool = False) -> Tuple[np.ndarray, List[str]]:
    """
    Raw design matrix of the non-spatial columns

    Numerics enter as they are; discrete columns as one-hot indicators over
    their schema levels (optionally dropping the first level as reference).

    Returns:
        (N x P matrix, column names such as "garage=True")
    """
    blocks = []
    names: List[str] = []
    for spec in table.feature_specs:
        if spec.name in exclude:
            continue
        column = table.frame[spec.name]
        if spec.is_numeric:
            blocks.append(column.to_numpy(dtype=np.float64)[:, None])
            names.append(spec.name)
        else:
            raw = column.to_numpy()
            levels = spec.levels()[1:] if drop_first else spec.levels()
            for level in levels:
                blocks.append((raw == level).astype(np.float64)[:, None])
                names.append(f"{spec.name}={level}")
    if not blocks:
        return np.zeros((table.N, 0)), names
    return np.hstack(blocks), names


# --- Splitting --------------------------------------------------------------

def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def stratified_first_part(labels: np.ndarray, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """
    Positions of the first part of a stratified split

    Each level receives floor(fraction * n_level) rows, the remainder of
    round(fraction * N) goes to the levels with the largest fractional
    parts (ties by level order). A level with a single row sends it to the
    first part.
    """
    labels = np.asarray(labels)
    levels = sorted(set(labels.tolist()), key=lambda v: (str(type(v)), v))
    groups = [np.flatnonzero(labels == level) for level in levels]
    target = round_half_up(fraction * len(labels))

    singletons = [i for i, g in enumerate(groups) if len(g) == 1]
    counts = [1 if len(g) == 1 else int(math.floor(fraction * len(g))) for g in groups]
    remaining = target - sum(counts)
    if remaining > 0:
        order = sorted(
            (i for i in range(len(groups)) if i not in singletons),
            key=lambda i: (-(fraction * len(groups[i]) - counts[i]), i),
        )
        for i in order[:remaining]:
            counts[i] += 1

    chosen = []
    for group, count in zip(groups, counts):
        perm = rng.permutation(group)
        chosen.append(perm[:count])
    return np.sort(np.concatenate(chosen)) if chosen else np.zeros(0, dtype=np.int64)


def split(table: GeoTable, fraction: float, seed: int, stratify_on: Optional[str] = None) -> Tuple[GeoTable, GeoTable]:
    """
    Split a table into two disjoint parts

    Args:
        table: Table to partition
        fraction: Share of rows in the first part, in (0, 1)
        seed: Seed of the permutation
        stratify_on: Optional column whose level proportions are preserved

    Returns:
        (first part with round(fraction * N) rows, the rest); both keep the
        original row order
    """
    labels = None if stratify_on is None else table.frame[table.spec(stratify_on).name].to_numpy()
    mask = split_mask(table.N, fraction, seed, labels)
    return table.take(np.flatnonzero(mask)), table.take(np.flatnonzero(~mask))


def split_mask(n: int, fraction: float, seed: int, labels: Optional[np.ndarray] = None) -> np.ndarray:
    """Boolean mask of the first part of a (optionally stratified) split of n rows"""
    if not 0.0 < fraction < 1.0:
        raise ConfigError(f"Split fraction must lie in (0, 1), got {fraction}")
    if fraction * n < 1:
        raise EmptyDataError(f"fraction * N = {fraction * n:.3f} leaves the first part empty")
    rng = np.random.default_rng(seed)
    if labels is None:
        first = rng.permutation(n)[:round_half_up(fraction * n)]
    else:
        first = stratified_first_part(labels, fraction, rng)
    mask = np.zeros(n, dtype=bool)
    mask[first] = True
    return mask
