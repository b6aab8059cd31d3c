"""
Synthetic population generators
One fit/sample contract for NF+VAE and the five baselines, with region
clipping and on-disk bundles.
"""

import json
import logging
import math
import os
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional

import numpy as np
import pandas as pd

from app.config import GeneratorConfig
from app.core.dataset import (
    ColumnKind,
    ColumnSpec,
    EncodedMatrix,
    GeoTable,
    LayoutEntry,
    Scaler,
    clamp_numeric,
    decode,
    encode,
    load_schema,
    load_table,
    save_schema,
    save_table,
)
from app.core.geometry import (
    NO_SUBREGION,
    RegionGeometry,
    assign_subregion,
    load_geometry,
    points_in_polygon,
    uniform_points_in_polygon,
)
from app.errors import ConfigError, EmptyDataError, RegionMismatchError, TooFewSamplesError
from app.generators.copula import CopulaState, copula_fit, copula_sample
from app.nn.diffnet import TrainConfig
from app.nn.flow import FlowArch, FlowModel, coords_to_latent, latent_to_coords, load_flow, save_flow, train_flow
from app.nn.vae import LossWeights, VaeArch, VaeModel, load_vae, save_vae, train_vae, vae_sample

logger = logging.getLogger(__name__)

MIN_NEURAL_ROWS = 100
MIN_ACCEPTANCE = 1e-3
CANDIDATE_FACTOR = 100
NUMERIC_MATCH_TOLERANCE = 1e-9


class GeneratorKind(str, Enum):
    NF_VAE = "nf_vae"
    VAE_ONLY = "vae_only"
    COPULA = "copula"
    NF_COPULA = "nf_copula"
    GLOBAL_SHUFFLE = "global_shuffle"
    LOCAL_SHUFFLE = "local_shuffle"

    @property
    def uses_flow(self) -> bool:
        return self in (GeneratorKind.NF_VAE, GeneratorKind.NF_COPULA)

    @property
    def is_neural(self) -> bool:
        return self in (GeneratorKind.NF_VAE, GeneratorKind.VAE_ONLY, GeneratorKind.NF_COPULA)


@dataclass
class FittedGenerator:
    """
    A generator ready to sample

    Which state fields are set depends on the kind: flow for the NF
    variants, vae plus the encoding template for the VAE variants, copula
    for the copula variants, source rows for the shuffles.
    """
    kind: GeneratorKind
    schema: List[ColumnSpec]
    geometry: RegionGeometry
    seed: int
    flow: Optional[FlowModel] = None
    vae: Optional[VaeModel] = None
    encoding: Optional[EncodedMatrix] = None
    copula: Optional[CopulaState] = None
    source: Optional[GeoTable] = None
    source_subregions: Optional[np.ndarray] = None


# --- Fitting ------------------------------------------------------------------

def _flow_train_config(config: GeneratorConfig, seed: int) -> TrainConfig:
    return TrainConfig(learning_rate=config.flow_learning_rate, batch_size=config.flow_batch_size,
                       epochs=config.flow_epochs, seed=seed, clip_norm=config.clip_norm)


def _vae_train_config(config: GeneratorConfig, seed: int) -> TrainConfig:
    return TrainConfig(learning_rate=config.vae_learning_rate, batch_size=config.vae_batch_size,
                       epochs=config.vae_epochs, seed=seed, clip_norm=config.clip_norm)


def _fit_flow(data: GeoTable, config: GeneratorConfig, seed: int) -> FlowModel:
    arch = FlowArch(config.flow_layers, config.flow_bins, config.flow_tail_bound, list(config.flow_hidden))
    return train_flow(data.coords(), _flow_train_config(config, seed), arch)


def _fit_vae(encoded: EncodedMatrix, config: GeneratorConfig, seed: int) -> VaeModel:
    return train_vae(encoded, _vae_train_config(config, seed),
                     VaeArch(config.vae_latent_dim, list(config.vae_hidden)),
                     LossWeights(config.alpha_geo, config.alpha_r, config.alpha_kl))


def _latent_encoding(data: GeoTable, flow: FlowModel) -> EncodedMatrix:
    """Model-mode encoding with the coordinate columns replaced by flow latents"""
    encoded = encode(data, "model")
    latent, _ = coords_to_latent(flow, data.coords())
    values = encoded.values.copy()
    values[:, encoded.coordinate_indices()] = latent
    scalers = dict(encoded.scalers)
    scalers[data.longitude_column] = Scaler.identity()
    scalers[data.latitude_column] = Scaler.identity()
    return EncodedMatrix(values, encoded.layout, scalers, encoded.schema, encoded.mode)


def _copula_columns(data: GeoTable, coords: np.ndarray):
    columns = {}
    levels = {}
    for spec in data.schema:
        if spec.name == data.longitude_column:
            columns[spec.name] = coords[:, 0]
        elif spec.name == data.latitude_column:
            columns[spec.name] = coords[:, 1]
        else:
            columns[spec.name] = data.frame[spec.name].to_numpy()
            if spec.is_discrete:
                levels[spec.name] = spec.levels()
    return columns, levels


def fit(kind, data: GeoTable, geom: RegionGeometry, config: Optional[GeneratorConfig] = None,
        seed: int = 0) -> FittedGenerator:
    """
    Fit a generator of the given kind

    Args:
        kind: GeneratorKind or its string value
        data: Real table
        geom: Region (and subregions, required by local_shuffle)
        config: Architecture and training settings
        seed: Fit seed

    Returns:
        FittedGenerator

    Raises:
        TooFewSamplesError: Neural kind with fewer than 100 rows
        ConfigError: local_shuffle without subregions
    """
    kind = GeneratorKind(kind)
    config = config or GeneratorConfig()
    if data.N == 0:
        raise EmptyDataError("Cannot fit a generator on an empty table")
    if kind.is_neural and data.N < MIN_NEURAL_ROWS:
        raise TooFewSamplesError(f"{kind.value} needs at least {MIN_NEURAL_ROWS} rows, got {data.N}")

    gen = FittedGenerator(kind, list(data.schema), geom, seed)
    logger.info("Fitting %s on %d rows", kind.value, data.N)

    if kind.uses_flow:
        gen.flow = _fit_flow(data, config, seed)

    if kind == GeneratorKind.NF_VAE:
        encoded = _latent_encoding(data, gen.flow)
        gen.vae = _fit_vae(encoded, config, seed)
        gen.encoding = encoded.with_values(np.zeros((0, encoded.width)))
    elif kind == GeneratorKind.VAE_ONLY:
        encoded = encode(data, "model", coordinate_scaling="minmax")
        gen.vae = _fit_vae(encoded, config, seed)
        gen.encoding = encoded.with_values(np.zeros((0, encoded.width)))
    elif kind in (GeneratorKind.COPULA, GeneratorKind.NF_COPULA):
        coords = data.coords()
        if kind == GeneratorKind.NF_COPULA:
            coords, _ = coords_to_latent(gen.flow, coords)
        columns, levels = _copula_columns(data, coords)
        gen.copula = copula_fit(columns, levels, seed)
    elif kind == GeneratorKind.GLOBAL_SHUFFLE:
        gen.source = data
    else:
        gen.source = data
        gen.source_subregions = assign_subregion(data, geom)
    return gen


# --- Sampling -------------------------------------------------------------------

def local_shuffle_sample(source: GeoTable, geom: RegionGeometry, n: int, seed: int,
                         subregions: Optional[np.ndarray] = None) -> GeoTable:
    """
    Resample rows with replacement and redraw each one's coordinates
    uniformly inside its source row's subregion

    Source rows outside every subregion ("_none") draw from the whole region.

    Raises:
        ConfigError: Geometry without subregions
        DegenerateGeometryError: A needed subregion has zero area
    """
    if subregions is None:
        subregions = assign_subregion(source, geom)
    if source.N == 0:
        raise EmptyDataError("Cannot resample an empty table")
    rng = np.random.default_rng(seed)
    rows = rng.integers(source.N, size=n)
    labels = np.asarray(subregions, dtype=object)[rows]
    coords = np.empty((n, 2))
    for label in sorted(set(labels.tolist())):
        idx = np.flatnonzero(labels == label)
        polygon = geom.region if label == NO_SUBREGION else geom.subregions[label]
        coords[idx] = uniform_points_in_polygon(polygon, len(idx), int(rng.integers(2 ** 63)))
    return source.take(rows).with_coords(coords)


def _table_from_copula(gen: FittedGenerator, matrix: np.ndarray) -> GeoTable:
    state = gen.copula
    columns = {}
    for j, name in enumerate(state.columns):
        columns[name] = matrix[:, j]
    lon = next(s.name for s in gen.schema if s.kind == ColumnKind.LONGITUDE)
    lat = next(s.name for s in gen.schema if s.kind == ColumnKind.LATITUDE)
    if gen.kind == GeneratorKind.NF_COPULA:
        coords = latent_to_coords(gen.flow, np.column_stack([columns[lon], columns[lat]]))
        columns[lon], columns[lat] = coords[:, 0], coords[:, 1]
    for spec in gen.schema:
        if state.is_discrete(spec.name):
            columns[spec.name] = [state.levels[spec.name][int(k)] for k in columns[spec.name]]
        else:
            columns[spec.name] = clamp_numeric(spec, columns[spec.name])
    return GeoTable.from_columns(gen.schema, columns)


def _candidates(gen: FittedGenerator, n: int, seed: int) -> GeoTable:
    """n unclipped rows of the generator's kind"""
    if gen.kind in (GeneratorKind.NF_VAE, GeneratorKind.VAE_ONLY):
        values = vae_sample(gen.vae, n, seed)
        if gen.kind == GeneratorKind.NF_VAE:
            idx = gen.encoding.coordinate_indices()
            values[:, idx] = latent_to_coords(gen.flow, values[:, idx])
        return decode(gen.encoding.with_values(values))
    if gen.kind in (GeneratorKind.COPULA, GeneratorKind.NF_COPULA):
        return _table_from_copula(gen, copula_sample(gen.copula, n, seed))
    if gen.kind == GeneratorKind.GLOBAL_SHUFFLE:
        rng = np.random.default_rng(seed)
        rows = rng.integers(gen.source.N, size=n)
        coords = uniform_points_in_polygon(gen.geometry.region, n, int(rng.integers(2 ** 63)))
        return gen.source.take(rows).with_coords(coords)
    return local_shuffle_sample(gen.source, gen.geometry, n, seed, gen.source_subregions)


def sample(gen: FittedGenerator, n: int, seed: int) -> GeoTable:
    """
    Draw exactly n synthetic rows inside the region

    Candidates falling outside the region polygon are discarded and topped
    up with fresh batches.

    Raises:
        RegionMismatchError: Acceptance below 1e-3 after 100 * n candidates
    """
    if n < 0:
        raise ConfigError("Sample size must be non-negative")
    if n == 0:
        return GeoTable.empty(gen.schema)
    rng = np.random.default_rng(seed)
    kept: List[GeoTable] = []
    have, proposed = 0, 0
    while have < n:
        need = n - have
        rate = have / proposed if proposed else 1.0
        batch = min(math.ceil(1.2 * need / max(rate, MIN_ACCEPTANCE)), CANDIDATE_FACTOR * n)
        batch = max(batch, need)
        candidates = _candidates(gen, batch, int(rng.integers(2 ** 63)))
        coords = candidates.coords()
        inside = points_in_polygon(coords[:, 0], coords[:, 1], gen.geometry.region)
        kept.append(candidates.take(np.flatnonzero(inside)))
        have += int(inside.sum())
        proposed += batch
        if have < n and proposed >= CANDIDATE_FACTOR * n and have / proposed < MIN_ACCEPTANCE:
            raise RegionMismatchError(
                f"{gen.kind.value}: only {have} of {proposed} candidates fell inside the region"
            )
    if proposed > n:
        logger.debug("%s: kept %d of %d candidates", gen.kind.value, n, proposed)
    frame = pd.concat([t.frame for t in kept], ignore_index=True).iloc[:n].reset_index(drop=True)
    return GeoTable(gen.schema, frame)


# --- Novelty ----------------------------------------------------------------------

def novelty_rate(real: GeoTable, synth: GeoTable) -> float:
    """
    Share of synthetic rows whose non-spatial features match no real row

    Discrete values must match exactly, numerics within 1e-9 relative.
    """
    if synth.N == 0:
        return 0.0
    discrete = [s.name for s in real.feature_specs if s.is_discrete]
    numeric = [s.name for s in real.feature_specs if s.is_numeric]
    if not discrete and not numeric:
        return 0.0 if real.N else 1.0

    if discrete:
        groups = {
            (key if isinstance(key, tuple) else (key,)): frame[numeric].to_numpy(dtype=np.float64)
            for key, frame in real.frame.groupby(discrete, sort=False)
        }
    else:
        groups = {(): real.frame[numeric].to_numpy(dtype=np.float64)}

    novel = 0
    synth_numeric = synth.frame[numeric].to_numpy(dtype=np.float64)
    synth_keys = synth.frame[discrete].itertuples(index=False, name=None) if discrete else iter([()] * synth.N)
    for row, key in enumerate(synth_keys):
        candidates = groups.get(tuple(key))
        if candidates is None:
            novel += 1
            continue
        if not numeric:
            continue
        matches = np.isclose(candidates, synth_numeric[row], rtol=NUMERIC_MATCH_TOLERANCE, atol=0.0)
        if not np.any(np.all(matches, axis=1)):
            novel += 1
    return novel / synth.N


# --- Bundles ------------------------------------------------------------------------

def _scalers_to_dict(scalers: Dict[str, Scaler]) -> Dict:
    return {k: [float.hex(s.offset), float.hex(s.scale)] for k, s in scalers.items()}


def _scalers_from_dict(data: Dict) -> Dict[str, Scaler]:
    return {k: Scaler(float.fromhex(v[0]), float.fromhex(v[1])) for k, v in data.items()}


def save_bundle(gen: FittedGenerator, directory: str):
    """
    Write a generator to a directory

    metadata.json, schema.json and geometry.geojson always; flow.json,
    vae.json, copula.json or source.csv as the kind requires.
    """
    os.makedirs(directory, exist_ok=True)
    metadata = {"kind": gen.kind.value, "seed": gen.seed}
    if gen.encoding is not None:
        metadata["encoding"] = {
            "mode": gen.encoding.mode,
            "layout": [[e.column, e.role, e.level] for e in gen.encoding.layout],
            "scalers": _scalers_to_dict(gen.encoding.scalers),
        }
    with open(os.path.join(directory, "metadata.json"), 'w', encoding='utf-8') as f:
        json.dump(metadata, f, indent=2, sort_keys=True)
    save_schema(gen.schema, os.path.join(directory, "schema.json"))
    gen.geometry.save_to_file(os.path.join(directory, "geometry.geojson"))
    if gen.flow is not None:
        save_flow(gen.flow, os.path.join(directory, "flow.json"))
    if gen.vae is not None:
        save_vae(gen.vae, os.path.join(directory, "vae.json"))
    if gen.copula is not None:
        with open(os.path.join(directory, "copula.json"), 'w', encoding='utf-8') as f:
            json.dump(gen.copula.to_dict(), f)
    if gen.source is not None:
        save_table(gen.source, os.path.join(directory, "source.csv"))
    logger.info("Saved %s bundle to %s", gen.kind.value, directory)


def load_bundle(directory: str) -> FittedGenerator:
    """Read a bundle written by save_bundle; sampling reproduces the original exactly"""
    path = os.path.join(directory, "metadata.json")
    try:
        with open(path, 'r', encoding='utf-8') as f:
            metadata = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"No generator bundle at {directory}")
    kind = GeneratorKind(metadata["kind"])
    schema = load_schema(os.path.join(directory, "schema.json"))
    geom = load_geometry(os.path.join(directory, "geometry.geojson"))
    gen = FittedGenerator(kind, schema, geom, int(metadata["seed"]))
    if kind.uses_flow:
        gen.flow = load_flow(os.path.join(directory, "flow.json"))
    if "encoding" in metadata:
        enc = metadata["encoding"]
        layout = [LayoutEntry(*entry) for entry in enc["layout"]]
        gen.encoding = EncodedMatrix(np.zeros((0, len(layout))), layout, _scalers_from_dict(enc["scalers"]),
                                     schema, enc["mode"])
        gen.vae = load_vae(os.path.join(directory, "vae.json"))
    if kind in (GeneratorKind.COPULA, GeneratorKind.NF_COPULA):
        with open(os.path.join(directory, "copula.json"), 'r', encoding='utf-8') as f:
            gen.copula = CopulaState.from_dict(json.load(f))
    if kind in (GeneratorKind.GLOBAL_SHUFFLE, GeneratorKind.LOCAL_SHUFFLE):
        gen.source = load_table(os.path.join(directory, "source.csv"), schema)
        if kind == GeneratorKind.LOCAL_SHUFFLE:
            gen.source_subregions = assign_subregion(gen.source, geom)
    return gen
