"""
Evaluation reports
Runs the fidelity, utility and privacy battery and records the outcome
with its provenance.
"""

import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional, Union

import numpy as np

from app.config import RunConfig
from app.core.dataset import GeoTable
from app.core.geometry import RegionGeometry
from app.errors import ConfigError, GeoSynthError
from app.generators.generator import FittedGenerator, GeneratorKind, fit, novelty_rate, sample
from app.metrics.fidelity import (
    GridSpec,
    MoranConfig,
    geo_distance,
    local_feature_distance,
    pca_fit,
    spatial_autocorr_distance,
)
from app.metrics.privacy import privacy_audit
from app.metrics.utility import default_price_column, utility_distance

logger = logging.getLogger(__name__)

METRIC_FIELDS = ("d_geo", "d_spatial", "d_local", "d_utility", "rho_privacy", "novelty")

# Failures that cost one metric (or one benchmark cell) rather than the run
RECOVERABLE_ERRORS = (GeoSynthError, ValueError, ArithmeticError, np.linalg.LinAlgError)


@dataclass
class EvaluationReport:
    """
    Metric values plus provenance

    A metric that could not be computed is None and has a message in
    ``errors``.
    """
    kind: Optional[str] = None
    seed: int = 0
    n_real: int = 0
    n_synth: int = 0
    config_hash: str = ""
    d_geo: Optional[float] = None
    d_spatial: Optional[float] = None
    d_local: Optional[float] = None
    d_utility: Optional[float] = None
    rho_privacy: Optional[float] = None
    novelty: Optional[float] = None
    seeds: Dict[str, int] = field(default_factory=dict)
    privacy: Optional[Dict] = None
    errors: Dict[str, str] = field(default_factory=dict)

    @property
    def all_failed(self) -> bool:
        return all(getattr(self, name) is None for name in METRIC_FIELDS)

    def to_dict(self) -> Dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: Dict) -> 'EvaluationReport':
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in names})

    @classmethod
    def from_json(cls, text: str) -> 'EvaluationReport':
        return cls.from_dict(json.loads(text))

    def save_to_file(self, filepath: str):
        """Write through a temporary file so a reader never sees a partial report"""
        partial = f"{filepath}.partial"
        with open(partial, 'w', encoding='utf-8') as f:
            f.write(self.to_json())
        os.replace(partial, filepath)

    @classmethod
    def load_from_file(cls, filepath: str) -> 'EvaluationReport':
        with open(filepath, 'r', encoding='utf-8') as f:
            return cls.from_json(f.read())

    @staticmethod
    def csv_header() -> List[str]:
        return ["kind", "seed", "n_real", "n_synth", *METRIC_FIELDS, "config_hash", "errors"]

    def to_csv_row(self) -> Dict:
        row = {name: getattr(self, name) for name in self.csv_header() if name != "errors"}
        row["errors"] = "; ".join(f"{k}: {v}" for k, v in sorted(self.errors.items()))
        return row


def _record(report: EvaluationReport, name: str, compute):
    try:
        value = compute()
    except RECOVERABLE_ERRORS as e:
        report.errors[name] = f"{type(e).__name__}: {e}"
        logger.warning("%s unavailable: %s", name, report.errors[name])
        return None
    setattr(report, name, None if value is None else float(value))
    return value


def evaluate(real: GeoTable, synth_or_kind: Union[GeoTable, FittedGenerator, str, GeneratorKind],
             geom: Optional[RegionGeometry] = None, config: Optional[RunConfig] = None,
             kind: Optional[Union[str, GeneratorKind]] = None) -> EvaluationReport:
    """
    Run every metric and collect the results

    Args:
        real: Real table D
        synth_or_kind: A synthetic table, a fitted generator, or a kind to
            fit on ``real`` and sample from
        geom: Region geometry; without it utility and privacy are skipped
        config: Run settings (seeds, metric settings, sample size)
        kind: Generator kind for the privacy audit when a bare table is given

    Returns:
        EvaluationReport; failing metrics are None with a message in errors
    """
    config = config or RunConfig()
    metrics = config.metrics
    metric_seed = config.seed_for("metrics")
    n_synth = config.n_synth if config.n_synth is not None else real.N

    if isinstance(synth_or_kind, GeoTable):
        synth = synth_or_kind
    elif isinstance(synth_or_kind, FittedGenerator):
        kind = kind or synth_or_kind.kind
        synth = sample(synth_or_kind, n_synth, config.seed_for("sample"))
    else:
        kind = GeneratorKind(synth_or_kind)
        if geom is None:
            raise ConfigError("Fitting a generator for evaluation needs a geometry")
        fitted = fit(kind, real, geom, config.generator, config.seed_for("fit"))
        synth = sample(fitted, n_synth, config.seed_for("sample"))
    kind = GeneratorKind(kind).value if kind is not None else None

    report = EvaluationReport(
        kind=kind, seed=config.seed, n_real=real.N, n_synth=synth.N, config_hash=config.config_hash(),
        seeds={purpose: config.seed_for(purpose) for purpose in ("fit", "sample", "metrics", "splits")},
    )
    logger.info("Evaluating %s: %d real vs %d synthetic rows", kind or "table", real.N, synth.N)

    _record(report, "d_geo", lambda: geo_distance(real, synth, metrics.n_projections, metrics.wasserstein_p, metric_seed))
    basis = None
    try:
        basis = pca_fit(real)
    except RECOVERABLE_ERRORS as e:
        message = f"{type(e).__name__}: {e}"
        report.errors["d_spatial"] = report.errors["d_local"] = message
    if basis is not None:
        moran = MoranConfig(percentile=metrics.moran_percentile, pair_cap=metrics.pair_cap,
                            pair_subsample=metrics.pair_subsample, seed=metric_seed)
        _record(report, "d_spatial", lambda: spatial_autocorr_distance(real, synth, basis, moran))
        _record(report, "d_local", lambda: local_feature_distance(real, synth, basis, GridSpec(metrics.grid_size)))

    if geom is None:
        report.errors["d_utility"] = "unavailable: no geometry supplied"
        report.errors["rho_privacy"] = "unavailable: no geometry supplied"
    else:
        _record(report, "d_utility",
                lambda: utility_distance(real, synth, geom, default_price_column(real, metrics.price_column)))
        if kind is None:
            report.errors["rho_privacy"] = "unavailable: a bare synthetic table cannot be privacy-scored"
        else:
            def audit():
                result = privacy_audit(real, kind, geom, metrics.privacy_n_synth, config.seed, config.generator)
                report.privacy = result.to_dict()
                return result.rho
            _record(report, "rho_privacy", audit)

    _record(report, "novelty", lambda: novelty_rate(real, synth))
    return report
