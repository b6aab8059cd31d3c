"""
Run configuration for GeoSynth
Dataclass configs with JSON persistence and .env-backed defaults
"""

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional

from dotenv import load_dotenv

from app.errors import ConfigError

# Load environment variables
load_dotenv()

# Per-purpose offsets added to the master seed
SEED_OFFSETS = {
    "fit": 0,
    "sample": 1,
    "metrics": 2,
    "splits": 3,
}

GENERATOR_KINDS = ("nf_vae", "vae_only", "copula", "nf_copula", "global_shuffle", "local_shuffle")


def derive_seed(master: int, purpose: str) -> int:
    """
    Derive the sub-seed for one purpose from the master seed

    Args:
        master: Master seed of the run
        purpose: One of "fit", "sample", "metrics", "splits"

    Returns:
        master + the purpose's fixed offset
    """
    if purpose not in SEED_OFFSETS:
        raise ConfigError(f"Unknown seed purpose: {purpose}")
    return int(master) + SEED_OFFSETS[purpose]


@dataclass
class GeneratorConfig:
    """Architecture, training and loss-weight settings shared by all generators"""
    flow_layers: int = 8
    flow_bins: int = 8
    flow_tail_bound: float = 4.0
    flow_hidden: List[int] = field(default_factory=lambda: [64, 64])
    flow_epochs: int = 40
    flow_batch_size: int = 256
    flow_learning_rate: float = 1e-3

    vae_latent_dim: Optional[int] = None  # None -> max(2, ceil(M / 4))
    vae_hidden: List[int] = field(default_factory=lambda: [128, 128])
    vae_epochs: int = 60
    vae_batch_size: int = 128
    vae_learning_rate: float = 1e-3

    alpha_geo: float = 10.0
    alpha_r: float = 1.0
    alpha_kl: float = 0.1

    clip_norm: Optional[float] = 5.0

    @classmethod
    def from_dict(cls, data: Dict) -> 'GeneratorConfig':
        return cls(**_known_fields(cls, data))


@dataclass
class MetricConfig:
    """Settings of the evaluation battery"""
    n_projections: int = 1000
    wasserstein_p: float = 2.0
    grid_size: float = 0.01
    moran_percentile: float = 0.01
    pair_cap: int = 2_000_000
    pair_subsample: int = 1_000_000
    price_column: Optional[str] = None
    privacy_n_synth: Optional[int] = None  # None -> size of the 95% part

    @classmethod
    def from_dict(cls, data: Dict) -> 'MetricConfig':
        return cls(**_known_fields(cls, data))


@dataclass
class RunConfig:
    """
    Everything one CLI command needs

    Only the three input paths lack a usable default; commands that need
    them check for their presence.
    """
    dataset: Optional[str] = None
    schema: Optional[str] = None
    geometry: Optional[str] = None
    kind: str = "nf_vae"
    n_synth: Optional[int] = None  # None -> same size as the real table
    seed: int = field(default_factory=lambda: int(os.getenv("GEOSYNTH_SEED", "0")))
    out: str = field(default_factory=lambda: os.getenv("GEOSYNTH_OUT", "runs"))
    workers: int = field(default_factory=lambda: int(os.getenv("GEOSYNTH_WORKERS", "1")))
    log_level: str = field(default_factory=lambda: os.getenv("GEOSYNTH_LOG_LEVEL", "INFO"))
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    metrics: MetricConfig = field(default_factory=MetricConfig)

    def __post_init__(self):
        if self.kind not in GENERATOR_KINDS:
            raise ConfigError(f"Unknown generator kind: {self.kind}. Choose from {', '.join(GENERATOR_KINDS)}")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        if self.n_synth is not None and self.n_synth < 0:
            raise ConfigError("n_synth must be non-negative")

    def seed_for(self, purpose: str) -> int:
        """Sub-seed for a purpose (see SEED_OFFSETS)"""
        return derive_seed(self.seed, purpose)

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> 'RunConfig':
        values = _known_fields(cls, data)
        if isinstance(values.get("generator"), dict):
            values["generator"] = GeneratorConfig.from_dict(values["generator"])
        if isinstance(values.get("metrics"), dict):
            values["metrics"] = MetricConfig.from_dict(values["metrics"])
        return cls(**values)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON form"""
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def save_to_file(self, filepath: str):
        """Save config to a JSON file"""
        with open(filepath, 'w', encoding='utf-8') as f:
            f.write(self.to_json())

    @classmethod
    def load_from_file(cls, filepath: str) -> 'RunConfig':
        """Load config from a JSON file"""
        try:
            with open(filepath, 'r', encoding='utf-8') as f:
                data = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"Config file not found: {filepath}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"Config file {filepath} is not valid JSON: {e}")
        if not isinstance(data, dict):
            raise ConfigError(f"Config file {filepath} must hold a JSON object")
        return cls.from_dict(data)


def _known_fields(cls, data: Dict) -> Dict:
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"Unknown {cls.__name__} field(s): {', '.join(unknown)}")
    return dict(data)
