"""
Experiment Configuration Loader

Single source of truth for an experiment: lattice, AP model, lead field,
training data, VAE, BAL and MCMC settings and the list of test cases.
Loads config/default_experiment.json unless another file is named.
"""

import dataclasses
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import yaml
from dotenv import load_dotenv

from backend.errors import ConfigError
from backend.inference.acquisition import AcquisitionKind, SearchBox
from backend.inference.active_learner import BalConfig
from backend.inference.vae import TrainConfig
from backend.simulation.data_gen import SectorSpec, default_size_range
from backend.simulation.forward_model import ApParams, GridGeometry, StimulusProtocol

logger = logging.getLogger(__name__)

DEFAULT_CONFIG_PATH = Path(__file__).parent / "default_experiment.json"
ENV_CONFIG = "BAL_EXPERIMENT_CONFIG"
ENV_OUTPUT_DIR = "BAL_OUTPUT_DIR"
ENV_WORKERS = "BAL_WORKERS"


@dataclass(frozen=True)
class GeometryConfig:
    nx: int = 24
    ny: int = 24
    h: float = 0.25

    def build(self) -> GridGeometry:
        return GridGeometry(self.nx, self.ny, self.h)


@dataclass(frozen=True)
class ApParamsConfig:
    c: float = 8.0
    e0: float = 0.002
    mu1: float = 0.2
    mu2: float = 0.3
    d_iso: float = 0.1
    dt: float = 0.05
    t_end: float = 60.0
    record_stride: int = 4

    def build(self) -> ApParams:
        return ApParams(**dataclasses.asdict(self))


@dataclass(frozen=True)
class StimulusConfig:
    site: Optional[int] = None
    radius: int = 2
    value: float = 1.0
    t_on: float = 0.0

    def build(self, geometry: GridGeometry) -> StimulusProtocol:
        site = geometry.center_node if self.site is None else self.site
        return StimulusProtocol(site, self.radius, self.value, self.t_on)


@dataclass(frozen=True)
class LeadFieldConfig:
    n_leads: int = 12


@dataclass(frozen=True)
class TrainingSetConfig:
    count: int = 5000
    size_fraction_range: Tuple[float, float] = (0.05, 0.40)


@dataclass(frozen=True)
class VaeConfig:
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 100
    hidden: int = 512
    d_z: int = 2
    validation_fraction: float = 0.1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8


@dataclass(frozen=True)
class BalSettings:
    initial_design_size: int = 10
    max_iterations: int = 290
    kl_threshold: float = 0.02
    kl_window: int = 5
    quadrature_grid: int = 81
    search_half_width: float = 4.0
    ucb_kappa: float = 2.0


@dataclass(frozen=True)
class McmcSettings:
    chain_length: int = 10000
    n_chains: int = 2
    burn_in_fraction: float = 0.2
    thin: int = 2
    target_acceptance: float = 0.22
    pilot_length: int = 500
    max_pilots: int = 20
    pilot_bal_iterations: int = 30
    surrogate_chain_length: int = 10000


@dataclass(frozen=True)
class CaseSpec:
    sector_ids: Tuple[int, ...]
    severity: float

    def build(self) -> SectorSpec:
        return SectorSpec(frozenset(self.sector_ids), self.severity)


def _default_cases() -> List[CaseSpec]:
    return [
        CaseSpec((0,), 0.50),
        CaseSpec((1, 2), 0.45),
        CaseSpec((3,), 0.40),
        CaseSpec((4, 5), 0.50),
        CaseSpec((6,), 0.45),
        CaseSpec((7, 0), 0.40),
        CaseSpec((2, 3, 4), 0.50),
        CaseSpec((5,), 0.50),
        CaseSpec((6, 7), 0.45),
        CaseSpec((1,), 0.40),
    ]


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "desk-scale"
    seed: int = 2021
    output_dir: str = "runs/desk-scale"
    workers: int = 1
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    training_geometry: Optional[GeometryConfig] = None
    ap_params: ApParamsConfig = field(default_factory=ApParamsConfig)
    stimulus: StimulusConfig = field(default_factory=StimulusConfig)
    lead_field: LeadFieldConfig = field(default_factory=LeadFieldConfig)
    training_set: TrainingSetConfig = field(default_factory=TrainingSetConfig)
    vae: VaeConfig = field(default_factory=VaeConfig)
    snr_db: float = 20.0
    bal: BalSettings = field(default_factory=BalSettings)
    mcmc: McmcSettings = field(default_factory=McmcSettings)
    cases: List[CaseSpec] = field(default_factory=_default_cases)

    @property
    def output_path(self) -> Path:
        return Path(self.output_dir)

    def estimation_geometry(self) -> GridGeometry:
        return self.geometry.build()

    def vae_geometry(self) -> GridGeometry:
        """Lattice the VAE is trained on; the estimation lattice unless a separate one is set"""
        return (self.training_geometry or self.geometry).build()

    def size_range(self) -> Tuple[int, int]:
        return default_size_range(self.vae_geometry(), tuple(self.training_set.size_fraction_range))

    def train_config(self) -> TrainConfig:
        v = self.vae
        return TrainConfig(
            learning_rate=v.learning_rate,
            batch_size=v.batch_size,
            epochs=v.epochs,
            adam_beta1=v.adam_beta1,
            adam_beta2=v.adam_beta2,
            adam_eps=v.adam_eps,
            seed=derive_seed(self.seed, "vae"),
            hidden=v.hidden,
            d_z=v.d_z,
            validation_fraction=v.validation_fraction,
        )

    def search_box(self) -> SearchBox:
        return SearchBox.symmetric(self.vae.d_z, self.bal.search_half_width)

    def acquisition(self, method: str) -> AcquisitionKind:
        kinds = {
            "bal-entropy": AcquisitionKind.entropy(),
            "bal-variance": AcquisitionKind.variance(),
            "bal-ucb": AcquisitionKind.ucb(self.bal.ucb_kappa),
        }
        if method not in kinds:
            raise ConfigError(f"No acquisition for method '{method}'")
        return kinds[method]

    def bal_config(self, kind: AcquisitionKind, seed: int, **overrides) -> BalConfig:
        b = self.bal
        settings = dict(
            kind=kind,
            initial_design_size=b.initial_design_size,
            max_iterations=b.max_iterations,
            kl_threshold=b.kl_threshold,
            kl_window=b.kl_window,
            quadrature_grid=b.quadrature_grid,
            seed=seed,
            search_half_width=b.search_half_width,
        )
        settings.update(overrides)
        return BalConfig(**settings)

    def to_dict(self) -> Dict:
        return dataclasses.asdict(self)


def derive_seed(master_seed: int, *labels) -> int:
    """Deterministic 63-bit sub-seed for a label path, e.g. derive_seed(2021, "case", 3, "bal-entropy")"""
    key = "/".join([str(int(master_seed))] + [str(label) for label in labels])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def _build(cls, data, section: str):
    """Instantiate a config dataclass from a mapping, rejecting unknown keys"""
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"Section '{section}' must be an object")
    types = {f.name: f.type for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(types))
    if unknown:
        raise ConfigError(f"Unknown key(s) in '{section}': {', '.join(unknown)}")
    try:
        # YAML reads exponent literals without a dot (1e-8) as strings
        values = {k: float(v) if types[k] is float and isinstance(v, str) else v for k, v in data.items()}
        return cls(**values)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"Invalid '{section}' section: {err}") from err


def _validate(cfg: ExperimentConfig):
    """Build every runtime object once so that invalid settings fail at load time"""
    try:
        geometry = cfg.estimation_geometry()
        vae_geometry = cfg.vae_geometry()
        params = cfg.ap_params.build()
        params.check_stability(geometry)
        params.check_stability(vae_geometry)
        stim = cfg.stimulus.build(geometry)
        stim.patch(geometry)
        lo, hi = cfg.training_set.size_fraction_range
        if not 0.0 < lo <= hi < 1.0:
            raise ValueError("size_fraction_range must satisfy 0 < lo <= hi < 1")
        if cfg.training_set.count < 1:
            raise ValueError("training_set.count must be >= 1")
        if cfg.lead_field.n_leads < 1:
            raise ValueError("lead_field.n_leads must be >= 1")
        cfg.train_config()
        for method in ("bal-entropy", "bal-variance", "bal-ucb"):
            cfg.bal_config(cfg.acquisition(method), 0)
        cfg.search_box()
        m = cfg.mcmc
        if m.n_chains < 2 or m.chain_length < 10 or m.thin < 1 or not 0.0 <= m.burn_in_fraction < 1.0:
            raise ValueError("mcmc needs n_chains >= 2, chain_length >= 10, thin >= 1, burn_in_fraction in [0, 1)")
        if not 0.0 < m.target_acceptance < 1.0:
            raise ValueError("mcmc.target_acceptance must lie in (0, 1)")
        if m.pilot_length < 1 or m.max_pilots < 1 or m.surrogate_chain_length < 10 or m.pilot_bal_iterations < 0:
            raise ValueError("mcmc pilot and surrogate settings out of range")
        if cfg.workers < 1:
            raise ValueError("workers must be >= 1")
        if not np.isfinite(cfg.snr_db):
            raise ValueError("snr_db must be finite; the likelihood needs a positive noise level")
        if not cfg.cases:
            raise ValueError("at least one case is required")
        for case in cfg.cases:
            case.build()
    except ConfigError:
        raise
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from err


def experiment_config_from_dict(data: Dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("Experiment configuration must be an object")
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"Unknown top-level key(s): {', '.join(unknown)}")

    sections = {
        "geometry": GeometryConfig,
        "ap_params": ApParamsConfig,
        "stimulus": StimulusConfig,
        "lead_field": LeadFieldConfig,
        "training_set": TrainingSetConfig,
        "vae": VaeConfig,
        "bal": BalSettings,
        "mcmc": McmcSettings,
    }
    kwargs = {key: value for key, value in data.items() if key not in sections and key not in ("cases", "training_geometry")}
    for key, cls in sections.items():
        if key in data:
            kwargs[key] = _build(cls, data[key], key)
    if data.get("training_geometry") is not None:
        kwargs["training_geometry"] = _build(GeometryConfig, data["training_geometry"], "training_geometry")
    if "training_set" in kwargs:
        kwargs["training_set"] = dataclasses.replace(
            kwargs["training_set"], size_fraction_range=tuple(kwargs["training_set"].size_fraction_range)
        )
    if "cases" in data:
        if not isinstance(data["cases"], list):
            raise ConfigError("'cases' must be a list")
        kwargs["cases"] = [
            dataclasses.replace(c, sector_ids=tuple(c.sector_ids))
            for c in (_build(CaseSpec, case, f"cases[{i}]") for i, case in enumerate(data["cases"]))
        ]
    try:
        cfg = ExperimentConfig(**kwargs)
    except TypeError as err:
        raise ConfigError(str(err)) from err
    _validate(cfg)
    return cfg


def load_experiment_config(
    path: Optional[Path] = None, output_dir: Optional[str] = None, seed: Optional[int] = None
) -> ExperimentConfig:
    """
    Load and validate an experiment configuration.

    Args:
        path: JSON (or YAML) file; the bundled default when None
        output_dir: Overrides the file and BAL_OUTPUT_DIR
        seed: Overrides the master seed

    Returns:
        Validated ExperimentConfig
    """
    path = Path(path) if path is not None else DEFAULT_CONFIG_PATH
    if not path.exists():
        raise ConfigError(f"Config not found at {path}")
    try:
        with open(path, "r") as f:
            data = yaml.safe_load(f)
    except yaml.YAMLError as err:
        raise ConfigError(f"Could not parse {path}: {err}") from err

    data = dict(data or {})
    if os.getenv(ENV_OUTPUT_DIR):
        data["output_dir"] = os.environ[ENV_OUTPUT_DIR]
    if os.getenv(ENV_WORKERS):
        try:
            data["workers"] = int(os.environ[ENV_WORKERS])
        except ValueError as err:
            raise ConfigError(f"{ENV_WORKERS} must be an integer") from err
    if output_dir is not None:
        data["output_dir"] = str(output_dir)
    if seed is not None:
        data["seed"] = int(seed)

    cfg = experiment_config_from_dict(data)
    logger.info(f"[ExperimentConfig] Loaded '{cfg.name}' from {path}: {len(cfg.cases)} cases, seed {cfg.seed}")
    return cfg


def with_overrides(cfg: ExperimentConfig, output_dir: Optional[str] = None, seed: Optional[int] = None) -> ExperimentConfig:
    """Copy of ``cfg`` with command-line overrides applied and revalidated"""
    if output_dir is None and seed is None:
        return cfg
    data = cfg.to_dict()
    if output_dir is not None:
        data["output_dir"] = str(output_dir)
    if seed is not None:
        data["seed"] = int(seed)
    return experiment_config_from_dict(data)


def config_digest(cfg: ExperimentConfig) -> str:
    """SHA-256 of the canonical JSON form of a configuration; output_dir and workers do not change results"""
    settings = {k: v for k, v in cfg.to_dict().items() if k not in ("output_dir", "workers")}
    canonical = json.dumps(settings, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


# Global singleton instance
_config_instance = None


def get_experiment_config() -> ExperimentConfig:
    """Get the global ExperimentConfig instance"""
    global _config_instance
    if _config_instance is None:
        load_dotenv()
        _config_instance = load_experiment_config(os.getenv(ENV_CONFIG) or None)
    return _config_instance
