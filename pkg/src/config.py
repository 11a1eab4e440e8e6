"""
Experiment configuration: nested dataclasses loaded from and dumped to YAML
"""

import hashlib
import logging
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from typing import Any, Dict, Optional, Tuple

import yaml

from src.errors import ConfigurationError
from src.mpcc.costs import CostWeights
from src.mpcc.planner import SelectionConfig, get_variant
from src.mpcc.solver import SolverConfig
from src.prediction.gmm_predictor import PredictionConfig
from src.selection.decision_postponing import PostponingConfig
from src.sim.scenarios import SCENARIO_KINDS, CUSTOM, IntersectionConfig, MergingConfig
from src.vehicle.bicycle_model import VehicleLimits

logger = logging.getLogger(__name__)

ALL_VARIANTS = ("full", "cmpcc", "scmpcc", "noss2", "noss3", "noss4", "nodp")


@dataclass(frozen=True)
class MonteCarloConfig:
    """
    Args:
        n_runs: Number of sampled merging worlds
        workers: Worker processes; 1 runs in-process
        trace_runs: Traces, speed profiles and branches are kept for the first ``trace_runs`` worlds
        branching_sweep: B_th values of the sensitivity sweep; empty disables it
    """

    n_runs: int = 100
    workers: int = 1
    trace_runs: int = 1
    branching_sweep: Tuple[float, ...] = ()

    def __post_init__(self):
        if self.n_runs < 1:
            raise ConfigurationError("monte_carlo.n_runs", "must be >= 1")
        if self.workers < 1:
            raise ConfigurationError("monte_carlo.workers", "must be >= 1")
        if self.trace_runs < 0:
            raise ConfigurationError("monte_carlo.trace_runs", "must be >= 0")
        if any(not b > 0 for b in self.branching_sweep):
            raise ConfigurationError("monte_carlo.branching_sweep", "thresholds must be > 0")


@dataclass(frozen=True)
class ExperimentConfig:
    """
    Args:
        scenario: ``intersection``, ``merging`` or ``custom``
        variants: Planner variants to run
        horizon: Number of states N per branch
        dt: Step (s)
        seed: Master seed
        output_dir: Where tables, traces and the manifest go
        scenario_file: YAML scenario for ``custom``
        fallback_decel: Deceleration of the braking fallback (m/s^2)
    """

    scenario: str = "intersection"
    variants: Tuple[str, ...] = ALL_VARIANTS
    horizon: int = 40
    dt: float = 0.1
    seed: int = 0
    output_dir: str = "results"
    scenario_file: Optional[str] = None
    fallback_decel: float = 2.5
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    postponing: PostponingConfig = field(default_factory=PostponingConfig)
    prediction: PredictionConfig = field(default_factory=PredictionConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    weights: CostWeights = field(default_factory=CostWeights)
    limits: VehicleLimits = field(default_factory=VehicleLimits)
    intersection: IntersectionConfig = field(default_factory=IntersectionConfig)
    merging: MergingConfig = field(default_factory=MergingConfig)
    monte_carlo: MonteCarloConfig = field(default_factory=MonteCarloConfig)

    def __post_init__(self):
        if self.scenario not in SCENARIO_KINDS:
            raise ConfigurationError("scenario", f"must be one of {list(SCENARIO_KINDS)}")
        if not self.variants:
            raise ConfigurationError("variants", "at least one variant is required")
        for name in self.variants:
            get_variant(name)
        if not isinstance(self.horizon, int) or self.horizon < 2:
            raise ConfigurationError("horizon", "must be an integer >= 2")
        if not self.dt > 0:
            raise ConfigurationError("dt", "must be > 0")
        if not self.fallback_decel > 0:
            raise ConfigurationError("fallback_decel", "must be > 0")
        if self.scenario == CUSTOM:
            if not self.scenario_file:
                raise ConfigurationError("scenario_file", "required for custom scenarios")
            if not os.path.exists(self.scenario_file):
                raise ConfigurationError("scenario_file", f"file not found: {self.scenario_file}")
        if self.prediction.file and not os.path.exists(self.prediction.file):
            raise ConfigurationError("prediction.file", f"file not found: {self.prediction.file}")


def _coerce(value):
    if isinstance(value, list):
        return tuple(_coerce(v) for v in value)
    return value


def build_section(cls, data: Optional[Dict[str, Any]], where: str = ""):
    """
    Instantiate dataclass ``cls`` from a mapping, recursing into nested dataclass fields

    Unknown keys are ignored with a warning that lists the accepted keys.
    """
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigurationError(where or "config", "must be a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        logger.warning(f"Ignoring unknown keys {unknown} in {where or 'config'}; accepted keys: {sorted(known)}")
    kwargs = {}
    for name, value in data.items():
        if name not in known:
            continue
        path = f"{where}.{name}" if where else name
        if is_dataclass(known[name].type):
            kwargs[name] = build_section(known[name].type, value, path)
        else:
            kwargs[name] = _coerce(value)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigurationError(where or "config", str(e)) from e


def _plain(value):
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    return value


def config_to_dict(cfg: ExperimentConfig) -> Dict[str, Any]:
    return _plain(asdict(cfg))


def dump_config(cfg: ExperimentConfig) -> str:
    """Fully defaulted YAML of ``cfg``; loading it gives back an equal config"""
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False, default_flow_style=None)


def config_from_dict(data: Optional[Dict[str, Any]]) -> ExperimentConfig:
    return build_section(ExperimentConfig, data or {})


def load_config(path: str) -> ExperimentConfig:
    """
    Load an experiment configuration

    Args:
        path (str): YAML file

    Returns:
        ExperimentConfig: Validated config with every omitted value defaulted

    Raises:
        ConfigurationError: on unreadable files and invalid values
    """
    if not os.path.exists(path):
        raise ConfigurationError("config", f"file not found: {path}")
    try:
        with open(path, "r") as f:
            data = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise ConfigurationError("config", f"invalid YAML: {e}") from e
    cfg = config_from_dict(data)
    logger.info(f"Loaded {cfg.scenario} experiment config from {path}")
    return cfg


def config_hash(cfg: ExperimentConfig) -> str:
    canonical = yaml.safe_dump(config_to_dict(cfg), sort_keys=True)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
