"""
Experiment configuration.

Settings come from the environment (a .env file is honored), experiment parameters
from a YAML file with sections task, model, train, protocol, sweep, mitigation and
pairwise, and command-line overrides of the form section.key=value.
"""

import copy
import hashlib
import logging
import os
from typing import Any, Dict, List, Literal, Optional, Sequence

import orjson
import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, Field, ValidationError, model_validator

from grouped_datasets import TaskSpec
from lab_errors import ConfigError, LabError, UsageError
from mlp_network import ARCHITECTURE_PRESETS, Activation, GradPenalty, MlpSpec, TrainConfig

logger = logging.getLogger("amplification-lab.config")

load_dotenv()

DEFAULT_OUTPUT_ROOT = "runs"
DEFAULT_LOG_LEVEL = "WARNING"
# None: every checkpoint step shared by all tasks
DEFAULT_SWEEP_GRIDS: Dict[str, Optional[List[float]]] = {
    "width": [16, 32, 64, 128],
    "step": None,
    "weight_decay": [0.0, 0.0001, 0.001, 0.01],
    "grad_penalty_c": [0.25, 0.5, 1.0, 2.0],
}


class LabSettings(BaseModel):
    output_root: str = Field(DEFAULT_OUTPUT_ROOT, description="Root directory for run-id directories")
    log_level: str = Field(DEFAULT_LOG_LEVEL, description="Logging level when -v is not given")
    jobs: int = Field(1, ge=1, description="Default parallelism bound of the job queue")


def lab_settings() -> LabSettings:
    jobs = os.getenv("AMPLAB_JOBS", "1")
    try:
        return LabSettings(output_root=os.getenv("AMPLAB_OUTPUT_ROOT", DEFAULT_OUTPUT_ROOT),
                           log_level=os.getenv("AMPLAB_LOG_LEVEL", DEFAULT_LOG_LEVEL).upper(),
                           jobs=int(jobs))
    except (ValueError, ValidationError) as e:
        raise ConfigError(f"Invalid AMPLAB_JOBS value '{jobs}': {e}") from e


class TaskSource(BaseModel):
    kind: Literal["generator", "csv", "idx"] = Field("generator", description="Where task rows come from")
    generator: TaskSpec = Field(default_factory=TaskSpec)
    path: Optional[str] = Field(None, description="GroupedDataset CSV (kind=csv)")
    images_path: Optional[str] = Field(None, description="IDX image file (kind=idx)")
    labels_path: Optional[str] = Field(None, description="IDX label file (kind=idx)")
    pair_a: List[int] = Field(default_factory=lambda: [1, 7], description="Classes of the first group (kind=idx)")
    pair_b: List[int] = Field(default_factory=lambda: [0, 6], description="Classes of the second group (kind=idx)")
    class_names: Optional[List[str]] = Field(None, description="Display names of the IDX classes")

    @model_validator(mode="after")
    def _check_files(self) -> "TaskSource":
        required = {"csv": [self.path], "idx": [self.images_path, self.labels_path]}.get(self.kind, [])
        for path in required:
            if not path:
                raise ConfigError(f"task.kind={self.kind} needs its file paths set")
            if not os.path.exists(path):
                raise ConfigError(f"Task file not found: {path}")
        if self.kind == "idx" and (len(self.pair_a) != 2 or len(self.pair_b) != 2):
            raise ConfigError("task.pair_a and task.pair_b must each name two classes")
        return self


class ModelSection(BaseModel):
    preset: Optional[str] = Field(None, description="fc1, fc3 or fc5; overrides hidden_widths")
    hidden_widths: List[int] = Field(default_factory=lambda: [64])
    activation: Activation = "relu"
    input_batchnorm: bool = True

    @model_validator(mode="after")
    def _check_preset(self) -> "ModelSection":
        if self.preset is not None and self.preset not in ARCHITECTURE_PRESETS:
            raise ConfigError(f"Unknown model.preset '{self.preset}'; choose from {sorted(ARCHITECTURE_PRESETS)}")
        return self

    def build(self, input_dim: int, output_dim: int = 2) -> MlpSpec:
        widths = ARCHITECTURE_PRESETS[self.preset] if self.preset else self.hidden_widths
        return MlpSpec(input_dim=input_dim, hidden_widths=list(widths), output_dim=output_dim,
                       activation=self.activation, input_batchnorm=self.input_batchnorm)


class ProtocolSection(BaseModel):
    n_runs: int = Field(10, ge=1, description="Models per condition (N)")
    test_fraction: float = Field(0.2, gt=0, lt=1)
    jobs: Optional[int] = Field(None, ge=1, description="Parallelism bound; AMPLAB_JOBS when unset")
    balance: bool = Field(True, description="Balance groups with matched label histograms before auditing")
    separability_layout: Literal["within_group", "cross_group"] = "within_group"
    checkpoint: Literal["early_stopped", "final"] = Field(
        "early_stopped", description="Checkpoint whose disparities feed the amplification regression")


class SweepSection(BaseModel):
    m_tasks: int = Field(30, description="Tasks sampled per amplification sweep")
    task_sampler: Literal["teaser", "stitched"] = "teaser"
    frequency_grid: List[float] = Field(default_factory=lambda: [0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0],
                                        description="Complex-group frequencies the teaser sampler draws from")
    class_pool: Optional[List[int]] = Field(None, description="Classes the stitched sampler draws pairs from")
    variable: Literal["width", "step", "weight_decay", "grad_penalty_c"] = "width"
    grid: Optional[List[float]] = Field(None, description="Sweep values; DEFAULT_SWEEP_GRIDS[variable] when unset")

    def resolved_grid(self) -> Optional[List[float]]:
        return self.grid if self.grid is not None else DEFAULT_SWEEP_GRIDS[self.variable]


class MitigationSection(BaseModel):
    strategy: Literal["add_data", "oversample"] = "oversample"
    target_group: int = Field(1, ge=0)
    factor: float = Field(1.6, ge=1.0, description="Growth factor of the target group (add_data)")
    weight: float = Field(2.0, gt=0, description="Sampling weight of the target group (oversample)")


class PairwiseSection(BaseModel):
    models: List[ModelSection] = Field(
        default_factory=lambda: [ModelSection(hidden_widths=[64]), ModelSection(hidden_widths=[64, 64, 64])])
    num_classes: int = Field(6, ge=3)
    n_per_class: int = Field(100, ge=2)
    dim: int = Field(8, ge=1)
    spread: float = Field(1.5, ge=0)


class ExperimentConfig(BaseModel):
    seed: int = Field(0, ge=0, description="Root seed; every run seed is derived from it")
    task: TaskSource = Field(default_factory=TaskSource)
    model: ModelSection = Field(default_factory=ModelSection)
    train: TrainConfig = Field(default_factory=TrainConfig)
    protocol: ProtocolSection = Field(default_factory=ProtocolSection)
    sweep: SweepSection = Field(default_factory=SweepSection)
    mitigation: MitigationSection = Field(default_factory=MitigationSection)
    pairwise: PairwiseSection = Field(default_factory=PairwiseSection)
    output_dir: Optional[str] = Field(None, description="Run directory; <output root>/<run id> when unset")

    @property
    def n_runs(self) -> int:
        return self.protocol.n_runs

    @property
    def test_fraction(self) -> float:
        return self.protocol.test_fraction

    def jobs(self) -> int:
        return self.protocol.jobs or lab_settings().jobs


def _validate(payload: Dict[str, Any], source: str) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(payload)
    except ValidationError as e:
        problems = "; ".join(f"{'.'.join(str(part) for part in err['loc'])}: {err['msg']}" for err in e.errors())
        raise ConfigError(f"Invalid configuration in {source}: {problems}") from e


def load_config(path: Optional[str] = None) -> ExperimentConfig:
    """
    Load and validate a YAML experiment config; all defaults when `path` is None.

    Raises:
        ConfigError: missing file, malformed YAML or invalid values (message names the path).
    """
    if path is None:
        return ExperimentConfig()
    if not os.path.exists(path):
        raise ConfigError(f"Config file not found: {path}")
    try:
        with open(path) as handle:
            payload = yaml.safe_load(handle) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"Malformed YAML in {path}: {e}") from e
    if not isinstance(payload, dict):
        raise ConfigError(f"Config {path} must be a mapping of sections")
    logger.info(f"Loaded config from {path}")
    return _validate(payload, path)


def apply_overrides(config: ExperimentConfig, overrides: Sequence[str]) -> ExperimentConfig:
    """
    Apply `section.key=value` overrides; values are parsed as YAML scalars.

    Raises:
        UsageError: an override without '=' or a key path.
        ConfigError: an unknown key or an invalid value.
    """
    payload = config.model_dump(mode="json", by_alias=True)
    for override in overrides:
        if "=" not in override:
            raise UsageError(f"Override '{override}' must look like section.key=value")
        key, raw = override.split("=", 1)
        parts = key.strip().split(".")
        if not all(parts):
            raise UsageError(f"Override key '{key}' is malformed")
        if parts[-2:] == ["grad_penalty", "lambda"]:
            parts[-1] = "lam"
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as e:
            raise UsageError(f"Cannot parse override value '{raw}': {e}") from e

        node = payload
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                if part in node and node[part] is None:
                    node[part] = {}
                else:
                    raise ConfigError(f"Unknown config key '{key}'")
            node = node[part]
        # a penalty section switched on from null starts empty
        penalty_field = len(parts) > 1 and parts[-2] == "grad_penalty" and parts[-1] in GradPenalty.model_fields
        if parts[-1] not in node and not penalty_field:
            raise ConfigError(f"Unknown config key '{key}'")
        node[parts[-1]] = value
    return _validate(payload, "overrides")


def quick_preset(config: ExperimentConfig) -> ExperimentConfig:
    """Shrunken runs for smoke tests: N=2, 30 epochs, 8 tasks, 400 rows, checkpoints every 10 steps."""
    payload = copy.deepcopy(config.model_dump(mode="json", by_alias=True))
    payload["protocol"]["n_runs"] = 2
    payload["train"]["epochs"] = 30
    payload["train"]["eval_every"] = 10
    payload["sweep"]["m_tasks"] = 8
    payload["task"]["generator"]["n"] = 400
    return _validate(payload, "quick preset")


def config_hash(config: ExperimentConfig) -> str:
    """SHA-256 of the canonical JSON dump (sorted keys)."""
    payload = orjson.dumps(config.model_dump(mode="json", by_alias=True), option=orjson.OPT_SORT_KEYS)
    return hashlib.sha256(payload).hexdigest()


def resolve_config(path: Optional[str], overrides: Sequence[str] = (), quick: bool = False) -> ExperimentConfig:
    """Config file, then the quick preset, then explicit overrides (later wins)."""
    try:
        config = load_config(path)
        if quick:
            config = quick_preset(config)
        return apply_overrides(config, overrides) if overrides else config
    except LabError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid configuration: {e}") from e
