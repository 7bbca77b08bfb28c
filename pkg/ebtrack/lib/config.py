"""Run configuration: every tracker hyperparameter as a named, validated key."""
import math
from pathlib import Path
from typing import Any, Literal, Mapping, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from ..utils import ConfigError, describe_validation_error

CandidateSet = Literal["R", "E", "E+R"]

SCHEMA_VERSION = 1


class EdgeConfig(BaseModel):
    """
    Edge extraction and grouping constants of the edge-box procedure.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    edge_threshold: float = Field(default=0.1, gt=0.0, lt=1.0)
    edge_turn_budget: float = Field(default=math.pi / 2, gt=0.0)
    affinity_gamma: float = Field(default=2.0, gt=0.0)
    affinity_floor: float = Field(default=0.05, ge=0.0, lt=1.0)
    affinity_radius: int = Field(default=2, ge=1)


class ProposalConfig(BaseModel):
    """
    Sliding-window proposal generation, scoring and suppression.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    step_alpha: float = Field(default=0.85, gt=0.0, lt=1.0)
    nms_beta: float = Field(default=0.8, gt=0.0, lt=1.0)
    area_min: float = Field(default=0.5, gt=0.0)
    area_max: float = Field(default=2.0, gt=0.0)
    objectness_floor: float = Field(default=0.005, ge=0.0)
    max_proposals: int = Field(default=200, ge=1)
    local_radius: float = Field(default=30.0, gt=0.0)
    local_count: int = Field(default=80, ge=1)
    dense_step: float = Field(default=2.0, gt=0.0)
    aspect_steps: int = Field(default=4, ge=0)
    kappa: float = Field(default=1.5, gt=0.0)
    chain_floor: float = Field(default=0.05, ge=0.0, lt=1.0)
    prerank_limit: Optional[int] = Field(default=500, ge=1)
    score_chunk: int = Field(default=512, ge=1)

    @model_validator(mode="after")
    def _check_area_bounds(self) -> "ProposalConfig":
        if self.area_min >= self.area_max:
            raise ValueError("area_min must be smaller than area_max")
        return self


class RerankConfig(BaseModel):
    """
    Instance-specific re-ranker: feature layout and Pegasos schedule.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    rerank_enabled: bool = True
    rerank_layout: Literal["haar10-v1"] = "haar10-v1"
    rerank_lambda: float = Field(default=1e-3, gt=0.0)
    rerank_init_epochs: int = Field(default=50, ge=1)
    rerank_update_epochs: int = Field(default=5, ge=1)
    rerank_update_period: int = Field(default=5, ge=1)
    rerank_neg_overlap: float = Field(default=0.5, gt=0.0, le=1.0)
    rerank_pool_size: int = Field(default=200, ge=1)
    rerank_update_pool: Literal["objectness", "reranked"] = "objectness"
    rerank_standardize: bool = False


class TrackerConfig(BaseModel):
    """
    Core tracker keys: structured SVM, features, decision rule and the
    candidate-set selector of the update/test stages.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    tracker: Literal["ebt", "ncc_eb"] = "ebt"
    svm_c: float = Field(default=100.0, gt=0.0)
    svm_budget: int = Field(default=100, ge=2)
    svm_reprocess: int = Field(default=10, ge=0)
    svm_optimize_steps: int = Field(default=10, ge=0)
    patch_size: int = Field(default=60, ge=5)
    pyramid_levels: int = Field(default=5, ge=1)
    histogram_bins: int = Field(default=16, ge=2, le=256)
    feature_channels: Literal["rgb", "gray"] = "rgb"
    smoothness_weight: float = Field(default=0.1, ge=0.0)
    use_smoothness: bool = True
    test_set: CandidateSet = "E"
    update_set: CandidateSet = "E+R"


class RunConfig(EdgeConfig, ProposalConfig, RerankConfig, TrackerConfig):
    """
    Flat, versioned run configuration. Defaults are the published operating
    point; every key is addressable from the command line with --set.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    schema_version: Literal[1] = SCHEMA_VERSION
    seed: int = 0
    input_path: Optional[str] = None
    output_path: Optional[str] = None


def load_config(path: Optional[Path]) -> RunConfig:
    """
    Reads a JSON config file; no path means defaults.
    """
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        return RunConfig.model_validate_json(text)
    except ValidationError as exc:
        raise ConfigError(f"{path}: {describe_validation_error(exc)}") from exc


def apply_overrides(cfg: RunConfig, overrides: Mapping[str, Any]) -> RunConfig:
    """
    Returns a re-validated copy of `cfg` with `overrides` applied.
    """
    if not overrides:
        return cfg
    unknown = sorted(set(overrides) - set(RunConfig.model_fields))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    try:
        return RunConfig.model_validate({**cfg.model_dump(), **overrides})
    except ValidationError as exc:
        raise ConfigError(describe_validation_error(exc)) from exc


def parse_assignments(pairs: "tuple[str, ...]") -> dict:
    """
    Turns ("key=value", ...) into a dict, letting pydantic coerce the strings.
    """
    result = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep or not key:
            raise ConfigError(f"expected key=value, got {pair!r}")
        result[key.strip()] = None if value.strip().lower() in ("none", "null") else value.strip()
    return result
