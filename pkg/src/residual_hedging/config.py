"""Experiment configuration: a YAML file validated against a strict schema.

Every field has a default, so an empty file is a valid (GBM, Fea2, both
objectives) experiment.  ``effective_config`` returns the fully resolved
settings that are written next to each run's outputs.
"""
from __future__ import annotations

import hashlib
from pathlib import Path
from typing import List, Literal, Optional, Tuple

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .data import FEATURE_SETS, FilterPolicy, SplitPlan
from .errors import ConfigError
from .heston import HestonParams
from .market import GbmParams, Lattice


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class GbmSection(_Strict):
    s0: float = 100.0
    drift: float = 0.02
    vol: float = 0.2
    rate: float = 0.02

    def params(self) -> GbmParams:
        return GbmParams(**self.model_dump())


class HestonSection(_Strict):
    s0: float = 100.0
    v0: float = 0.04
    kappa: float = 5.0
    theta_bar: float = 0.04
    xi: float = 0.6
    rho: float = -0.7
    rate: float = 0.02

    def params(self) -> HestonParams:
        return HestonParams(**self.model_dump())


class LatticeSection(_Strict):
    moneyness: List[float] = Field(default_factory=lambda: list(Lattice().moneyness))
    tenor_months: List[int] = Field(default_factory=lambda: list(Lattice().tenor_months))

    def lattice(self) -> Lattice:
        return Lattice(tuple(self.moneyness), tuple(self.tenor_months))


class SourceSection(_Strict):
    kind: Literal["gbm", "heston", "csv"] = "gbm"
    days: int = Field(1260, ge=2)
    path: Optional[str] = None
    rate: float = 0.0              # csv only: the canonical CSV carries no rate column
    substeps: int = Field(8, ge=1)
    gbm: GbmSection = Field(default_factory=GbmSection)
    heston: HestonSection = Field(default_factory=HestonSection)
    lattice: LatticeSection = Field(default_factory=LatticeSection)

    @model_validator(mode="after")
    def _csv_needs_path(self):
        if self.kind == "csv" and not self.path:
            raise ValueError("source.path is required when source.kind is 'csv'")
        return self


class FilterSection(_Strict):
    min_ttm_days: float = 14
    call_delta_range: Tuple[float, float] = (0.05, 0.95)
    put_delta_range: Tuple[float, float] = (-0.95, -0.05)

    def policy(self) -> FilterPolicy:
        return FilterPolicy(self.min_ttm_days, tuple(self.call_delta_range), tuple(self.put_delta_range))


class NetSection(_Strict):
    hidden_layers: int = Field(3, ge=1)
    hidden_width: int = Field(128, ge=1)
    batch_norm: bool = True


class TrainSection(_Strict):
    batch_size: int = Field(1024, ge=2)
    max_epochs: int = Field(40, ge=1)
    patience: int = Field(5, ge=1)
    learning_rate: float = Field(1e-4, gt=0)
    clip_norm: float = Field(1.0, gt=0)


class SplitSection(_Strict):
    train_end_date: Optional[int] = None     # default: all but the last 252 trading days
    train_start_date: Optional[int] = None
    val_fraction: float = Field(0.2, gt=0, lt=1)


class ExperimentConfig(_Strict):
    source: SourceSection = Field(default_factory=SourceSection)
    filters: FilterSection = Field(default_factory=FilterSection)
    horizon_days: int = Field(1, ge=1)
    option_kind: Literal["call", "put", "both"] = "call"
    features: List[str] = Field(default_factory=lambda: ["Fea2"])
    objectives: List[Literal["direct", "residual"]] = Field(default_factory=lambda: ["direct", "residual"])
    net: NetSection = Field(default_factory=NetSection)
    train: TrainSection = Field(default_factory=TrainSection)
    split: SplitSection = Field(default_factory=SplitSection)
    output_dir: str = "runs/experiment"
    seed: int = Field(0, ge=0)
    workers: int = Field(1, ge=1)

    @field_validator("features")
    @classmethod
    def _known_features(cls, v):
        unknown = [f for f in v if f not in FEATURE_SETS]
        if unknown:
            raise ValueError(f"unknown feature models {unknown}; choose from {list(FEATURE_SETS)}")
        if not v or len(set(v)) != len(v):
            raise ValueError("features must be a nonempty list without duplicates")
        return v

    @field_validator("objectives")
    @classmethod
    def _nonempty(cls, v):
        if not v or len(set(v)) != len(v):
            raise ValueError("objectives must be a nonempty list without duplicates")
        return v

    @property
    def kinds(self) -> tuple:
        return ("call", "put") if self.option_kind == "both" else (self.option_kind,)

    def split_plan(self, last_date: int) -> SplitPlan:
        end = self.split.train_end_date
        if end is None:
            end = last_date - 252
        return SplitPlan(end, self.split.val_fraction, derive_seed(self.seed, "split"),
                         self.split.train_start_date)


def derive_seed(master: int, label: str) -> int:
    """Stage seed from the master seed and a stage label (sha256, first 8 bytes)."""
    digest = hashlib.sha256(f"{master}/{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def load_config(path=None, overrides: Optional[dict] = None) -> ExperimentConfig:
    """Read and validate a YAML config; ``overrides`` are merged on top (nested dicts merge)."""
    raw = {}
    if path is not None:
        path = Path(path)
        try:
            raw = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    if overrides:
        raw = _merge(raw, overrides)
    return validate_config(raw)


def validate_config(raw: dict) -> ExperimentConfig:
    try:
        cfg = ExperimentConfig.model_validate(raw)
        # domain checks that live on the model objects themselves
        cfg.source.lattice.lattice()
        cfg.source.gbm.params()
        cfg.source.heston.params()
        cfg.filters.policy()
        if cfg.train.patience > cfg.train.max_epochs:
            raise ValueError("train.patience must not exceed train.max_epochs")
    except ValidationError as exc:
        raise ConfigError(_describe(exc)) from exc
    except (ValueError, ConfigError) as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.source.kind == "csv" and not Path(cfg.source.path).is_file():
        raise ConfigError(f"source.path {cfg.source.path!r} does not exist")
    return cfg


def effective_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=False, default_flow_style=None)


def _describe(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        loc = ".".join(str(x) for x in err["loc"]) or "<root>"
        parts.append(f"{loc}: {err['msg']}")
    return "; ".join(parts)


def _merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out
