"""Validated run configuration.

A run is described by one JSON document.  Unknown keys are rejected so a
typo cannot silently fall back to a default, and the accepted shape is
published as a JSON schema for external tooling.  Builder methods turn
the validated sections into the library's own domain objects.
"""

from __future__ import annotations

import json
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from .diffusion import VpSchedule
from .driver import LoopConfig, OptimizerState, ResamplePolicy
from .evaluation import SpceConfig
from .models import LinearGaussian1D, ModelSpec, SourceLocation
from .samplers import StepSchedule

SCHEMA_VERSION = 1


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelSection(_Section):
    """Which experiment model to run and its constants."""

    id: Literal["linear_gaussian", "source_location"] = "linear_gaussian"
    a: float = 1.0
    sigma: Optional[float] = Field(default=None, gt=0)
    n_sources: int = Field(default=2, ge=1)
    alpha: float = 1.0
    m: float = 1e-4
    b: float = 0.1
    design_bounds: Optional[list[tuple[float, float]]] = None

    def build(self) -> ModelSpec:
        if self.id == "linear_gaussian":
            bounds = self.design_bounds[0] if self.design_bounds else (-2.0, 2.0)
            return LinearGaussian1D(self.a, self.sigma or 1.0, design_bounds=bounds)
        kwargs = dict(
            n_sources=self.n_sources,
            alpha=self.alpha,
            m=self.m,
            b=self.b,
            sigma=self.sigma or 0.5,
        )
        if self.design_bounds:
            kwargs["design_bounds"] = self.design_bounds
        return SourceLocation(**kwargs)


class OptimizerSection(_Section):
    lr0: float = Field(default=1e-2, gt=0)
    decay: float = Field(default=0.98, gt=0, le=1)
    epoch_len: int = Field(default=100, ge=1)

    def build(self, bounds: np.ndarray) -> OptimizerState:
        return OptimizerState(bounds, lr0=self.lr0, decay=self.decay, epoch_len=self.epoch_len)


class SamplerSection(_Section):
    """Langevin step-size schedule for both particle clouds."""

    gamma0: float = Field(default=1e-2, gt=0)
    decay: float = Field(default=1.0, gt=0, le=1)
    floor: float = Field(default=0.0, ge=0)

    def build(self) -> StepSchedule:
        return StepSchedule(self.gamma0, self.decay, self.floor)


class LoopSection(_Section):
    driver: Literal["single", "nested"] = "single"
    t_outer: int = Field(default=5000, ge=0)
    s_joint: int = Field(default=50, ge=1)
    s_pooled: int = Field(default=50, ge=1)
    n_joint: int = Field(default=200, ge=1)
    n_contrastive: int = Field(default=200, ge=1)
    estimator: Literal["pooled_snis", "prior_is"] = "pooled_snis"
    reinit_clouds: bool = True
    resample_enabled: bool = True
    resample_threshold: float = Field(default=0.5, gt=0, le=1)

    def build(self, schedule: StepSchedule) -> LoopConfig:
        return LoopConfig(
            t_outer=self.t_outer,
            s_joint=self.s_joint,
            s_pooled=self.s_pooled,
            n_joint=self.n_joint,
            n_contrastive=self.n_contrastive,
            estimator=self.estimator,
            step_schedule=schedule,
            reinit_clouds=self.reinit_clouds,
            resample=ResamplePolicy(self.resample_enabled, self.resample_threshold),
        )


class DiffusionSection(_Section):
    """Forward noising schedule for the diffusion samplers."""

    b_min: float = Field(default=0.2, gt=0)
    b_max: float = Field(default=5.0, gt=0)
    t_start: float = 0.0
    t_end: float = 2.0
    n_steps: int = Field(default=200, ge=1)

    def build(self) -> VpSchedule:
        return VpSchedule(self.b_min, self.b_max, self.t_start, self.t_end, self.n_steps)


class EvaluationSection(_Section):
    n_contrastive: int = Field(default=10_000, ge=1)
    replications: int = Field(default=1, ge=1)
    w2_samples: int = Field(default=4000, ge=1)

    def build(self) -> SpceConfig:
        return SpceConfig(self.n_contrastive, self.replications)


class SequentialSection(_Section):
    n_experiments: int = Field(default=10, ge=0)
    theta_star: Optional[list[float]] = None
    baseline: bool = False
    resume_from: Optional[str] = None


class DiagnosticsSection(_Section):
    estimators: list[Literal["pooled_snis", "nested_mc", "prior_is", "oracle"]] = Field(
        default_factory=lambda: ["pooled_snis", "nested_mc", "prior_is"]
    )
    xi_grid: list[float] = Field(default_factory=lambda: [0.5, 1.0, 2.0])
    budgets: list[tuple[int, int]] = Field(default_factory=lambda: [(512, 512)])
    reps: int = Field(default=200, ge=2)


class RunConfig(_Section):
    """Top-level document: every command reads the sections it needs."""

    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    out_dir: str = "codiff-out"
    threads: Optional[int] = Field(default=None, ge=1)
    model: ModelSection = Field(default_factory=ModelSection)
    optimizer: OptimizerSection = Field(default_factory=OptimizerSection)
    sampler: SamplerSection = Field(default_factory=SamplerSection)
    loop: LoopSection = Field(default_factory=LoopSection)
    diffusion: DiffusionSection = Field(default_factory=DiffusionSection)
    evaluation: EvaluationSection = Field(default_factory=EvaluationSection)
    sequential: SequentialSection = Field(default_factory=SequentialSection)
    diagnostics: DiagnosticsSection = Field(default_factory=DiagnosticsSection)

    @field_validator("schema_version")
    @classmethod
    def _known_version(cls, v: int) -> int:
        if v != SCHEMA_VERSION:
            raise ValueError(f"schema_version {v} not supported; this build reads {SCHEMA_VERSION}")
        return v

    def design_bounds(self) -> np.ndarray:
        return self.build_model().default_design_bounds

    def build_model(self) -> ModelSpec:
        return self.model.build()


def load_config(path) -> RunConfig:
    """Parse and validate a JSON config file."""
    with open(path) as fh:
        return RunConfig.model_validate(json.load(fh))


def config_schema() -> dict:
    """The published JSON schema for run configuration documents."""
    return RunConfig.model_json_schema()
