"""Experiment configuration: pydantic model, key=value text format and instance builders."""

import io
import logging
import os
from dataclasses import dataclass
from typing import Dict, List, Literal, Optional, Union

import numpy as np
from dotenv import dotenv_values, load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from backend.torus_core import (
    ConfigurationError,
    ConvolutionTerm,
    CouplingFunctional,
    GridField,
    LagrangianSpec,
    LinearTerm,
    TorusGrid,
)

logger = logging.getLogger(__name__)

load_dotenv()
OUTPUT_DIR_ENV = "FOLKLAB_OUTPUT_DIR"

PRESETS: Dict[str, Dict] = {
    "paper-instance": {"n_cells": 256, "potential": "half-cos", "coupling": "conv-cos", "e": "midpoint"},
    "flat": {"n_cells": 64, "potential": "flat", "coupling": "constant"},
    "strong-coupling": {"n_cells": 128, "potential": "half-cos", "coupling": "conv:1.0:0,1", "e": "midpoint"},
}

POTENTIAL_PRESETS = {"flat": [0.0], "cos": [0.0, 1.0, 0.0], "half-cos": [0.0, 0.5, 0.0]}
COUPLING_PRESETS = {"constant": "const:0", "linear-cos": "linear:0,1,0", "conv-cos": "conv:0.5:0,1"}

PayoffChoice = Literal["e_min", "midpoint", "e_mfg"]


def _default_output_dir() -> str:
    return os.getenv(OUTPUT_DIR_ENV, "runs")


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)

    preset: Optional[str] = None
    n_cells: int = Field(256, ge=8)
    potential: str = "half-cos"
    offset: Optional[float] = Field(None, ge=0.0)
    coupling: str = "conv-cos"
    coupling_offset: Optional[float] = None
    e: Union[float, PayoffChoice] = "midpoint"
    N: int = Field(32, ge=2)
    T: Union[float, Literal["auto"]] = 200.0
    delta: Union[float, Literal["auto"]] = "auto"
    n_penalization: Union[float, Literal["auto"]] = "auto"
    dt: float = Field(1e-3, gt=0.0, le=1e-2)
    horizon: float = Field(2000.0, gt=0.0)
    burn_in: float = Field(200.0, ge=0.0)
    n_runs: int = Field(64, ge=2)
    seed: int = Field(0, ge=0)
    output_dir: str = Field(default_factory=_default_output_dir)
    drift_cap: float = Field(8.0, gt=0.0)
    check_interval: float = Field(1.0, gt=0.0)
    margin: float = Field(0.01, ge=0.0)
    epsilon: float = Field(0.05, gt=0.0)
    n_jobs: int = 1
    cost_stride: int = Field(10, ge=1)
    n_sweep: List[int] = Field(default_factory=lambda: [8, 16, 32, 64])
    simulate_sweep: bool = False
    n_calibration: int = Field(200, ge=1)
    n_holdout: int = Field(50, ge=0)
    record_stride: int = Field(0, ge=0)

    @model_validator(mode="before")
    @classmethod
    def apply_preset(cls, data):
        if isinstance(data, dict) and data.get("preset"):
            name = data["preset"]
            if name not in PRESETS:
                raise ValueError(f"unknown preset '{name}', expected one of {sorted(PRESETS)}")
            merged = dict(PRESETS[name])
            merged.update({k: v for k, v in data.items() if v is not None and v != ""})
            return merged
        return data

    @field_validator("preset", "offset", "coupling_offset", mode="before")
    @classmethod
    def blank_is_none(cls, value):
        return None if value == "" else value

    @field_validator("n_sweep", mode="before")
    @classmethod
    def split_list(cls, value):
        if isinstance(value, str):
            return [int(v) for v in value.split(",") if v.strip()]
        return value

    @field_validator("T", "delta", "n_penalization")
    @classmethod
    def positive_or_auto(cls, value):
        if value != "auto" and not value > 0:
            raise ValueError("must be positive or 'auto'")
        return value

    @field_validator("n_sweep")
    @classmethod
    def ascending(cls, value):
        if value != sorted(value) or any(v < 2 for v in value):
            raise ValueError("n_sweep must be ascending with entries >= 2")
        return value

    @model_validator(mode="after")
    def check_times(self):
        if self.burn_in >= self.horizon:
            raise ValueError("burn_in must be shorter than the horizon")
        return self

    def to_text(self) -> str:
        """KEY=value lines, readable back with ``from_text``."""
        lines = []
        for name in type(self).model_fields:
            value = getattr(self, name)
            if value is None:
                text = ""
            elif isinstance(value, list):
                text = ",".join(str(v) for v in value)
            elif isinstance(value, float):
                text = repr(value)
            else:
                text = str(value)
            lines.append(f"{name.upper()}={text}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        values = dotenv_values(stream=io.StringIO(text))
        data = {k.lower(): v for k, v in values.items() if v is not None}
        if "n" in data:
            data["N"] = data.pop("n")
        if "t" in data:
            data["T"] = data.pop("t")
        return cls.load(data)

    @classmethod
    def from_file(cls, path: str) -> "ExperimentConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_text(fh.read())

    @classmethod
    def load(cls, data: Dict) -> "ExperimentConfig":
        try:
            return cls.model_validate(data)
        except ValidationError as exc:
            raise ConfigurationError(str(exc)) from exc

    def build_instance(self) -> "Instance":
        grid = TorusGrid(self.n_cells)
        potential = build_potential(self.potential, grid)
        lagrangian = LagrangianSpec.normalized(potential) if self.offset is None else _lagrangian(potential, self.offset)
        coupling = build_coupling(self.coupling, grid, self.coupling_offset)
        return Instance(grid, lagrangian, coupling)


def _lagrangian(potential: GridField, offset: float) -> LagrangianSpec:
    try:
        return LagrangianSpec(potential, offset)
    except ValueError as exc:
        raise ConfigurationError(str(exc)) from exc


@dataclass(frozen=True)
class Instance:
    grid: TorusGrid
    lagrangian: LagrangianSpec
    coupling: CouplingFunctional


def _coefficients(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigurationError(f"bad coefficient list '{text}'") from exc


def _number(text: str) -> float:
    try:
        return float(text)
    except ValueError as exc:
        raise ConfigurationError(f"bad number '{text}'") from exc


def trig_series(coeffs: List[float], x: np.ndarray) -> np.ndarray:
    """a0 + sum_k a_k cos(2 pi k x) + b_k sin(2 pi k x) from [a0, a1, b1, a2, b2, ...]."""
    out = np.full_like(x, coeffs[0] if coeffs else 0.0, dtype=float)
    for k, idx in enumerate(range(1, len(coeffs), 2), start=1):
        out += coeffs[idx] * np.cos(2 * np.pi * k * x)
        if idx + 1 < len(coeffs):
            out += coeffs[idx + 1] * np.sin(2 * np.pi * k * x)
    return out


def cosine_series(coeffs: List[float], x: np.ndarray) -> np.ndarray:
    """Even kernel a0 + sum_k a_k cos(2 pi k x)."""
    out = np.zeros_like(x, dtype=float)
    for k, a in enumerate(coeffs):
        out += a * np.cos(2 * np.pi * k * x)
    return out


def build_potential(spec: str, grid: TorusGrid) -> GridField:
    coeffs = POTENTIAL_PRESETS.get(spec)
    if coeffs is None:
        coeffs = _coefficients(spec)
    return GridField(grid, trig_series(coeffs, grid.nodes))


def build_coupling(spec: str, grid: TorusGrid, offset: Optional[float] = None) -> CouplingFunctional:
    spec = COUPLING_PRESETS.get(spec, spec)
    terms = []
    constant = 0.0
    for part in spec.split("+"):
        kind, _, rest = part.strip().partition(":")
        if kind == "const":
            constant += _number(rest or "0")
        elif kind == "linear":
            terms.append(LinearTerm(GridField(grid, trig_series(_coefficients(rest), grid.nodes))))
        elif kind == "conv":
            weight, _, kernel = rest.partition(":")
            coeffs = _coefficients(kernel)
            terms.append(ConvolutionTerm.from_function(grid, lambda x, c=coeffs: cosine_series(c, x), _number(weight)))
        else:
            raise ConfigurationError(f"unknown coupling term '{part}'")
    try:
        if offset is not None:
            return CouplingFunctional.build(grid, terms, offset)
        coupling = CouplingFunctional.build(grid, terms, None)
        return CouplingFunctional.build(grid, terms, coupling.offset + constant)
    except ValueError as exc:
        raise ConfigurationError(str(exc)) from exc
