"""Validated run configuration for the command-line front end.

Every section rejects unknown keys. Defaults:

============== ================ ==========================================
section        key              default
============== ================ ==========================================
(top level)    seed             0
(top level)    out              ``<command>-seed<seed>-<timestamp>``
instance       name             ``convex_qp`` (or ``path`` to a JSON file)
h              kind / alpha     ``quadratic`` / 0.5
solver         eta_*            theta 0.01, u and lambda 0.05; T 20000; tol 1e-9
appendix_a     n / trials       1000 / 200, relax ``over`` (tau_bar + 1)
grid           lo / hi / num    0 / 2 / 21 per constraint
sweep          alphas           0.1, 1, 10
gap            draws            1000
svm            points / labels  (1), (-1) / +1, -1; gamma 10
fl             see FlSection    10 clients, beta 0.3, rho 0.1, 100 rounds
============== ================ ==========================================
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, NonNegativeFloat, PositiveFloat, PositiveInt

COMMANDS = ("solve", "oracle-grid", "appendix-a", "fl-sim", "sweep-alpha", "gap-bounds", "svm")


class Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class InstanceSection(Section):
    name: Literal["convex_qp", "appendix_a", "invariance_toy"] = "convex_qp"
    path: Optional[str] = None
    params: dict = Field(default_factory=dict)


class CoordinateSection(Section):
    kind: Literal["quadratic", "linear", "exponential"]
    a: NonNegativeFloat
    b: PositiveFloat = 1.0


class CostSection(Section):
    kind: Literal["quadratic", "linear", "separable"] = "quadratic"
    alpha: PositiveFloat = 0.5
    gamma: Union[NonNegativeFloat, list[NonNegativeFloat]] = 1.0
    terms: list[CoordinateSection] = Field(default_factory=list)


class SolverSection(Section):
    eta_theta: PositiveFloat = 0.01
    eta_u: PositiveFloat = 0.05
    eta_lambda: PositiveFloat = 0.05
    T: PositiveInt = 20000
    batch_mode: Literal["full-batch", "per-sample-pass"] = "full-batch"
    tol: NonNegativeFloat = 1e-9


class SelectionSection(Section):
    n: PositiveInt = 1000
    trials: PositiveInt = 200
    relax: Union[Literal["over"], list[NonNegativeFloat]] = "over"


class GridSection(Section):
    lo: NonNegativeFloat = 0.0
    hi: PositiveFloat = 2.0
    num: int = Field(default=21, ge=2)


class SweepSection(Section):
    alphas: list[PositiveFloat] = Field(default_factory=lambda: [0.1, 1.0, 10.0])


class GapSection(Section):
    draws: PositiveInt = 1000


class SvmSection(Section):
    points: list[list[float]] = Field(default_factory=lambda: [[1.0], [-1.0]])
    labels: list[Literal[1, -1]] = Field(default_factory=lambda: [1, -1])
    gamma: PositiveFloat = 10.0
    reference_steps: PositiveInt = 20000


class FlSection(Section):
    clients: PositiveInt = 10
    epsilon: NonNegativeFloat = 0.1
    alpha: PositiveFloat = 1.0
    eta_u: NonNegativeFloat = 0.1
    eta_lambda: NonNegativeFloat = 0.1
    rounds: int = Field(default=100, ge=0)
    local_epochs: int = Field(default=1, ge=0)
    local_step: NonNegativeFloat = 0.05
    batch_size: PositiveInt = 32
    beta: PositiveFloat = 0.3
    minority: list[int] = Field(default_factory=lambda: [0, 2, 4])
    rho: float = Field(default=0.1, gt=0.0, le=1.0)
    mode: Literal["resilient", "constrained"] = "resilient"
    n_per_class: PositiveInt = 300
    n_test_per_class: PositiveInt = 100
    separation: PositiveFloat = 2.0


class RunConfig(Section):
    command: Literal[COMMANDS]
    seed: int = Field(default=0, ge=0, lt=2**64)
    out: Optional[str] = None
    instance: InstanceSection = Field(default_factory=InstanceSection)
    h: CostSection = Field(default_factory=CostSection)
    solver: SolverSection = Field(default_factory=SolverSection)
    appendix_a: SelectionSection = Field(default_factory=SelectionSection)
    grid: GridSection = Field(default_factory=GridSection)
    sweep: SweepSection = Field(default_factory=SweepSection)
    gap: GapSection = Field(default_factory=GapSection)
    svm: SvmSection = Field(default_factory=SvmSection)
    fl: FlSection = Field(default_factory=FlSection)

    def dump(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True)


def merge(base: dict, overrides: dict) -> dict:
    """Recursive dict merge; values in ``overrides`` win."""
    out = dict(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = merge(out[key], value)
        else:
            out[key] = value
    return out


def load_config_file(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file {path} does not exist")
    text = path.read_text().strip()
    if not text:
        return {}
    data = json.loads(text)
    if not isinstance(data, dict):
        raise ValueError("config file must hold a JSON object")
    return data


def parse_config(data: dict, overrides: dict | None = None) -> RunConfig:
    cfg = RunConfig.model_validate(merge(data, overrides or {}))
    if cfg.instance.path is not None and not Path(cfg.instance.path).is_file():
        raise FileNotFoundError(f"instance.path: {cfg.instance.path} does not exist")
    return cfg
