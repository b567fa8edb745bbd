"""Constrained learning problems, relaxation costs and their evaluation."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .losses import LossKind
from .models import ModelFamily, loss_values


@dataclass(frozen=True)
class Sample:
    features: np.ndarray
    label: float


@dataclass(frozen=True)
class DatasetSplit:
    """Samples of one distribution. Index 0 is the objective distribution."""

    index: int
    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        X = np.array(self.X, dtype=float)
        y = np.array(self.y, dtype=float).reshape(-1)
        if X.ndim != 2 or X.shape[0] != y.shape[0]:
            raise ValueError(f"split {self.index}: features {X.shape} and labels {y.shape} disagree")
        if X.shape[0] < 1:
            raise ValueError(f"split {self.index} has no samples")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @classmethod
    def from_samples(cls, index: int, samples: Sequence[Sample]) -> "DatasetSplit":
        return cls(index, np.array([s.features for s in samples]), np.array([s.label for s in samples]))

    def samples(self) -> list[Sample]:
        return [Sample(x, float(t)) for x, t in zip(self.X, self.y)]


@dataclass(frozen=True)
class HypothesisSpace:
    """Either a finite list of parameter vectors or a differentiable family."""

    kind: str
    family: ModelFamily
    candidates: tuple = ()
    bounds: tuple[float, float] | None = None

    def __post_init__(self):
        if self.kind == "finite":
            if not self.candidates:
                raise ValueError("finite hypothesis space needs at least one candidate")
            cands = tuple(np.array(c, dtype=float) for c in self.candidates)
            for c in cands:
                if c.shape != (self.family.n_params,):
                    raise ValueError("candidate size does not match the model family")
                c.setflags(write=False)
            object.__setattr__(self, "candidates", cands)
        elif self.kind != "differentiable":
            raise ValueError(f"unknown hypothesis kind {self.kind!r}")

    @property
    def p(self) -> int:
        return self.family.n_params

    @classmethod
    def finite(cls, family: ModelFamily, candidates) -> "HypothesisSpace":
        return cls("finite", family, tuple(candidates))

    @classmethod
    def differentiable(cls, family: ModelFamily, bounds=None) -> "HypothesisSpace":
        return cls("differentiable", family, (), None if bounds is None else tuple(bounds))


# Closed-form expectations for instances whose distributions are known exactly.
# Each entry maps a parameter vector to (objective, constraint vector).
EXACT_EVALUATORS: dict[str, Callable[[np.ndarray], tuple[float, np.ndarray]]] = {}


def register_exact(name: str):
    def deco(fn):
        EXACT_EVALUATORS[name] = fn
        return fn

    return deco


@dataclass(frozen=True)
class ProblemInstance:
    d: int
    m: int
    splits: tuple[DatasetSplit, ...]
    objective: LossKind
    constraints: tuple[LossKind, ...]
    hypothesis: HypothesisSpace
    loss_bound: float
    exact: str | None = None
    name: str = ""
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "splits", tuple(self.splits))
        object.__setattr__(self, "constraints", tuple(self.constraints))
        if len(self.constraints) != self.m:
            raise ValueError(f"{len(self.constraints)} constraint losses for m={self.m}")
        if [s.index for s in self.splits] != list(range(self.m + 1)):
            raise ValueError("splits must be indexed 0..m in order")
        for s in self.splits:
            if s.X.shape[1] != self.d:
                raise ValueError(f"split {s.index} has feature dimension {s.X.shape[1]}, not {self.d}")
        if self.hypothesis.family.d != self.d:
            raise ValueError("model family dimension differs from the instance")
        if self.loss_bound <= 0:
            raise ValueError("loss bound must be positive")
        if self.exact is not None and self.exact not in EXACT_EVALUATORS:
            raise ValueError(f"no exact evaluator registered under {self.exact!r}")

    @property
    def family(self) -> ModelFamily:
        return self.hypothesis.family

    def losses(self) -> tuple[LossKind, ...]:
        return (self.objective, *self.constraints)

    def with_exact(self, exact: str | None) -> "ProblemInstance":
        return ProblemInstance(
            self.d, self.m, self.splits, self.objective, self.constraints,
            self.hypothesis, self.loss_bound, exact, self.name, dict(self.meta),
        )

    # serialization

    def to_dict(self) -> dict:
        hyp = self.hypothesis
        hyp_d = {"kind": hyp.kind, "family": hyp.family.to_dict()}
        if hyp.kind == "finite":
            hyp_d["candidates"] = [c.tolist() for c in hyp.candidates]
        if hyp.bounds is not None:
            hyp_d["bounds"] = list(hyp.bounds)
        return {
            "d": self.d,
            "m": self.m,
            "splits": [
                {
                    "index": s.index,
                    "samples": [
                        {"features": x.tolist(), "label": float(t)} for x, t in zip(s.X, s.y)
                    ],
                }
                for s in self.splits
            ],
            "objective": self.objective.to_dict(),
            "constraints": [c.to_dict() for c in self.constraints],
            "hypothesis": hyp_d,
            "loss_bound": self.loss_bound,
            "exact": self.exact,
            "name": self.name,
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ProblemInstance":
        hyp = data["hypothesis"]
        family = ModelFamily.from_dict(hyp["family"])
        if hyp["kind"] == "finite":
            space = HypothesisSpace.finite(family, hyp["candidates"])
        else:
            space = HypothesisSpace.differentiable(family, hyp.get("bounds"))
        splits = []
        for s in data["splits"]:
            X = np.array([smp["features"] for smp in s["samples"]], dtype=float)
            y = np.array([smp["label"] for smp in s["samples"]], dtype=float)
            splits.append(DatasetSplit(int(s["index"]), X.reshape(len(y), -1), y))
        return cls(
            d=int(data["d"]),
            m=int(data["m"]),
            splits=tuple(splits),
            objective=LossKind.from_dict(data["objective"]),
            constraints=tuple(LossKind.from_dict(c) for c in data["constraints"]),
            hypothesis=space,
            loss_bound=float(data["loss_bound"]),
            exact=data.get("exact"),
            name=data.get("name", ""),
            meta=dict(data.get("meta", {})),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def loads(cls, text: str) -> "ProblemInstance":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> "ProblemInstance":
        return cls.loads(Path(path).read_text())


def load_split_csv(path, index: int) -> DatasetSplit:
    """One sample per row: feature columns followed by the label column."""
    rows = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row:
                continue
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                if rows:
                    raise
                continue  # header line
    arr = np.array(rows, dtype=float)
    if arr.ndim != 2 or arr.shape[1] < 2:
        raise ValueError(f"{path}: need at least one feature column and a label column")
    return DatasetSplit(index, arr[:, :-1], arr[:, -1])


def _params(instance: ProblemInstance, params) -> np.ndarray:
    params = np.asarray(params, dtype=float)
    if params.shape != (instance.hypothesis.p,):
        raise ValueError(
            f"parameter vector has shape {params.shape}, expected ({instance.hypothesis.p},)"
        )
    return params


def eval_objective(instance: ProblemInstance, params) -> float:
    """Mean objective loss over split 0 (closed form in exact mode)."""
    params = _params(instance, params)
    if instance.exact is not None:
        return float(EXACT_EVALUATORS[instance.exact](params)[0])
    s = instance.splits[0]
    return float(loss_values(instance.objective, instance.family, params, s.X, s.y).mean())


def eval_constraints(instance: ProblemInstance, params) -> np.ndarray:
    params = _params(instance, params)
    if instance.exact is not None:
        return np.asarray(EXACT_EVALUATORS[instance.exact](params)[1], dtype=float)
    out = np.empty(instance.m)
    for i, loss in enumerate(instance.constraints, start=1):
        s = instance.splits[i]
        out[i - 1] = loss_values(loss, instance.family, params, s.X, s.y).mean()
    return out


def max_abs_loss(instance: ProblemInstance, params) -> float:
    """Largest |loss| over every sample of every split, for checking the declared bound."""
    params = _params(instance, params)
    worst = 0.0
    for loss, s in zip(instance.losses(), instance.splits):
        vals = loss_values(loss, instance.family, params, s.X, s.y)
        worst = max(worst, float(np.abs(vals).max()))
    return worst


# relaxation costs

COORD_KINDS = ("quadratic", "linear", "exponential")


@dataclass(frozen=True)
class CoordinateCost:
    """Scalar cost term: ``a*u**2``, ``a*u`` or ``a*(exp(b*u) - 1)``."""

    kind: str
    a: float
    b: float = 1.0

    def __post_init__(self):
        if self.kind not in COORD_KINDS:
            raise ValueError(f"unknown coordinate cost {self.kind!r}")
        if self.a < 0 or (self.kind == "exponential" and self.b <= 0):
            raise ValueError("coordinate cost must be nondecreasing on u >= 0")

    def value(self, u):
        if self.kind == "quadratic":
            return self.a * u * u
        if self.kind == "linear":
            return self.a * u
        return self.a * np.expm1(self.b * u)

    def grad(self, u):
        if self.kind == "quadratic":
            return 2.0 * self.a * u
        if self.kind == "linear":
            return self.a + 0.0 * u
        return self.a * self.b * np.exp(self.b * u)

    @property
    def mu(self) -> float:
        # h(v) >= h(u) + h'(u)(v - u) + mu (v - u)^2 on u, v >= 0
        if self.kind == "quadratic":
            return self.a
        if self.kind == "linear":
            return 0.0
        return self.a * self.b**2 / 2.0


@dataclass(frozen=True)
class RelaxationCost:
    """``quadratic``: alpha*||u||^2, ``linear``: gamma.u, ``separable``: sum of terms."""

    kind: str
    alpha: float = 0.0
    gamma: tuple[float, ...] = ()
    terms: tuple[CoordinateCost, ...] = ()

    def __post_init__(self):
        if self.kind == "quadratic":
            if not self.alpha > 0:
                raise ValueError("quadratic cost needs alpha > 0")
        elif self.kind == "linear":
            g = tuple(float(v) for v in self.gamma)
            if not g or min(g) < 0:
                raise ValueError("linear cost needs a nonnegative gamma vector")
            object.__setattr__(self, "gamma", g)
        elif self.kind == "separable":
            if not self.terms:
                raise ValueError("separable cost needs at least one term")
            object.__setattr__(self, "terms", tuple(self.terms))
        else:
            raise ValueError(f"unknown relaxation cost {self.kind!r}")

    @classmethod
    def quadratic(cls, alpha: float) -> "RelaxationCost":
        return cls("quadratic", alpha=float(alpha))

    @classmethod
    def linear(cls, gamma) -> "RelaxationCost":
        return cls("linear", gamma=tuple(np.atleast_1d(np.asarray(gamma, float))))

    @classmethod
    def separable(cls, terms) -> "RelaxationCost":
        return cls("separable", terms=tuple(terms))

    @property
    def size(self) -> int | None:
        """Fixed dimension, or None when the cost applies to any length."""
        if self.kind == "linear":
            return len(self.gamma)
        if self.kind == "separable":
            return len(self.terms)
        return None

    @property
    def mu(self) -> float:
        """Strong-convexity constant under h(v) >= h(u) + grad.(v-u) + mu*||v-u||^2."""
        if self.kind == "quadratic":
            return self.alpha
        if self.kind == "linear":
            return 0.0
        return min(t.mu for t in self.terms)

    def coordinate(self, i: int) -> "RelaxationCost":
        """The one-dimensional cost acting on coordinate ``i`` alone."""
        if self.kind == "quadratic":
            return self
        if self.kind == "linear":
            return RelaxationCost.linear([self.gamma[i]])
        return RelaxationCost.separable([self.terms[i]])

    def to_dict(self) -> dict:
        if self.kind == "quadratic":
            return {"kind": "quadratic", "alpha": self.alpha}
        if self.kind == "linear":
            return {"kind": "linear", "gamma": list(self.gamma)}
        return {"kind": "separable", "terms": [{"kind": t.kind, "a": t.a, "b": t.b} for t in self.terms]}

    @classmethod
    def from_dict(cls, data: dict) -> "RelaxationCost":
        kind = data["kind"]
        if kind == "quadratic":
            return cls.quadratic(data["alpha"])
        if kind == "linear":
            return cls.linear(data["gamma"])
        return cls.separable([CoordinateCost(t["kind"], t["a"], t.get("b", 1.0)) for t in data["terms"]])


def _relaxation(h: RelaxationCost, u) -> np.ndarray:
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if u.ndim != 1:
        raise ValueError("relaxation must be a vector")
    if np.any(u < 0):
        raise ValueError(f"relaxation has a negative component: {u.tolist()}")
    if h.size is not None and u.shape[0] != h.size:
        raise ValueError(f"relaxation has length {u.shape[0]}, cost expects {h.size}")
    return u


def cost_value(h: RelaxationCost, u) -> float:
    u = _relaxation(h, u)
    if h.kind == "quadratic":
        return float(h.alpha * (u @ u))
    if h.kind == "linear":
        return float(np.dot(h.gamma, u))
    return float(sum(t.value(v) for t, v in zip(h.terms, u)))


def cost_grad(h: RelaxationCost, u) -> np.ndarray:
    u = _relaxation(h, u)
    if h.kind == "quadratic":
        return 2.0 * h.alpha * u
    if h.kind == "linear":
        return np.array(h.gamma, dtype=float)
    return np.array([t.grad(v) for t, v in zip(h.terms, u)], dtype=float)
