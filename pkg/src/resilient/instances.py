"""Constructors for the test problems and the finite-example selection harness."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .losses import InputMap, LossKind
from .models import ModelFamily
from .oracle import finite_argmin, finite_table, resilient_value_finite
from .problem import (
    DatasetSplit,
    HypothesisSpace,
    ProblemInstance,
    RelaxationCost,
    register_exact,
)

# The four-candidate example

THETA_LABELS = ("a", "b", "c", "d")
APPENDIX_A_THETAS = (
    np.array([0.5, 0.5]),
    np.array([1.0, 1.0]),
    np.array([1.0, 1.0 / 3.0]),
    np.array([1.0, 0.0]),
)
APPENDIX_A_BOUND = 3.0


@register_exact("appendix_a")
def appendix_a_exact(theta) -> tuple[float, np.ndarray]:
    """Population objective and constraints of the four-candidate example."""
    t1, t2 = float(theta[0]), float(theta[1])
    objective = abs(t1 - t2) / 8.0 + abs(t2) / 16.0
    return objective, np.array([1.0 - t1, t2 - 1.0])


@dataclass(frozen=True)
class AppendixADraw:
    tau: np.ndarray
    alpha: np.ndarray
    branch: np.ndarray

    def __post_init__(self):
        if not (self.tau.shape == self.alpha.shape == self.branch.shape) or self.tau.ndim != 1:
            raise ValueError("latent arrays must be 1-D with equal length")
        if np.any(np.abs(self.tau) > 0.5) or np.any((self.alpha < 0) | (self.alpha > 0.25)):
            raise ValueError("latent draw out of range")

    @property
    def N(self) -> int:
        return self.tau.size

    @property
    def tau_bar(self) -> float:
        return float(self.tau.mean())

    @classmethod
    def sample(cls, N: int, rng: np.random.Generator) -> "AppendixADraw":
        tau = rng.uniform(-0.5, 0.5, size=N)
        alpha = rng.uniform(0.0, 0.25, size=N)
        branch = rng.integers(0, 2, size=N).astype(bool)
        return cls(tau, alpha, branch)

    def splits(self) -> tuple[DatasetSplit, DatasetSplit, DatasetSplit]:
        tau, alpha, b = self.tau, self.alpha, self.branch
        zeros = np.zeros_like(tau)
        X0 = np.where(b[:, None], np.stack([tau, -tau], 1), np.stack([zeros, alpha], 1))
        y0 = np.where(b, -1.0, 1.0)
        ones = np.ones_like(tau)
        X1 = np.stack([-ones, tau], 1)
        X2 = np.stack([-tau, ones], 1)
        return (
            DatasetSplit(0, X0, y0),
            DatasetSplit(1, X1, ones),
            DatasetSplit(2, X2, ones),
        )


def make_appendix_a(N: int = 1, seed=0, mode: str = "sampled") -> ProblemInstance:
    """The two-parameter, four-candidate example.

    Both modes carry an N-sample draw; ``exact`` mode evaluates expectations in
    closed form instead of averaging over it.
    """
    if mode not in ("sampled", "exact"):
        raise ValueError(f"mode must be 'sampled' or 'exact', got {mode!r}")
    if N < 1:
        raise ValueError("N must be at least 1")
    draw = AppendixADraw.sample(N, np.random.default_rng(seed))
    family = ModelFamily("linear", 2)
    return ProblemInstance(
        d=2,
        m=2,
        splits=draw.splits(),
        objective=LossKind("absolute-linear"),
        constraints=(LossKind("linear-form", offset=-1.0), LossKind("linear-form", offset=1.0)),
        hypothesis=HypothesisSpace.finite(family, APPENDIX_A_THETAS),
        loss_bound=APPENDIX_A_BOUND,
        exact="appendix_a" if mode == "exact" else None,
        name="appendix_a",
        meta={"N": N, "mode": mode, "tau_bar": draw.tau_bar, "labels": list(THETA_LABELS)},
    )


@dataclass
class SelectionReport:
    trials: int
    N: int
    seed: int
    counts: dict[str, dict[str, int]]
    mean_abs_tau_bar: float
    choices: dict[str, list[str]] = field(default_factory=dict, repr=False)

    @property
    def frequencies(self) -> dict[str, dict[str, float]]:
        return {
            method: {k: v / self.trials for k, v in per.items()}
            for method, per in self.counts.items()
        }

    def to_dict(self) -> dict:
        return {
            "trials": self.trials,
            "N": self.N,
            "seed": self.seed,
            "counts": self.counts,
            "frequencies": self.frequencies,
            "mean_abs_tau_bar": self.mean_abs_tau_bar,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))


METHODS = ("ecrm", "relaxed", "resilient")


def _over_relaxed(tau_bar: float) -> np.ndarray:
    return np.array([tau_bar + 1.0, tau_bar + 1.0])


def _one_trial(N, seed, trial, h, relax):
    inst = make_appendix_a(N, seed=[seed, trial])
    tau_bar = inst.meta["tau_bar"]
    table = finite_table(inst)
    ecrm, _ = finite_argmin(inst, np.zeros(2), table)
    u_rel = relax(tau_bar) if callable(relax) else np.asarray(relax, dtype=float)
    relaxed, _ = finite_argmin(inst, np.maximum(u_rel, 0.0), table)
    vals = [resilient_value_finite(inst, h, th) for th in inst.hypothesis.candidates]
    resilient = int(np.argmin(vals))
    label = lambda k: "none" if k is None else THETA_LABELS[k]
    return tau_bar, label(ecrm), label(relaxed), label(resilient)


def run_appendix_a_trials(
    N: int,
    trials: int,
    seed: int,
    h: RelaxationCost | None = None,
    relax=_over_relaxed,
    workers: int = 1,
) -> SelectionReport:
    """Monte Carlo selection frequencies of the three selection rules.

    ``relax`` is either a fixed relaxation vector or a function of the draw's
    mean tau; the default relaxes both constraints to tau_bar + 1.
    """
    if trials < 1:
        raise ValueError("trials must be at least 1")
    h = RelaxationCost.quadratic(0.5) if h is None else h
    args = [(N, seed, t, h, relax) for t in range(trials)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda a: _one_trial(*a), args))
    else:
        results = [_one_trial(*a) for a in args]
    labels = THETA_LABELS + ("none",)
    counts = {m: {k: 0 for k in labels} for m in METHODS}
    choices = {m: [] for m in METHODS}
    for _, *picks in results:
        for method, pick in zip(METHODS, picks):
            counts[method][pick] += 1
            choices[method].append(pick)
    mean_abs = float(np.mean([abs(r[0]) for r in results]))
    return SelectionReport(trials, N, int(seed), counts, mean_abs, choices)


# Strictly convex least-squares testbed


def make_convex_qp(
    d: int = 1,
    m: int = 2,
    seed: int = 0,
    n: int = 100,
    noise: float = 0.5,
    kappa: float = 0.5,
    bound: float = 5.0,
) -> ProblemInstance:
    """Linear least squares with least-squares constraints on other targets.

    Each constraint level is ``kappa`` times the smallest achievable value of
    its loss, so with kappa < 1 no parameter satisfies any constraint at u = 0
    and every constraint stays active under a linear cost.
    """
    if d < 1 or m < 1:
        raise ValueError("d and m must be at least 1")
    if not 0 <= kappa < 1:
        raise ValueError("kappa must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    splits, levels, witness = [], [], []
    w0 = rng.normal(size=d)
    for i in range(m + 1):
        X = rng.normal(size=(n, d))
        w = w0 if i == 0 else w0 + rng.normal(size=d)
        y = X @ w + noise * rng.normal(size=n)
        splits.append(DatasetSplit(i, X, y))
        if i > 0:
            sol = np.linalg.lstsq(X, y, rcond=None)[0]
            best = float(np.mean((X @ sol - y) ** 2))
            levels.append(kappa * best)
    family = ModelFamily("linear", d)
    constraints = tuple(LossKind("squared", offset=c) for c in levels)
    s0 = splits[0]
    theta0 = np.linalg.lstsq(s0.X, s0.y, rcond=None)[0]
    for i, c in enumerate(levels):
        s = splits[i + 1]
        witness.append(float(np.mean((s.X @ theta0 - s.y) ** 2)) - c + 1.0)
    # Every sample satisfies |x.theta - y| <= bound*||x||_1 + |y| on the box.
    B = max(
        float(np.max((bound * np.abs(s.X).sum(1) + np.abs(s.y)) ** 2)) for s in splits
    ) + max(levels)
    return ProblemInstance(
        d=d,
        m=m,
        splits=tuple(splits),
        objective=LossKind("squared"),
        constraints=constraints,
        hypothesis=HypothesisSpace.differentiable(family, (-bound, bound)),
        loss_bound=B,
        name="convex_qp",
        meta={
            "seed": seed,
            "levels": levels,
            "witness_u": witness,
            "witness_theta": theta0.tolist(),
            "margin": 1.0,
        },
    )


# Soft-margin SVM


def make_svm(points, labels, gamma: float = 1.0, bound: float = 10.0):
    """Hard-margin constraints per point, relaxed at linear cost gamma * sum(u).

    The 1/2 ||theta||^2 objective is encoded as a squared loss on the unit
    vectors with target 0, scaled by d/2 so that its mean equals 1/2 ||theta||^2.
    """
    X = np.atleast_2d(np.asarray(points, dtype=float))
    if X.shape[0] == 1 and np.ndim(points) == 1:
        X = X.T
    y = np.asarray(labels, dtype=float).reshape(-1)
    if X.shape[0] < 1 or X.shape[0] != y.size:
        raise ValueError("need at least one point and one label per point")
    if not np.all(np.isin(y, (-1.0, 1.0))):
        raise ValueError("labels must be +1 or -1")
    n, d = X.shape
    splits = [DatasetSplit(0, np.eye(d), np.zeros(d))]
    splits += [DatasetSplit(i + 1, X[i : i + 1], y[i : i + 1]) for i in range(n)]
    reach = bound * np.abs(X).sum(1)
    B = max(float(np.max(1.0 + reach)), d / 2.0 * bound**2)
    inst = ProblemInstance(
        d=d,
        m=n,
        splits=tuple(splits),
        objective=LossKind("squared", scale=d / 2.0),
        constraints=tuple(LossKind("linear-form", offset=-1.0, scale=-1.0) for _ in range(n)),
        hypothesis=HypothesisSpace.differentiable(ModelFamily("linear", d), (-bound, bound)),
        loss_bound=B,
        name="svm",
        meta={"gamma": float(gamma)},
    )
    return inst, RelaxationCost.linear(np.full(n, float(gamma)))


# Invariance-constrained toy


def make_invariance_toy(
    seed: int = 0,
    K_transforms: int = 4,
    n: int = 200,
    max_angle: float = np.pi / 8,
    translation: float | None = None,
    level: float = 0.3,
    bound: float = 5.0,
) -> ProblemInstance:
    """Two Gaussian blobs in the plane, logistic loss, robust-max constraints.

    The first constraint takes the worst loss over the identity and K - 1
    rotations with angles up to ``max_angle``. With ``translation`` set, a
    second constraint does the same over K - 1 shifts of that length, which
    the data are not invariant to. Transforms are drawn once here.
    """
    if K_transforms < 1:
        raise ValueError("K_transforms must be at least 1")
    rng = np.random.default_rng(seed)
    y = np.where(rng.random(n) < 0.5, 1.0, -1.0)
    X = 0.7 * rng.normal(size=(n, 2))
    X[:, 0] += 1.5 * y
    rotations = [InputMap.identity(2)] + [
        InputMap.rotation(a) for a in rng.uniform(-max_angle, max_angle, size=K_transforms - 1)
    ]
    logistic = LossKind("logistic")
    constraints = [LossKind("robust-max", offset=level, inner=logistic, transforms=tuple(rotations))]
    reach = 0.0
    if translation is not None:
        angles = rng.uniform(0.0, 2 * np.pi, size=K_transforms - 1)
        shifts = [InputMap.identity(2)] + [
            InputMap.translation(translation * np.array([np.cos(a), np.sin(a)])) for a in angles
        ]
        constraints.append(
            LossKind("robust-max", offset=level, inner=logistic, transforms=tuple(shifts))
        )
        reach = 2.0 * translation
    m = len(constraints)
    splits = tuple(DatasetSplit(i, X, y) for i in range(m + 1))
    B = float(np.log1p(np.exp(bound * (np.abs(X).sum(1).max() + reach)))) + level
    return ProblemInstance(
        d=2,
        m=m,
        splits=splits,
        objective=logistic,
        constraints=tuple(constraints),
        hypothesis=HypothesisSpace.differentiable(ModelFamily("linear", 2), (-bound, bound)),
        loss_bound=B,
        name="invariance_toy",
        meta={"seed": seed, "K": K_transforms, "translation": translation, "level": level},
    )


CONSTRUCTORS = {
    "appendix_a": make_appendix_a,
    "convex_qp": make_convex_qp,
    "invariance_toy": make_invariance_toy,
}
