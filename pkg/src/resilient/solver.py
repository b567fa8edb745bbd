"""Primal-dual solver for resilient constrained learning.

Each outer iteration takes a descent pass on the model parameters, a projected
gradient step on the relaxation, then a projected ascent step on the
multipliers. Updates are sequential: the relaxation step uses the previous
multipliers, and the multiplier step sees the freshly updated model and
relaxation.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .models import grad_weighted_loss, init_params, loss_mean_grad
from .problem import (
    ProblemInstance,
    RelaxationCost,
    cost_grad,
    cost_value,
    eval_constraints,
    eval_objective,
)

BATCH_MODES = ("per-sample-pass", "full-batch")
DIVERGENCE_FACTOR = 1e6


class DivergenceError(RuntimeError):
    """The iterates blew up or became non-finite."""


@dataclass(frozen=True)
class SolverConfig:
    eta_theta: float = 0.05
    eta_u: float = 0.05
    eta_lambda: float = 0.05
    T: int = 1000
    batch_mode: str = "full-batch"
    tol: float = 0.0
    seed: int = 0
    u_init: tuple[float, ...] | None = None
    lambda_init: tuple[float, ...] | None = None
    theta_init: tuple[float, ...] | None = None
    init_scale: float = 0.1

    def __post_init__(self):
        for name in ("eta_theta", "eta_u", "eta_lambda", "tol", "init_scale"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be a nonnegative finite number, got {value}")
        if self.T < 1:
            raise ValueError(f"T must be at least 1, got {self.T}")
        if self.batch_mode not in BATCH_MODES:
            raise ValueError(f"batch_mode must be one of {BATCH_MODES}, got {self.batch_mode!r}")
        for name in ("u_init", "lambda_init"):
            value = getattr(self, name)
            if value is not None and min(value, default=0.0) < 0:
                raise ValueError(f"{name} must be nonnegative")


@dataclass(frozen=True)
class SolverState:
    theta: np.ndarray
    u: np.ndarray
    lam: np.ndarray
    t: int = 0

    def to_dict(self) -> dict:
        return {
            "t": self.t,
            "theta": self.theta.tolist(),
            "u": self.u.tolist(),
            "lambda": self.lam.tolist(),
        }


@dataclass
class Trajectory:
    m: int
    records: list[dict] = field(default_factory=list)
    stop_reason: str = ""
    wall_time: float = 0.0
    averaged: SolverState | None = None

    def __len__(self):
        return len(self.records)

    def header(self) -> list[str]:
        m = self.m
        return (
            ["t", "objective"]
            + [f"c_{i}" for i in range(1, m + 1)]
            + [f"u_{i}" for i in range(1, m + 1)]
            + [f"lambda_{i}" for i in range(1, m + 1)]
            + ["residual", "lagrangian"]
        )

    def rows(self):
        for r in self.records:
            yield [r["t"], r["objective"], *r["constraints"], *r["u"], *r["lam"], r["residual"], r["lagrangian"]]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.header())
            for row in self.rows():
                w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


def initial_state(instance: ProblemInstance, config: SolverConfig) -> SolverState:
    m = instance.m
    if config.theta_init is not None:
        theta = np.array(config.theta_init, dtype=float)
        if theta.shape != (instance.hypothesis.p,):
            raise ValueError("theta_init has the wrong length")
    else:
        rng = np.random.default_rng(config.seed)
        theta = init_params(instance.family, rng, config.init_scale)
    u = np.zeros(m) if config.u_init is None else np.array(config.u_init, dtype=float)
    lam = np.zeros(m) if config.lambda_init is None else np.array(config.lambda_init, dtype=float)
    if u.shape != (m,) or lam.shape != (m,):
        raise ValueError(f"u_init and lambda_init must have length m={m}")
    return SolverState(theta, u, lam, 0)


def empirical_lagrangian(instance: ProblemInstance, h: RelaxationCost, state: SolverState) -> float:
    """h(u) + mean objective loss + sum_i lam_i (mean constraint loss_i - u_i)."""
    if state.u.shape != (instance.m,) or state.lam.shape != (instance.m,):
        raise ValueError("state dimensions do not match the instance")
    slack = eval_constraints(instance, state.theta) - state.u
    return cost_value(h, state.u) + eval_objective(instance, state.theta) + float(state.lam @ slack)


def lagrangian_theta_grad(instance: ProblemInstance, theta, lam) -> np.ndarray:
    """Full-batch gradient of the Lagrangian with respect to the parameters."""
    fam = instance.family
    s0 = instance.splits[0]
    grad = loss_mean_grad(instance.objective, fam, theta, s0.X, s0.y)
    for i, loss in enumerate(instance.constraints):
        if lam[i] != 0.0:
            s = instance.splits[i + 1]
            grad = grad + lam[i] * loss_mean_grad(loss, fam, theta, s.X, s.y)
    return grad


def theta_update(
    instance: ProblemInstance, h: RelaxationCost, state: SolverState, config: SolverConfig
) -> np.ndarray:
    if instance.hypothesis.kind != "differentiable":
        raise TypeError("theta_update needs a differentiable hypothesis space; use the oracle for finite ones")
    eta = config.eta_theta
    theta = state.theta.copy()
    if eta == 0.0:
        return theta
    if config.batch_mode == "full-batch":
        return theta - eta * lagrangian_theta_grad(instance, theta, state.lam)
    # Shorter splits are cycled modulo their length.
    n_pass = max(s.n for s in instance.splits)
    for n in range(n_pass):
        samples = [(s.X[n % s.n], s.y[n % s.n]) for s in instance.splits]
        theta = theta - eta * grad_weighted_loss(instance, theta, state.lam, samples)
    return theta


def u_update(h: RelaxationCost, state: SolverState, config: SolverConfig) -> np.ndarray:
    if state.u.size == 0:
        return state.u.copy()
    step = cost_grad(h, state.u) - state.lam
    return np.maximum(state.u - config.eta_u * step, 0.0)


def lambda_update(
    instance: ProblemInstance, state: SolverState, config: SolverConfig, constraints=None
) -> np.ndarray:
    """Projected ascent step; ``constraints`` may pass c(state.theta) if already known."""
    if instance.m == 0:
        return state.lam.copy()
    cons = eval_constraints(instance, state.theta) if constraints is None else constraints
    slack = cons - state.u
    return np.maximum(state.lam + config.eta_lambda * slack, 0.0)


def equilibrium_residual(h: RelaxationCost, state: SolverState) -> float:
    """max_i |dh/du_i(u) - lam_i|; zero exactly at a resilient equilibrium."""
    if state.u.size == 0:
        return 0.0
    return float(np.max(np.abs(cost_grad(h, state.u) - state.lam)))


def _record(instance, h, state, cons) -> dict:
    obj = eval_objective(instance, state.theta)
    lag = cost_value(h, state.u) + obj + float(state.lam @ (cons - state.u))
    return {
        "t": state.t,
        "objective": obj,
        "constraints": cons.tolist(),
        "u": state.u.tolist(),
        "lam": state.lam.tolist(),
        "residual": equilibrium_residual(h, state),
        "lagrangian": lag,
    }


def _converged(instance, h, state, record, tol) -> bool:
    if record["residual"] > tol:
        return False
    cons = np.asarray(record["constraints"])
    if np.any(cons > state.u + tol):
        return False
    # Complementary slackness and primal stationarity, so a cold start at
    # u = lam = 0 does not stop on the first iteration.
    dual_move = state.lam - np.maximum(state.lam + (cons - state.u), 0.0)
    if dual_move.size and np.max(np.abs(dual_move)) > tol:
        return False
    grad = lagrangian_theta_grad(instance, state.theta, state.lam)
    return float(np.max(np.abs(grad))) <= tol


def run(
    instance: ProblemInstance,
    h: RelaxationCost,
    config: SolverConfig,
    state: SolverState | None = None,
) -> tuple[Trajectory, SolverState]:
    """Run the resilient primal-dual iteration for at most ``config.T`` steps.

    Stops early when ``config.tol > 0`` and the state is an approximate
    equilibrium: residual, constraint excess, dual movement and parameter
    gradient all within ``tol``. Raises :class:`DivergenceError` on blow-up.
    """
    if h.size is not None and h.size != instance.m:
        raise ValueError(f"relaxation cost has dimension {h.size}, instance has m={instance.m}")
    start = time.perf_counter()
    if state is None:
        state = initial_state(instance, config)
    traj = Trajectory(instance.m)
    L0 = empirical_lagrangian(instance, h, state)
    limit = DIVERGENCE_FACTOR * (abs(L0) + 1.0)
    thetas, us, lams = [], [], []
    traj.stop_reason = "max_iterations"
    for t in range(1, config.T + 1):
        theta = theta_update(instance, h, state, config)
        u = u_update(h, state, config)
        cons = eval_constraints(instance, theta)
        lam = lambda_update(instance, SolverState(theta, u, state.lam, t), config, cons)
        state = SolverState(theta, u, lam, t)
        rec = _record(instance, h, state, cons)
        traj.records.append(rec)
        thetas.append(theta)
        us.append(u)
        lams.append(lam)
        values = [rec["lagrangian"], rec["objective"], *rec["constraints"]]
        if not (np.all(np.isfinite(values)) and np.all(np.isfinite(theta))):
            traj.stop_reason = "non_finite"
            raise DivergenceError(f"non-finite iterate at t={t}")
        if abs(rec["lagrangian"]) > limit:
            traj.stop_reason = "diverged"
            raise DivergenceError(
                f"Lagrangian {rec['lagrangian']:.3g} exceeded {limit:.3g} at t={t}"
            )
        if config.tol > 0 and _converged(instance, h, state, rec, config.tol):
            traj.stop_reason = "converged"
            break
    # Tail (second-half) average of the iterates; the last iterate of a
    # bilinear saddle can cycle while the average converges.
    half = len(thetas) // 2
    traj.averaged = SolverState(
        np.mean(thetas[half:], axis=0),
        np.mean(us[half:], axis=0) if instance.m else np.zeros(0),
        np.mean(lams[half:], axis=0) if instance.m else np.zeros(0),
        state.t,
    )
    traj.wall_time = time.perf_counter() - start
    return traj, state


def summary(traj: Trajectory, state: SolverState, instance: ProblemInstance, h: RelaxationCost) -> dict:
    out = {
        "final_state": state.to_dict(),
        "stop_reason": traj.stop_reason,
        "wall_time": traj.wall_time,
        "iterations": len(traj),
        "objective": eval_objective(instance, state.theta),
        "constraints": eval_constraints(instance, state.theta).tolist(),
        "residual": equilibrium_residual(h, state),
        "lagrangian": empirical_lagrangian(instance, h, state),
    }
    if traj.averaged is not None:
        out["averaged_state"] = traj.averaged.to_dict()
    return out


def write_summary(path, data: dict) -> None:
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True))
