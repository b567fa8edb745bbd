"""Ground-truth machinery used to check the solver.

Everything here works by enumeration, closed forms or dense grids, never by
the primal-dual iteration, so its answers are independent of the solver.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from itertools import product

import numpy as np

from .losses import base_values
from .models import init_params, loss_mean_grad, loss_values
from .problem import (
    ProblemInstance,
    RelaxationCost,
    cost_grad,
    cost_value,
    eval_constraints,
    eval_objective,
)
from .solver import DIVERGENCE_FACTOR, DivergenceError

PRECONDITION_TOL = 1e-9


def _finite_only(instance: ProblemInstance):
    if instance.hypothesis.kind != "finite":
        raise TypeError("this oracle needs a finite hypothesis space")


def _relax_vector(instance: ProblemInstance, u) -> np.ndarray:
    u = np.atleast_1d(np.asarray(u, dtype=float)) if instance.m else np.zeros(0)
    if u.shape != (instance.m,):
        raise ValueError(f"relaxation has shape {u.shape}, expected ({instance.m},)")
    return u


def finite_table(instance: ProblemInstance) -> tuple[np.ndarray, np.ndarray]:
    """Objective values (K,) and constraint values (K, m) of every candidate."""
    _finite_only(instance)
    cands = instance.hypothesis.candidates
    obj = np.array([eval_objective(instance, th) for th in cands])
    cons = np.array([eval_constraints(instance, th) for th in cands]).reshape(len(cands), instance.m)
    return obj, cons


def finite_argmin(instance: ProblemInstance, u, table=None) -> tuple[int | None, float | None]:
    """Index and value of the best candidate feasible at ``u`` (lowest index on ties)."""
    u = _relax_vector(instance, u)
    obj, cons = finite_table(instance) if table is None else table
    best, best_val = None, None
    for k in range(len(obj)):
        if np.all(cons[k] <= u) and (best_val is None or obj[k] < best_val):
            best, best_val = k, float(obj[k])
    return best, best_val


def perturbation_value_finite(instance: ProblemInstance, u) -> float | None:
    """Optimal value of the relaxed problem at ``u``; None when infeasible."""
    return finite_argmin(instance, u)[1]


# closed-form inner solve for one-parameter least-squares instances


def _quadratic_coeffs(loss, split):
    """(a, b, k) with mean loss = a t^2 - 2 b t + k for a scalar linear model."""
    x = split.X[:, 0]
    y = split.y
    s = loss.scale
    return s * np.mean(x * x), s * np.mean(x * y), s * np.mean(y * y) - loss.offset


def supports_closed_form(instance: ProblemInstance) -> bool:
    fam = instance.family
    return (
        instance.hypothesis.kind == "differentiable"
        and fam.kind == "linear"
        and fam.d == 1
        and fam.k == 1
        and instance.exact is None
        and all(l.tag == "squared" and l.scale > 0 for l in instance.losses())
    )


def closed_form_perturbation(instance: ProblemInstance, u) -> tuple[float | None, float | None]:
    """(value, minimizer) of the relaxed problem for a scalar least-squares instance.

    Each constraint a t^2 - 2 b t + k <= u_i is an interval in t; the objective
    parabola is minimized over their intersection by clamping its vertex.
    """
    if not supports_closed_form(instance):
        raise TypeError("closed form needs a scalar linear model with squared losses")
    u = _relax_vector(instance, u)
    lo, hi = -np.inf, np.inf
    if instance.hypothesis.bounds is not None:
        lo, hi = instance.hypothesis.bounds
    for i, loss in enumerate(instance.constraints):
        a, b, k = _quadratic_coeffs(loss, instance.splits[i + 1])
        disc = b * b - a * (k - u[i])
        if disc < 0:
            return None, None
        r = np.sqrt(disc)
        lo, hi = max(lo, (b - r) / a), min(hi, (b + r) / a)
    if lo > hi:
        return None, None
    a0, b0, k0 = _quadratic_coeffs(instance.objective, instance.splits[0])
    t = float(np.clip(b0 / a0, lo, hi))
    return a0 * t * t - 2 * b0 * t + k0, t


def closed_form_value(instance: ProblemInstance, u) -> float | None:
    return closed_form_perturbation(instance, u)[0]


@dataclass
class PerturbationGrid:
    axes: tuple[np.ndarray, ...]
    values: np.ma.MaskedArray
    subgradients: np.ma.MaskedArray

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(len(a) for a in self.axes)

    def index_of(self, u) -> tuple[int, ...]:
        u = np.atleast_1d(np.asarray(u, dtype=float))
        if u.shape != (len(self.axes),):
            raise ValueError("point has the wrong dimension for this grid")
        idx = []
        for j, (axis, val) in enumerate(zip(self.axes, u)):
            hits = np.flatnonzero(np.isclose(axis, val, rtol=0, atol=1e-12))
            if hits.size == 0:
                raise ValueError(f"u_{j + 1}={val} is not a grid value")
            idx.append(int(hits[0]))
        return tuple(idx)

    def point(self, idx) -> np.ndarray:
        return np.array([axis[i] for axis, i in zip(self.axes, idx)])

    def write_csv(self, path) -> None:
        m = len(self.axes)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(
                [f"u_{j}" for j in range(1, m + 1)]
                + ["value"]
                + [f"subgrad_{j}" for j in range(1, m + 1)]
            )
            for idx in product(*(range(n) for n in self.shape)):
                row = [repr(float(v)) for v in self.point(idx)]
                row.append("infeasible" if self.values.mask[idx] else repr(float(self.values[idx])))
                for j in range(m):
                    g = self.subgradients[idx + (j,)]
                    row.append("" if g is np.ma.masked else repr(float(g)))
                w.writerow(row)


def _value_function(instance: ProblemInstance):
    if instance.hypothesis.kind == "finite":
        table = finite_table(instance)
        return lambda u: finite_argmin(instance, u, table)[1]
    if supports_closed_form(instance):
        return lambda u: closed_form_value(instance, u)
    raise TypeError("perturbation grids need a finite space or a closed-form instance")


def build_perturbation_grid(instance: ProblemInstance, axes) -> PerturbationGrid:
    axes = tuple(np.asarray(a, dtype=float) for a in axes)
    if len(axes) != instance.m:
        raise ValueError(f"need one axis per constraint (m={instance.m})")
    for j, a in enumerate(axes):
        if a.ndim != 1 or a.size == 0 or np.any(np.diff(a) <= 0):
            raise ValueError(f"axis {j + 1} must be sorted strictly ascending")
        if a[0] < 0:
            raise ValueError(f"axis {j + 1} has negative relaxations")
    value_of = _value_function(instance)
    shape = tuple(a.size for a in axes)
    vals = np.zeros(shape)
    mask = np.zeros(shape, dtype=bool)
    for idx in product(*(range(n) for n in shape)):
        v = value_of(np.array([a[i] for a, i in zip(axes, idx)]))
        if v is None:
            mask[idx] = True
        else:
            vals[idx] = v
    values = np.ma.MaskedArray(vals, mask=mask)
    sub = np.zeros(shape + (instance.m,))
    sub_mask = np.ones(shape + (instance.m,), dtype=bool)
    for idx in product(*(range(n) for n in shape)):
        if mask[idx]:
            continue
        for j, a in enumerate(axes):
            i = idx[j]
            if i == 0 or i == a.size - 1:
                continue
            lo = idx[:j] + (i - 1,) + idx[j + 1 :]
            hi = idx[:j] + (i + 1,) + idx[j + 1 :]
            if mask[lo] or mask[hi]:
                continue
            sub[idx + (j,)] = (vals[hi] - vals[lo]) / (a[i + 1] - a[i - 1])
            sub_mask[idx + (j,)] = False
    return PerturbationGrid(axes, values, np.ma.MaskedArray(sub, mask=sub_mask))


def fd_subgradient(grid: PerturbationGrid, u) -> np.ndarray:
    """Central-difference subgradient estimate at an interior grid point."""
    idx = grid.index_of(u)
    for j, (axis, i) in enumerate(zip(grid.axes, idx)):
        if i == 0 or i == len(axis) - 1:
            raise ValueError(f"u is on the boundary of axis {j + 1}")
    est = grid.subgradients[idx]
    if np.ma.is_masked(est) and np.any(np.ma.getmaskarray(est)):
        raise ValueError("u or one of its neighbours is infeasible")
    return np.asarray(est, dtype=float)


def nested_grid_minimum(grid: PerturbationGrid, h: RelaxationCost) -> tuple[float, np.ndarray]:
    """min over feasible grid points of P(u) + h(u), with its minimizer."""
    best, best_u = np.inf, None
    for idx in product(*(range(n) for n in grid.shape)):
        if grid.values.mask[idx]:
            continue
        u = grid.point(idx)
        total = float(grid.values[idx]) + cost_value(h, u)
        if total < best:
            best, best_u = total, u
    if best_u is None:
        raise ValueError("grid has no feasible point")
    return best, best_u


# resilient problem by brute force


def resilient_value_finite(instance: ProblemInstance, h: RelaxationCost, params) -> float:
    """Resilient value at fixed parameters: the best relaxation is [c(theta)]_+."""
    obj = eval_objective(instance, params)
    if instance.m == 0:
        return obj
    return obj + cost_value(h, np.maximum(eval_constraints(instance, params), 0.0))


def _batch_losses(loss, family, Thetas, X, y) -> np.ndarray:
    """Mean loss for every row of ``Thetas`` (G, p)."""
    if family.kind == "linear" and family.k == 1 and loss.tag != "robust-max":
        Z = X @ Thetas.T  # (N, G)
        vals = base_values(loss.tag, Z.reshape(-1, 1), np.repeat(y, Z.shape[1]))
        return loss.scale * vals.reshape(Z.shape).mean(axis=0) - loss.offset
    return np.array([loss_values(loss, family, th, X, y).mean() for th in Thetas])


def resilient_values_batch(instance: ProblemInstance, h: RelaxationCost, Thetas) -> np.ndarray:
    fam = instance.family
    s0 = instance.splits[0]
    out = _batch_losses(instance.objective, fam, Thetas, s0.X, s0.y)
    if instance.m == 0:
        return out
    cons = np.stack(
        [
            _batch_losses(loss, fam, Thetas, s.X, s.y)
            for loss, s in zip(instance.constraints, instance.splits[1:])
        ],
        axis=1,
    )
    pos = np.maximum(cons, 0.0)
    return out + np.array([cost_value(h, row) for row in pos])


def _grid_zoom(f, lo, hi, points: int = 101, window: int = 10, width_tol: float = 1e-10):
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    p = lo.size
    box_lo, box_hi = lo.copy(), hi.copy()
    best_x, best_f = None, np.inf
    for _ in range(200):
        grids = [np.linspace(a, b, points) for a, b in zip(box_lo, box_hi)]
        mesh = np.stack(np.meshgrid(*grids, indexing="ij"), axis=-1).reshape(-1, p)
        vals = f(mesh)
        k = int(np.argmin(vals))
        if vals[k] < best_f:
            best_f, best_x = float(vals[k]), mesh[k].copy()
        step = (box_hi - box_lo) / (points - 1)
        if np.all(step < width_tol):
            break
        box_lo = np.maximum(lo, mesh[k] - window * step)
        box_hi = np.minimum(hi, mesh[k] + window * step)
    return best_x, best_f


def resilient_brute_force(instance: ProblemInstance, h: RelaxationCost):
    """Global minimizer of objective + h(u) subject to constraints <= u.

    Finite spaces are enumerated (lowest index wins ties). Differentiable
    spaces with at most two parameters and box bounds are solved by a
    successively refined dense grid over the parameters, relaxation set to
    the positive part of the constraint values.
    """
    if instance.hypothesis.kind == "finite":
        best, best_val = None, np.inf
        for k, th in enumerate(instance.hypothesis.candidates):
            v = resilient_value_finite(instance, h, th)
            if v < best_val:
                best, best_val = k, v
        theta = np.array(instance.hypothesis.candidates[best])
    else:
        p = instance.hypothesis.p
        if p > 2 or instance.hypothesis.bounds is None:
            raise ValueError("grid brute force needs at most two parameters and box bounds")
        lo, hi = instance.hypothesis.bounds
        theta, _ = _grid_zoom(
            lambda T: resilient_values_batch(instance, h, T), np.full(p, lo), np.full(p, hi)
        )
        best_val = resilient_value_finite(instance, h, theta)
    u = np.maximum(eval_constraints(instance, theta), 0.0) if instance.m else np.zeros(0)
    return theta, u, float(best_val)


# fixed-penalty reference


def penalty_objective(instance: ProblemInstance, gamma, params, positive_part: bool = False) -> float:
    cons = eval_constraints(instance, params)
    if positive_part:
        cons = np.maximum(cons, 0.0)
    return eval_objective(instance, params) + float(np.dot(gamma, cons))


def penalty_reference_solve(
    instance: ProblemInstance,
    gamma,
    steps: int,
    seed: int = 0,
    step_size: float = 0.01,
    positive_part: bool = False,
    theta0=None,
) -> np.ndarray:
    """(Sub)gradient descent on objective + sum_i gamma_i * constraint_i.

    With ``positive_part`` each constraint enters as [c_i]_+ (exact penalty,
    hinge-like), the step decays as step_size/sqrt(t) and the best iterate is
    returned.
    """
    if instance.hypothesis.kind != "differentiable":
        raise TypeError("penalty reference needs a differentiable hypothesis space")
    gamma = np.atleast_1d(np.asarray(gamma, dtype=float)) if instance.m else np.zeros(0)
    if gamma.shape != (instance.m,) or np.any(gamma < 0):
        raise ValueError("gamma must be a nonnegative vector of length m")
    fam = instance.family
    if theta0 is None:
        theta = init_params(fam, np.random.default_rng(seed))
    else:
        theta = np.array(theta0, dtype=float)
    start = penalty_objective(instance, gamma, theta, positive_part)
    limit = DIVERGENCE_FACTOR * (abs(start) + 1.0)
    best, best_val = theta.copy(), start
    s0 = instance.splits[0]
    for t in range(1, steps + 1):
        grad = loss_mean_grad(instance.objective, fam, theta, s0.X, s0.y)
        if instance.m:
            cons = eval_constraints(instance, theta)
            for i, loss in enumerate(instance.constraints):
                if gamma[i] == 0.0 or (positive_part and cons[i] <= 0.0):
                    continue
                s = instance.splits[i + 1]
                grad = grad + gamma[i] * loss_mean_grad(loss, fam, theta, s.X, s.y)
        eta = step_size / np.sqrt(t) if positive_part else step_size
        theta = theta - eta * grad
        val = penalty_objective(instance, gamma, theta, positive_part)
        if not np.isfinite(val) or abs(val) > limit:
            raise DivergenceError(f"penalty reference diverged at step {t}")
        if val < best_val:
            best, best_val = theta.copy(), val
    return best if positive_part else theta


# duality gap bounds


@dataclass(frozen=True)
class GapBoundInputs:
    lambda_star: np.ndarray
    u: np.ndarray
    L_eps: float
    h: RelaxationCost


def gap_bounds(inputs: GapBoundInputs) -> tuple[float, float]:
    """(d_rsl, d_csl) with

    d_csl = ||lambda*||_1 L_eps + L_eps
    d_rsl = h(u + L_eps 1) - h(u) + L_eps
    """
    lam = np.atleast_1d(np.asarray(inputs.lambda_star, dtype=float))
    u = np.atleast_1d(np.asarray(inputs.u, dtype=float))
    Le = float(inputs.L_eps)
    if lam.shape != u.shape:
        raise ValueError("lambda_star and u must have the same length")
    if Le < 0:
        raise ValueError("L_eps must be nonnegative")
    shifted = u + Le
    expected = cost_grad(inputs.h, shifted)
    if np.max(np.abs(expected - lam), initial=0.0) > PRECONDITION_TOL:
        raise ValueError("lambda_star must equal the cost gradient at u + L_eps")
    d_csl = float(np.sum(np.abs(lam)) * Le + Le)
    d_rsl = cost_value(inputs.h, shifted) - cost_value(inputs.h, u) + Le
    return d_rsl, d_csl


def random_cost(rng: np.random.Generator, m: int) -> RelaxationCost:
    from .problem import CoordinateCost

    kind = rng.choice(["quadratic", "linear", "separable"])
    if kind == "quadratic":
        return RelaxationCost.quadratic(rng.uniform(0.05, 5.0))
    if kind == "linear":
        return RelaxationCost.linear(rng.uniform(0.0, 3.0, size=m))
    terms = []
    for _ in range(m):
        sub = rng.choice(["quadratic", "linear", "exponential"])
        terms.append(CoordinateCost(str(sub), rng.uniform(0.05, 3.0), rng.uniform(0.1, 1.5)))
    return RelaxationCost.separable(terms)


def gap_bound_sweep(draws: int, seed: int) -> dict:
    """Check d_rsl <= d_csl, and d_csl - d_rsl >= mu (L eps)^2, on random draws.

    Comparisons carry a rounding allowance of 1e-12 relative to the bound size,
    since for quadratic costs with m = 1 the second inequality is an equality.
    """
    rng = np.random.default_rng(seed)
    order_viol = convex_viol = 0
    min_gap = np.inf
    rows = []
    for k in range(draws):
        m = int(rng.integers(1, 6))
        h = random_cost(rng, m)
        u = rng.uniform(0.0, 2.0, size=m)
        Le = float(rng.uniform(1e-3, 1.0))
        lam = cost_grad(h, u + Le)
        d_rsl, d_csl = gap_bounds(GapBoundInputs(lam, u, Le, h))
        slack = 1e-12 * max(1.0, abs(d_csl))
        gap = d_csl - d_rsl
        min_gap = min(min_gap, gap)
        bad_order = d_rsl > d_csl + slack
        bad_convex = gap < h.mu * Le**2 - slack
        order_viol += bool(bad_order)
        convex_viol += bool(bad_convex)
        rows.append(
            {"draw": k, "kind": h.kind, "m": m, "L_eps": Le, "mu": h.mu, "d_rsl": d_rsl, "d_csl": d_csl}
        )
    return {
        "draws": draws,
        "seed": seed,
        "violations": order_viol + convex_viol,
        "order_violations": order_viol,
        "strong_convexity_violations": convex_viol,
        "min_gap": float(min_gap),
        "rows": rows,
    }
