"""Command-line entry point: ``resilient-opt <command> [flags]``.

Exit status: 0 on success, 2 on a configuration error, 3 when the numerics
diverge, 1 for anything else.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import platform
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime
from pathlib import Path

import numpy as np
import pydantic
import scipy

from . import __version__
from .config import COMMANDS, RunConfig, load_config_file, parse_config
from .federated import FlConfig, make_blob_dataset, run_fl
from .instances import CONSTRUCTORS, make_svm, run_appendix_a_trials
from .oracle import (
    build_perturbation_grid,
    gap_bound_sweep,
    nested_grid_minimum,
    penalty_reference_solve,
    resilient_brute_force,
)
from .problem import CoordinateCost, ProblemInstance, RelaxationCost, cost_value, eval_objective
from .solver import DivergenceError, SolverConfig, run, summary

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3


class ConfigError(Exception):
    pass


def thread_count() -> int:
    raw = os.environ.get("RESILIENT_OPT_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"RESILIENT_OPT_THREADS must be an integer, got {raw!r}") from exc
    if n < 0:
        raise ConfigError("RESILIENT_OPT_THREADS must be >= 0")
    return n if n > 0 else (os.cpu_count() or 1)


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="resilient-opt", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file; flags override its fields")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        if name in ("solve", "oracle-grid", "sweep-alpha"):
            p.add_argument("--instance", dest="instance.name")
            p.add_argument("--instance-file", dest="instance.path")
            p.add_argument("--d", dest="instance.params.d", type=int)
            p.add_argument("--m", dest="instance.params.m", type=int)
            p.add_argument(
                "--param", dest="params", action="append", default=None, metavar="KEY=VALUE",
                help="extra instance constructor argument (value parsed as JSON when possible)",
            )
        if name in ("solve", "oracle-grid", "appendix-a"):
            p.add_argument("--alpha", dest="h.alpha", type=float)
            p.add_argument("--cost", dest="h.kind", choices=["quadratic", "linear", "separable"])
            p.add_argument("--gamma", dest="h.gamma", type=float)
        if name in ("solve", "sweep-alpha", "svm"):
            p.add_argument("--T", dest="solver.T", type=int)
            p.add_argument("--eta-theta", dest="solver.eta_theta", type=float)
            p.add_argument("--eta-u", dest="solver.eta_u", type=float)
            p.add_argument("--eta-lambda", dest="solver.eta_lambda", type=float)
            p.add_argument("--batch-mode", dest="solver.batch_mode")
            p.add_argument("--tol", dest="solver.tol", type=float)
        if name == "oracle-grid":
            p.add_argument("--lo", dest="grid.lo", type=float)
            p.add_argument("--hi", dest="grid.hi", type=float)
            p.add_argument("--num", dest="grid.num", type=int)
        if name == "appendix-a":
            p.add_argument("--n", dest="appendix_a.n", type=int)
            p.add_argument("--trials", dest="appendix_a.trials", type=int)
        if name == "sweep-alpha":
            p.add_argument("--alphas", dest="sweep.alphas", type=_floats)
        if name == "gap-bounds":
            p.add_argument("--draws", dest="gap.draws", type=int)
        if name == "svm":
            p.add_argument("--points", dest="svm.points", type=lambda s: [[v] for v in _floats(s)])
            p.add_argument("--labels", dest="svm.labels", type=lambda s: [int(v) for v in _floats(s)])
            p.add_argument("--svm-gamma", dest="svm.gamma", type=float)
        if name == "fl-sim":
            p.add_argument("--clients", dest="fl.clients", type=int)
            p.add_argument("--epsilon", dest="fl.epsilon", type=float)
            p.add_argument("--rounds", dest="fl.rounds", type=int)
            p.add_argument("--beta", dest="fl.beta", type=float)
            p.add_argument("--rho", dest="fl.rho", type=float)
            p.add_argument("--mode", dest="fl.mode")
            p.add_argument("--fl-alpha", dest="fl.alpha", type=float)
    return parser


def _param(text: str) -> tuple[str, object]:
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise ConfigError(f"--param expects KEY=VALUE, got {text!r}")
    try:
        return key, json.loads(raw)
    except json.JSONDecodeError:
        return key, raw


def _overrides(ns: argparse.Namespace) -> dict:
    """Turn dotted argparse destinations into a nested override dict."""
    out: dict = {}
    for text in getattr(ns, "params", None) or []:
        key, value = _param(text)
        out.setdefault("instance", {}).setdefault("params", {})[key] = value
    for key, value in vars(ns).items():
        if value is None or key in ("config", "params"):
            continue
        node = out
        *parents, leaf = key.split(".")
        for part in parents:
            node = node.setdefault(part, {})
        node[leaf] = value
    return out


def _format_validation(err: pydantic.ValidationError) -> str:
    lines = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "(root)"
        lines.append(f"{loc}: {e['msg']}")
    return "invalid configuration:\n  " + "\n  ".join(lines)


def config_from_args(argv) -> RunConfig:
    ns = build_parser().parse_args(argv)
    data = load_config_file(ns.config) if ns.config else {}
    return parse_config(data, _overrides(ns))


# builders


def build_instance(cfg: RunConfig) -> ProblemInstance:
    spec = cfg.instance
    if spec.path is not None:
        return ProblemInstance.load(spec.path)
    params = dict(spec.params)
    params.setdefault("seed", cfg.seed)
    try:
        return CONSTRUCTORS[spec.name](**params)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"instance.params: {exc}") from exc


def build_cost(cfg: RunConfig, m: int) -> RelaxationCost:
    spec = cfg.h
    if spec.kind == "quadratic":
        return RelaxationCost.quadratic(spec.alpha)
    if spec.kind == "linear":
        gamma = spec.gamma if isinstance(spec.gamma, list) else [spec.gamma] * m
        if len(gamma) != m:
            raise ConfigError(f"h.gamma: need {m} entries, got {len(gamma)}")
        return RelaxationCost.linear(gamma)
    if len(spec.terms) != m:
        raise ConfigError(f"h.terms: need {m} entries, got {len(spec.terms)}")
    return RelaxationCost.separable([CoordinateCost(t.kind, t.a, t.b) for t in spec.terms])


def build_solver_config(cfg: RunConfig) -> SolverConfig:
    s = cfg.solver
    return SolverConfig(
        eta_theta=s.eta_theta,
        eta_u=s.eta_u,
        eta_lambda=s.eta_lambda,
        T=s.T,
        batch_mode=s.batch_mode,
        tol=s.tol,
        seed=cfg.seed,
    )


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True, default=float))


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, (int, str)) else repr(float(v)) for v in row])


# commands; each returns the list of files it wrote


def cmd_solve(cfg: RunConfig, out: Path) -> list[Path]:
    inst = build_instance(cfg)
    if inst.hypothesis.kind != "differentiable":
        raise ConfigError("instance: solve needs a differentiable instance; use oracle-grid")
    h = build_cost(cfg, inst.m)
    traj, state = run(inst, h, build_solver_config(cfg))
    files = [out / "trajectory.csv", out / "summary.json"]
    traj.write_csv(files[0])
    data = summary(traj, state, inst, h)
    data.pop("wall_time")  # timing lives in the manifest only
    data["resilient_value"] = data["objective"] + cost_value(h, state.u)
    _write_json(files[1], data)
    return files


def cmd_oracle_grid(cfg: RunConfig, out: Path) -> list[Path]:
    inst = build_instance(cfg)
    h = build_cost(cfg, inst.m)
    axis = np.linspace(cfg.grid.lo, cfg.grid.hi, cfg.grid.num)
    try:
        grid = build_perturbation_grid(inst, [axis] * inst.m)
    except TypeError as exc:
        raise ConfigError(f"instance: {exc}") from exc
    files = [out / "grid.csv", out / "oracle.json"]
    grid.write_csv(files[0])
    theta, u, value = resilient_brute_force(inst, h)
    data = {"brute_force": {"theta": theta.tolist(), "u": u.tolist(), "value": value}}
    try:
        nested, u_grid = nested_grid_minimum(grid, h)
        data["nested_grid"] = {"value": nested, "u": u_grid.tolist()}
    except ValueError:
        data["nested_grid"] = None
    _write_json(files[1], data)
    return files


def cmd_appendix_a(cfg: RunConfig, out: Path) -> list[Path]:
    spec = cfg.appendix_a
    h = build_cost(cfg, 2)
    kwargs = {} if spec.relax == "over" else {"relax": np.array(spec.relax)}
    if spec.relax != "over" and len(spec.relax) != 2:
        raise ConfigError("appendix_a.relax: need two entries")
    report = run_appendix_a_trials(
        spec.n, spec.trials, cfg.seed, h, workers=thread_count(), **kwargs
    )
    path = out / "selection.json"
    report.save(path)
    return [path]


def _fl_config(cfg: RunConfig) -> FlConfig:
    f = cfg.fl
    return FlConfig(
        C=f.clients,
        epsilon=f.epsilon,
        h=RelaxationCost.quadratic(f.alpha),
        eta_u=f.eta_u,
        eta_lambda=f.eta_lambda,
        rounds=f.rounds,
        local_epochs=f.local_epochs,
        local_step=f.local_step,
        batch_size=f.batch_size,
        beta=f.beta,
        minority=tuple(f.minority),
        rho=f.rho,
        seed=cfg.seed,
        mode=f.mode,
    )


def cmd_fl_sim(cfg: RunConfig, out: Path) -> list[Path]:
    f = cfg.fl
    if any(not 0 <= c < 10 for c in f.minority):
        raise ConfigError("fl.minority: class labels must lie in 0..9")
    dataset = make_blob_dataset(
        cfg.seed, f.n_per_class, f.n_test_per_class, separation=f.separation
    )
    result = run_fl(dataset, _fl_config(cfg), workers=thread_count())
    files = [out / "metrics.csv", out / "summary.json"]
    result.write_csv(files[0])
    result.write_summary(files[1])
    return files


def cmd_sweep_alpha(cfg: RunConfig, out: Path) -> list[Path]:
    inst = build_instance(cfg)
    if inst.hypothesis.kind != "differentiable":
        raise ConfigError("instance: sweep-alpha needs a differentiable instance")
    solver_cfg = build_solver_config(cfg)
    alphas = cfg.sweep.alphas

    def point(alpha):
        h = RelaxationCost.quadratic(alpha)
        traj, state = run(inst, h, solver_cfg)
        return traj, state, h

    with ThreadPoolExecutor(max_workers=thread_count()) as pool:
        results = list(pool.map(point, alphas))
    files, rows = [], []
    for k, (alpha, (traj, state, h)) in enumerate(zip(alphas, results)):
        path = out / f"trajectory_{k:03d}.csv"
        traj.write_csv(path)
        files.append(path)
        obj = eval_objective(inst, state.theta)
        rows.append((alpha, float(np.linalg.norm(state.u)), obj, obj + cost_value(h, state.u), traj.records[-1]["residual"]))
    sweep = out / "sweep.csv"
    _write_rows(sweep, ["alpha", "u_norm", "objective", "resilient_value", "residual"], rows)
    return [sweep] + files


def cmd_gap_bounds(cfg: RunConfig, out: Path) -> list[Path]:
    result = gap_bound_sweep(cfg.gap.draws, cfg.seed)
    rows = result.pop("rows")
    files = [out / "gap_bounds.json", out / "gap_draws.csv"]
    _write_json(files[0], result)
    keys = ["draw", "kind", "m", "L_eps", "mu", "d_rsl", "d_csl"]
    _write_rows(files[1], keys, ([r[k] for k in keys] for r in rows))
    return files


def cmd_svm(cfg: RunConfig, out: Path) -> list[Path]:
    s = cfg.svm
    if len(s.points) != len(s.labels):
        raise ConfigError("svm.labels: need one label per point")
    inst, h = make_svm(s.points, s.labels, s.gamma)
    traj, state = run(inst, h, build_solver_config(cfg))
    ref = penalty_reference_solve(
        inst, h.gamma, s.reference_steps, seed=cfg.seed, step_size=0.1, positive_part=True
    )
    files = [out / "trajectory.csv", out / "svm.json"]
    traj.write_csv(files[0])
    data = summary(traj, state, inst, h)
    data.pop("wall_time")
    data["penalty_reference_theta"] = ref.tolist()
    data["margins"] = (np.asarray(s.labels) * (np.asarray(s.points) @ state.theta)).tolist()
    _write_json(files[1], data)
    return files


HANDLERS = {
    "solve": cmd_solve,
    "oracle-grid": cmd_oracle_grid,
    "appendix-a": cmd_appendix_a,
    "fl-sim": cmd_fl_sim,
    "sweep-alpha": cmd_sweep_alpha,
    "gap-bounds": cmd_gap_bounds,
    "svm": cmd_svm,
}


def output_dir(cfg: RunConfig) -> Path:
    if cfg.out:
        return Path(cfg.out)
    stamp = datetime.now().strftime("%Y%m%d-%H%M%S")
    return Path(f"{cfg.command}-seed{cfg.seed}-{stamp}")


def execute(cfg: RunConfig) -> tuple[int, Path]:
    out = output_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    files = HANDLERS[cfg.command](cfg, out)
    manifest = {
        "command": cfg.command,
        "seed": cfg.seed,
        "config": cfg.model_dump(mode="json"),
        "versions": {
            "package": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "pydantic": pydantic.VERSION,
        },
        "wall_time": time.perf_counter() - start,
        "files": [p.name for p in files],
    }
    _write_json(out / "manifest.json", manifest)
    return EXIT_OK, out


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        cfg = config_from_args(argv)
        code, out = execute(cfg)
    except pydantic.ValidationError as err:
        print(_format_validation(err), file=sys.stderr)
        return EXIT_CONFIG
    except (ConfigError, FileNotFoundError, ValueError) as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as err:
        print(f"diverged: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    except SystemExit as err:
        # argparse reports usage errors with status 2 already
        return int(err.code) if isinstance(err.code, int) else EXIT_CONFIG
    except Exception as err:
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_ERROR
    print(str(out))
    return code


if __name__ == "__main__":
    sys.exit(main())
