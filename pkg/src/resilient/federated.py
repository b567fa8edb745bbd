"""Single-process simulator of resilient federated learning.

Each client i carries a proximity constraint R_i - mean_j R_j <= eps + u_i on
its risk, a multiplier lam_i and a relaxation u_i. Clients train on a
reweighted loss, the server averages parameters by shard size, and the dual
and relaxation updates happen locally on each client.
"""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.stats import spearmanr

from .losses import LossKind
from .models import ModelFamily, init_params, loss_mean_grad, loss_values
from .problem import RelaxationCost, cost_grad
from .solver import DIVERGENCE_FACTOR, DivergenceError

MODES = ("resilient", "constrained")
CE = LossKind("logistic")


@dataclass(frozen=True)
class FlDataset:
    X: np.ndarray
    y: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    n_classes: int

    @property
    def d(self) -> int:
        return self.X.shape[1]


def make_blob_dataset(
    seed: int = 0,
    n_per_class: int = 300,
    n_test_per_class: int = 100,
    d: int = 20,
    k: int = 10,
    separation: float = 2.0,
) -> FlDataset:
    """Balanced k-class Gaussian blobs with unit noise.

    Class c is centred at ``separation * e_c`` so every pair of classes is
    equally far apart and class difficulty comes only from class frequency.
    """
    if k > d:
        raise ValueError("need d >= k for axis-aligned class means")
    rng = np.random.default_rng(seed)
    means = separation * np.eye(k, d)

    def draw(n):
        y = np.repeat(np.arange(k), n)
        return means[y] + rng.normal(size=(y.size, d)), y.astype(float)

    X, y = draw(n_per_class)
    X_test, y_test = draw(n_test_per_class)
    return FlDataset(X, y, X_test, y_test, k)


@dataclass(frozen=True)
class ClientShard:
    client: int
    X: np.ndarray
    y: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    minority_fraction: float

    @property
    def n(self) -> int:
        return self.y.size


@dataclass(frozen=True)
class FlConfig:
    C: int = 10
    epsilon: float = 0.1
    h: RelaxationCost = field(default_factory=lambda: RelaxationCost.quadratic(1.0))
    eta_u: float = 0.1
    eta_lambda: float = 0.1
    rounds: int = 100
    local_epochs: int = 1
    local_step: float = 0.05
    batch_size: int = 32
    beta: float = 0.3
    minority: tuple[int, ...] = (0, 2, 4)
    rho: float = 0.1
    n_test: int = 100
    seed: int = 0
    mode: str = "resilient"

    def __post_init__(self):
        if self.C < 1:
            raise ValueError("C must be at least 1")
        if not self.epsilon >= 0:
            raise ValueError("epsilon must be nonnegative")
        for name in ("eta_u", "eta_lambda", "local_step"):
            if not (np.isfinite(getattr(self, name)) and getattr(self, name) >= 0):
                raise ValueError(f"{name} must be a nonnegative finite number")
        if self.rounds < 0 or self.local_epochs < 0 or self.batch_size < 1 or self.n_test < 1:
            raise ValueError("rounds and local_epochs must be >= 0; batch_size, n_test >= 1")
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if not 0 < self.rho <= 1:
            raise ValueError("rho must lie in (0, 1]")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.h.size is not None and self.h.size != self.C:
            raise ValueError("per-client cost needs one term per client")
        object.__setattr__(self, "minority", tuple(int(c) for c in self.minority))

    def to_dict(self) -> dict:
        out = asdict(self)
        out["h"] = self.h.to_dict()
        out["minority"] = list(self.minority)
        return out


@dataclass(frozen=True)
class FlWorld:
    theta: np.ndarray
    lam: np.ndarray
    u: np.ndarray
    risks: np.ndarray
    round: int = 0

    @property
    def lam_bar(self) -> float:
        return float(self.lam.mean())

    @property
    def risk_bar(self) -> float:
        return float(self.risks.mean())


# partitioning


def _largest_remainder(p: np.ndarray, total: int) -> np.ndarray:
    raw = p * total
    counts = np.floor(raw).astype(int)
    short = total - counts.sum()
    if short > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def _fill_quota(prior: np.ndarray, avail: np.ndarray, quota: int) -> np.ndarray:
    """Class counts for one client: follow the prior, skipping exhausted classes."""
    take = np.zeros_like(avail)
    left = avail.copy()
    need = quota
    while need > 0 and left.sum() > 0:
        p = np.where(left > 0, prior, 0.0)
        if p.sum() <= 0:
            break
        got = np.minimum(_largest_remainder(p / p.sum(), need), left)
        take += got
        left -= got
        need -= int(got.sum())
    return take


def dirichlet_partition(dataset: FlDataset, config: FlConfig) -> list[ClientShard]:
    """Split the training pool among clients with Dirichlet class priors.

    Minority classes are first thinned to floor(rho * count). One client at a
    time, a class prior is drawn from Dir(beta, ..., beta) and the client's
    quota is filled without replacement; once a class runs out, later clients
    get none of it. Test shards follow each client's train balance, sampled
    without replacement within a client but independently across clients.
    """
    rng = np.random.default_rng(config.seed)
    K = dataset.n_classes
    labels = dataset.y.astype(int)
    pools = []
    for c in range(K):
        idx = rng.permutation(np.flatnonzero(labels == c))
        if c in config.minority:
            idx = idx[: int(np.floor(config.rho * idx.size))]
        pools.append(list(idx))
    total = sum(len(p) for p in pools)
    if total < config.C:
        raise ValueError(f"{total} samples cannot cover {config.C} clients")
    quota = total // config.C
    test_labels = dataset.y_test.astype(int)
    test_pools = [np.flatnonzero(test_labels == c) for c in range(K)]
    shards = []
    for i in range(config.C):
        avail = np.array([len(p) for p in pools])
        for _ in range(10):
            take = _fill_quota(rng.dirichlet(np.full(K, config.beta)), avail, quota)
            if take.sum() > 0:
                break
        else:
            raise ValueError(f"client {i} received no samples after 10 prior draws")
        idx = []
        for c, t in enumerate(take):
            idx.extend(pools[c][:t])
            del pools[c][:t]
        idx = np.array(idx, dtype=int)
        counts = take.astype(float)
        test_counts = _largest_remainder(counts / counts.sum(), config.n_test)
        test_idx = np.concatenate(
            [
                rng.choice(test_pools[c], size=n, replace=n > test_pools[c].size)
                for c, n in enumerate(test_counts)
                if n > 0
            ]
        )
        minority = float(counts[list(config.minority)].sum() / counts.sum()) if config.minority else 0.0
        shards.append(
            ClientShard(
                i,
                dataset.X[idx],
                dataset.y[idx],
                dataset.X_test[test_idx],
                dataset.y_test[test_idx],
                minority,
            )
        )
    return shards


# client and server steps


def compute_weights(world: FlWorld) -> np.ndarray:
    """w_i = 1 + lam_i - mean(lam); the weights average to one."""
    return 1.0 + world.lam - world.lam_bar


def client_risk(family: ModelFamily, theta, X, y) -> float:
    return float(loss_values(CE, family, theta, X, y).mean())


def client_update(
    shard: ClientShard,
    theta,
    weight: float,
    epochs: int,
    step: float,
    family: ModelFamily,
    batch_size: int = 32,
) -> np.ndarray:
    """Local gradient steps on weight * (mean minibatch loss), in shard order."""
    if not np.isfinite(weight):
        raise ValueError("client weight must be finite")
    theta = np.array(theta, dtype=float)
    if epochs == 0 or weight == 0.0 or step == 0.0:
        return theta
    start = abs(weight) * client_risk(family, theta, shard.X, shard.y)
    limit = DIVERGENCE_FACTOR * (start + 1.0)
    for _ in range(epochs):
        for lo in range(0, shard.n, batch_size):
            Xb, yb = shard.X[lo : lo + batch_size], shard.y[lo : lo + batch_size]
            theta = theta - step * weight * loss_mean_grad(CE, family, theta, Xb, yb)
        if not np.all(np.isfinite(theta)):
            raise DivergenceError(f"client {shard.client} produced non-finite parameters")
        if abs(weight) * client_risk(family, theta, shard.X, shard.y) > limit:
            raise DivergenceError(f"client {shard.client} local loss blew up")
    return theta


def local_dual_update(lam, u, risks, risk_bar, config: FlConfig):
    """Relaxation step then multiplier step, elementwise over clients."""
    lam = np.asarray(lam, dtype=float)
    u = np.asarray(u, dtype=float)
    if config.mode == "resilient":
        u = np.maximum(u - config.eta_u * (cost_grad(config.h, u) - lam), 0.0)
    else:
        u = np.zeros_like(u)
    slack = np.asarray(risks) - risk_bar - config.epsilon - u
    lam = np.maximum(lam + config.eta_lambda * slack, 0.0)
    return lam, u


def _workers() -> int:
    raw = os.environ.get("RESILIENT_OPT_THREADS", "1")
    n = int(raw) if raw.strip() else 1
    if n == 0:
        return os.cpu_count() or 1
    return max(n, 1)


def server_round(
    world: FlWorld,
    shards: list[ClientShard],
    config: FlConfig,
    family: ModelFamily,
    workers: int = 1,
) -> FlWorld:
    """One communication round.

    The server broadcasts theta, mean lambda and the mean risk reported last
    round; clients evaluate their risk at theta, train locally and report.
    """
    weights = compute_weights(world)
    theta = world.theta

    def work(i):
        s = shards[i]
        risk = client_risk(family, theta, s.X, s.y)
        local = client_update(
            s, theta, weights[i], config.local_epochs, config.local_step, family, config.batch_size
        )
        return risk, local

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, range(len(shards))))
    else:
        results = [work(i) for i in range(len(shards))]
    sizes = np.array([s.n for s in shards], dtype=float)
    agg = sizes / sizes.sum()
    new_theta = np.zeros_like(theta)
    for a, (_, local) in zip(agg, results):
        new_theta += a * local
    risks = np.array([r for r, _ in results])
    lam, u = local_dual_update(world.lam, world.u, risks, world.risk_bar, config)
    return FlWorld(new_theta, lam, u, risks, world.round + 1)


# driver


@dataclass
class FlResult:
    rows: list[dict]
    summary: dict
    world: FlWorld
    thetas: list[np.ndarray]

    COLUMNS = (
        "round", "client", "lambda", "u", "risk", "violation_train", "violation_test",
        "violation_train_unshifted", "violation_test_unshifted",
    )

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for r in self.rows:
                w.writerow([r["round"], r["client"]] + [repr(float(r[c])) for c in self.COLUMNS[2:]])

    def write_summary(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary, fh, indent=2, sort_keys=True)


def _metrics(world: FlWorld, shards, family, config) -> list[dict]:
    train = np.array([client_risk(family, world.theta, s.X, s.y) for s in shards])
    test = np.array([client_risk(family, world.theta, s.X_test, s.y_test) for s in shards])
    raw_train = train - train.mean() - config.epsilon
    raw_test = test - test.mean() - config.epsilon
    return [
        {
            "round": world.round,
            "client": i,
            "lambda": world.lam[i],
            "u": world.u[i],
            "risk": train[i],
            "violation_train": raw_train[i] - world.u[i],
            "violation_test": raw_test[i] - world.u[i],
            "violation_train_unshifted": raw_train[i],
            "violation_test_unshifted": raw_test[i],
        }
        for i in range(len(shards))
    ]


def initial_world(shards, config: FlConfig, family: ModelFamily) -> FlWorld:
    theta = init_params(family, np.random.default_rng(config.seed))
    risks = np.array([client_risk(family, theta, s.X, s.y) for s in shards])
    C = len(shards)
    return FlWorld(theta, np.zeros(C), np.zeros(C), risks, 0)


def run_fl(
    dataset: FlDataset,
    config: FlConfig,
    shards: list[ClientShard] | None = None,
    workers: int | None = None,
) -> FlResult:
    """Run ``config.rounds`` rounds and collect per-round, per-client metrics.

    Metrics at round t are measured at the model broadcast in that round, with
    same-round averages; round ``rounds`` is the final model.
    """
    workers = _workers() if workers is None else workers
    shards = dirichlet_partition(dataset, config) if shards is None else shards
    family = ModelFamily("affine", dataset.d, dataset.n_classes)
    world = initial_world(shards, config, family)
    rows, thetas = [], [world.theta]
    for _ in range(config.rounds):
        rows.extend(_metrics(world, shards, family, config))
        world = server_round(world, shards, config, family, workers)
        thetas.append(world.theta)
    final = _metrics(world, shards, family, config)
    rows.extend(final)
    minority = np.array([s.minority_fraction for s in shards])
    rho = None
    if np.ptp(world.u) > 0 and np.ptp(minority) > 0:
        rho = float(spearmanr(world.u, minority).statistic)
    summary = {
        "config": config.to_dict(),
        "rounds": config.rounds,
        "spearman_u_minority": rho,
        "max_lambda": float(world.lam.max()),
        "max_u": float(world.u.max()),
        "infeasible_fraction_train": float(np.mean([r["violation_train"] > 0 for r in final])),
        "infeasible_fraction_test": float(np.mean([r["violation_test"] > 0 for r in final])),
        "infeasible_fraction_test_unshifted": float(
            np.mean([r["violation_test_unshifted"] > 0 for r in final])
        ),
        "minority_fraction": minority.tolist(),
        "final_lambda": world.lam.tolist(),
        "final_u": world.u.tolist(),
        "final_risk_train": [r["risk"] for r in final],
    }
    return FlResult(rows, summary, world, thetas)


def with_mode(config: FlConfig, mode: str, **changes) -> FlConfig:
    return replace(config, mode=mode, **changes)
