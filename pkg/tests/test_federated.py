import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from resilient.federated import (
    CE,
    ClientShard,
    FlConfig,
    FlWorld,
    client_risk,
    client_update,
    compute_weights,
    dirichlet_partition,
    initial_world,
    local_dual_update,
    make_blob_dataset,
    run_fl,
    server_round,
    with_mode,
)
from resilient.models import ModelFamily
from resilient.problem import DatasetSplit, HypothesisSpace, ProblemInstance, RelaxationCost
from resilient.solver import DivergenceError, SolverConfig, SolverState, theta_update


@pytest.fixture(scope="module")
def data():
    return make_blob_dataset(seed=0)


@pytest.fixture(scope="module")
def small_data():
    return make_blob_dataset(seed=1, n_per_class=40, n_test_per_class=20, d=6, k=3)


def _family(ds):
    return ModelFamily("affine", ds.d, ds.n_classes)


def _world(lam, u=None, risks=None):
    lam = np.asarray(lam, dtype=float)
    C = lam.size
    return FlWorld(np.zeros(3), lam, np.zeros(C) if u is None else np.asarray(u), np.zeros(C) if risks is None else np.asarray(risks))


class TestPartition:
    def test_concentrated_prior_matches_global(self, data):
        shards = dirichlet_partition(data, FlConfig(beta=1e6, rho=1.0))
        for s in shards:
            props = np.bincount(s.y.astype(int), minlength=10) / s.n
            assert 0.5 * np.abs(props - 0.1).sum() <= 0.05

    def test_deterministic(self, data):
        a = dirichlet_partition(data, FlConfig(seed=4))
        b = dirichlet_partition(data, FlConfig(seed=4))
        for sa, sb in zip(a, b):
            np.testing.assert_array_equal(sa.X, sb.X)
            np.testing.assert_array_equal(sa.y_test, sb.y_test)
        c = dirichlet_partition(data, FlConfig(seed=5))
        assert any(sa.n != sc.n or not np.array_equal(sa.y, sc.y) for sa, sc in zip(a, c))

    def test_minority_counts(self, data):
        cfg = FlConfig()
        shards = dirichlet_partition(data, cfg)
        y = np.concatenate([s.y for s in shards]).astype(int)
        for c in range(10):
            expected = int(np.floor(0.1 * 300)) if c in cfg.minority else 300
            assert np.sum(y == c) == expected

    def test_disjoint_and_nonempty(self, data):
        shards = dirichlet_partition(data, FlConfig(seed=2))
        rows = np.concatenate([s.X for s in shards])
        assert all(s.n >= 1 for s in shards)
        assert np.unique(rows, axis=0).shape[0] == rows.shape[0]

    def test_minority_fraction_and_test_balance(self, data):
        cfg = FlConfig(seed=3)
        for s in dirichlet_partition(data, cfg):
            assert s.minority_fraction == pytest.approx(np.isin(s.y, cfg.minority).mean())
            assert s.y_test.size == cfg.n_test
            train_classes = set(np.unique(s.y).astype(int))
            assert set(np.unique(s.y_test).astype(int)) <= train_classes

    def test_too_few_samples(self, small_data):
        with pytest.raises(ValueError):
            dirichlet_partition(small_data, FlConfig(C=500, minority=()))


class TestWeights:
    def test_zero_multipliers(self):
        np.testing.assert_array_equal(compute_weights(_world(np.zeros(4))), np.ones(4))

    def test_hand_example(self):
        np.testing.assert_allclose(compute_weights(_world([0.2, 0.0])), [1.1, 0.9], rtol=1e-15)

    @settings(max_examples=100)
    @given(st.lists(st.floats(0.0, 100.0), min_size=1, max_size=30))
    def test_sum_is_client_count(self, lam):
        w = compute_weights(_world(lam))
        assert abs(w.sum() - len(lam)) <= 1e-12 * max(1.0, sum(lam))


class TestClientUpdate:
    def _shard(self, ds, n=50):
        return ClientShard(0, ds.X[:n], ds.y[:n], ds.X_test[:10], ds.y_test[:10], 0.0)

    def test_no_work(self, small_data):
        fam = _family(small_data)
        theta = np.random.default_rng(0).normal(size=fam.n_params)
        shard = self._shard(small_data)
        np.testing.assert_array_equal(client_update(shard, theta, 1.0, 0, 0.1, fam), theta)
        np.testing.assert_array_equal(client_update(shard, theta, 0.0, 3, 0.1, fam), theta)

    def test_rejects_nonfinite_weight(self, small_data):
        fam = _family(small_data)
        with pytest.raises(ValueError):
            client_update(self._shard(small_data), np.zeros(fam.n_params), np.inf, 1, 0.1, fam)

    def test_matches_solver_pass(self, small_data):
        fam = _family(small_data)
        shard = self._shard(small_data, n=37)
        theta = np.random.default_rng(1).normal(scale=0.1, size=fam.n_params)
        got = client_update(shard, theta, 1.0, 1, 0.05, fam, batch_size=1)
        inst = ProblemInstance(
            fam.d, 0, (DatasetSplit(0, shard.X, shard.y),), CE, (),
            HypothesisSpace.differentiable(fam), 100.0,
        )
        state = SolverState(theta, np.zeros(0), np.zeros(0), 0)
        ref = theta_update(inst, RelaxationCost.quadratic(1.0), state, SolverConfig(eta_theta=0.05, batch_mode="per-sample-pass"))
        np.testing.assert_allclose(got, ref, rtol=1e-12, atol=1e-14)

    def test_reduces_local_risk(self, small_data):
        fam = _family(small_data)
        shard = self._shard(small_data)
        theta = np.zeros(fam.n_params)
        new = client_update(shard, theta, 1.0, 5, 0.05, fam)
        assert client_risk(fam, new, shard.X, shard.y) < client_risk(fam, theta, shard.X, shard.y)

    def test_divergence_guard(self, small_data):
        fam = _family(small_data)
        with pytest.raises(DivergenceError):
            client_update(self._shard(small_data), np.zeros(fam.n_params), -1.0, 1, 1e7, fam)


class TestDualUpdate:
    def test_hand_example(self):
        cfg = FlConfig(C=2, epsilon=0.1, eta_lambda=1.0)
        lam, u = local_dual_update(np.zeros(2), np.zeros(2), [0.9, 0.5], 0.7, cfg)
        np.testing.assert_allclose(lam, [0.1, 0.0], atol=1e-15)
        np.testing.assert_array_equal(u, [0.0, 0.0])

    def test_relaxation_then_multiplier(self):
        cfg = FlConfig(C=1, epsilon=0.0, eta_u=0.5, eta_lambda=1.0, h=RelaxationCost.quadratic(0.5))
        lam, u = local_dual_update([1.0], [0.0], [1.0], 0.0, cfg)
        # u = 0 - 0.5 * (0 - 1) = 0.5, then lam = 1 + (1 - 0.5) = 1.5
        np.testing.assert_allclose(u, [0.5])
        np.testing.assert_allclose(lam, [1.5])

    def test_constrained_freezes_u(self):
        cfg = FlConfig(C=2, mode="constrained")
        _, u = local_dual_update([3.0, 3.0], [0.4, 0.0], [1.0, 0.0], 0.5, cfg)
        np.testing.assert_array_equal(u, [0.0, 0.0])


class TestRounds:
    def test_identical_clients_stay_unweighted(self, small_data):
        fam = _family(small_data)
        base = ClientShard(0, small_data.X, small_data.y, small_data.X_test, small_data.y_test, 0.0)
        shards = [ClientShard(i, base.X, base.y, base.X_test, base.y_test, 0.0) for i in range(4)]
        cfg = FlConfig(C=4, rounds=5, minority=())
        res = run_fl(small_data, cfg, shards=shards, workers=1)
        np.testing.assert_array_equal(res.world.lam, np.zeros(4))
        np.testing.assert_array_equal(res.world.u, np.zeros(4))

    def test_infinite_tolerance_is_fedavg(self, small_data):
        cfg = FlConfig(C=3, epsilon=np.inf, rounds=6, minority=(), mode="constrained", local_epochs=2)
        shards = dirichlet_partition(small_data, cfg)
        fam = _family(small_data)
        res = run_fl(small_data, cfg, shards=shards, workers=1)
        theta = initial_world(shards, cfg, fam).theta
        sizes = np.array([s.n for s in shards], dtype=float)
        for t in range(cfg.rounds):
            locals_ = [client_update(s, theta, 1.0, 2, cfg.local_step, fam, cfg.batch_size) for s in shards]
            theta = sum(a * th for a, th in zip(sizes / sizes.sum(), locals_))
            np.testing.assert_allclose(res.thetas[t + 1], theta, rtol=0, atol=1e-12)
        assert np.all(res.world.lam == 0) and np.all(res.world.u == 0)

    def test_large_tolerance_keeps_duals_zero(self, small_data):
        cfg = FlConfig(C=3, epsilon=10.0, rounds=5, minority=())
        res = run_fl(small_data, cfg, workers=1)
        assert all(r["lambda"] == 0 and r["u"] == 0 for r in res.rows)

    def test_threads_do_not_change_results(self, small_data):
        cfg = FlConfig(C=3, rounds=4, minority=(0,), epsilon=0.0)
        a = run_fl(small_data, cfg, workers=1)
        b = run_fl(small_data, cfg, workers=3)
        assert a.rows == b.rows

    def test_server_round_uses_broadcast_risk(self, small_data):
        cfg = FlConfig(C=3, minority=(), epsilon=0.0, eta_lambda=1.0, mode="constrained")
        shards = dirichlet_partition(small_data, cfg)
        fam = _family(small_data)
        world = initial_world(shards, cfg, fam)
        stale = FlWorld(world.theta, world.lam, world.u, np.full(3, 5.0), 0)
        new = server_round(stale, shards, cfg, fam)
        fresh = np.array([client_risk(fam, world.theta, s.X, s.y) for s in shards])
        np.testing.assert_allclose(new.risks, fresh)
        np.testing.assert_allclose(new.lam, np.maximum(fresh - 5.0, 0.0))
        assert new.round == 1


@settings(max_examples=8, deadline=None)
@given(seed=st.integers(0, 1000), eps=st.floats(0.0, 0.3), eta=st.floats(0.01, 1.0))
def test_duals_nonnegative_every_round(seed, eps, eta):
    ds = make_blob_dataset(seed=seed, n_per_class=30, n_test_per_class=10, d=5, k=3)
    cfg = FlConfig(C=3, epsilon=eps, eta_u=eta, eta_lambda=eta, rounds=5, minority=(0,), seed=seed)
    res = run_fl(ds, cfg, workers=1)
    for r in res.rows:
        assert r["lambda"] >= 0 and r["u"] >= 0
    w = compute_weights(res.world)
    assert abs(w.mean() - 1.0) <= 1e-12


class TestRunFl:
    @pytest.fixture(scope="class")
    @staticmethod
    def result(data):
        return run_fl(data, FlConfig(rounds=10), workers=1)

    def test_shapes(self, result):
        assert len(result.rows) == 11 * 10
        assert len(result.thetas) == 11
        assert {"spearman_u_minority", "max_lambda", "infeasible_fraction_test"} <= set(result.summary)

    def test_deterministic(self, data, result):
        again = run_fl(data, FlConfig(rounds=10), workers=1)
        assert again.rows == result.rows and again.summary == result.summary

    def test_outputs(self, result, tmp_path):
        result.write_csv(tmp_path / "m.csv")
        result.write_summary(tmp_path / "s.json")
        rows = list(csv.reader(open(tmp_path / "m.csv")))
        assert rows[0][:7] == ["round", "client", "lambda", "u", "risk", "violation_train", "violation_test"]
        assert len(rows) == 111
        summary = json.loads((tmp_path / "s.json").read_text())
        assert summary["config"]["beta"] == 0.3

    def test_with_mode(self):
        cfg = with_mode(FlConfig(), "constrained", epsilon=0.02)
        assert cfg.mode == "constrained" and cfg.epsilon == 0.02


class TestConfig:
    @pytest.mark.parametrize(
        "kwargs",
        [{"C": 0}, {"epsilon": -0.1}, {"beta": 0.0}, {"rho": 0.0}, {"rho": 1.5}, {"mode": "x"}, {"eta_u": -1.0}],
    )
    def test_rejects(self, kwargs):
        with pytest.raises(ValueError):
            FlConfig(**kwargs)

    def test_per_client_cost_size(self):
        with pytest.raises(ValueError):
            FlConfig(C=3, h=RelaxationCost.linear([1.0, 1.0]))
