import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from resilient.instances import make_appendix_a, make_convex_qp, make_invariance_toy, make_svm
from resilient.losses import LossKind
from resilient.models import ModelFamily
from resilient.problem import (
    CoordinateCost,
    DatasetSplit,
    HypothesisSpace,
    ProblemInstance,
    RelaxationCost,
    cost_grad,
    cost_value,
    eval_constraints,
    eval_objective,
    load_split_csv,
    max_abs_loss,
)

from conftest import central_diff


def _costs(m):
    return [
        RelaxationCost.quadratic(0.7),
        RelaxationCost.linear(np.linspace(0.5, 2.0, m)),
        RelaxationCost.separable(
            [CoordinateCost(k, 0.8, 1.3) for k in ("quadratic", "linear", "exponential")][:m]
        ),
    ]


class TestEvaluation:
    def test_exact_objective_values(self):
        inst = make_appendix_a(1, seed=0, mode="exact")
        assert eval_objective(inst, [1.0, 1.0]) == 1 / 16
        assert eval_objective(inst, [1.0, 1 / 3]) == pytest.approx(5 / 48, abs=1e-15)

    def test_perfect_fit_is_zero(self):
        fam = ModelFamily("linear", 2)
        X = np.array([[1.0, 2.0], [3.0, -1.0], [1.0, 2.0], [3.0, -1.0]])
        theta = np.array([0.5, -2.0])
        inst = ProblemInstance(
            2, 0, (DatasetSplit(0, X, X @ theta),), LossKind("squared"), (),
            HypothesisSpace.differentiable(fam), 1.0,
        )
        assert eval_objective(inst, theta) == 0.0
        assert eval_constraints(inst, theta).shape == (0,)

    def test_theta_d_feasible(self):
        for seed in range(5):
            inst = make_appendix_a(50, seed=seed)
            c = eval_constraints(inst, [1.0, 0.0])
            assert c[0] == pytest.approx(0.0, abs=1e-15)
            assert c[1] == pytest.approx(-inst.meta["tau_bar"] - 1.0)
            assert np.all(c <= 1e-15)

    def test_constraints_match_direct_summation(self):
        inst = make_appendix_a(10, seed=3)
        X1, X2 = inst.splits[1].X, inst.splits[2].X
        tau = X1[:, 1]
        for theta in inst.hypothesis.candidates:
            c1 = sum(-theta[0] + t * theta[1] + 1.0 for t in tau) / 10
            c2 = sum(-t * theta[0] + theta[1] - 1.0 for t in X2[:, 0] * -1.0) / 10
            tb = tau.mean()
            np.testing.assert_allclose(eval_constraints(inst, theta), [c1, c2], atol=1e-14)
            np.testing.assert_allclose([c1, c2], [1 + tb * theta[1] - theta[0], theta[1] - tb * theta[0] - 1], atol=1e-14)

    def test_dimension_mismatch(self):
        inst = make_appendix_a(2, seed=0)
        with pytest.raises(ValueError):
            eval_objective(inst, [1.0])
        with pytest.raises(ValueError):
            eval_constraints(inst, [1.0, 2.0, 3.0])


class TestInstanceValidation:
    def _parts(self):
        fam = ModelFamily("linear", 2)
        s0 = DatasetSplit(0, np.ones((2, 2)), np.ones(2))
        s1 = DatasetSplit(1, np.ones((2, 2)), np.ones(2))
        return fam, s0, s1

    def test_split_indices(self):
        fam, s0, s1 = self._parts()
        with pytest.raises(ValueError):
            ProblemInstance(2, 1, (s1, s0), LossKind("squared"), (LossKind("squared"),), HypothesisSpace.differentiable(fam), 1.0)

    def test_constraint_count(self):
        fam, s0, s1 = self._parts()
        with pytest.raises(ValueError):
            ProblemInstance(2, 1, (s0, s1), LossKind("squared"), (), HypothesisSpace.differentiable(fam), 1.0)

    def test_empty_split(self):
        with pytest.raises(ValueError):
            DatasetSplit(0, np.zeros((0, 2)), np.zeros(0))

    def test_feature_dimension(self):
        fam, s0, _ = self._parts()
        bad = DatasetSplit(1, np.ones((2, 3)), np.ones(2))
        with pytest.raises(ValueError):
            ProblemInstance(2, 1, (s0, bad), LossKind("squared"), (LossKind("squared"),), HypothesisSpace.differentiable(fam), 1.0)

    def test_bound_and_empty_finite_space(self):
        fam, s0, _ = self._parts()
        with pytest.raises(ValueError):
            ProblemInstance(2, 0, (s0,), LossKind("squared"), (), HypothesisSpace.differentiable(fam), 0.0)
        with pytest.raises(ValueError):
            HypothesisSpace.finite(fam, [])

    def test_unknown_exact_evaluator(self):
        fam, s0, _ = self._parts()
        with pytest.raises(ValueError):
            ProblemInstance(2, 0, (s0,), LossKind("squared"), (), HypothesisSpace.differentiable(fam), 1.0, exact="nope")

    def test_arrays_are_frozen(self):
        _, s0, _ = self._parts()
        with pytest.raises(ValueError):
            s0.X[0, 0] = 5.0


class TestSerialization:
    @pytest.mark.parametrize(
        "inst",
        [
            make_appendix_a(5, seed=1, mode="exact"),
            make_convex_qp(2, 3, seed=0, n=7),
            make_svm([[1.0], [-1.0]], [1, -1], 2.0)[0],
            make_invariance_toy(0, 3, n=10, translation=2.0),
        ],
        ids=["four_candidate", "qp", "svm", "invariance"],
    )
    def test_round_trip(self, inst, tmp_path):
        path = tmp_path / "inst.json"
        inst.save(path)
        back = ProblemInstance.load(path)
        assert back.dumps() == inst.dumps()
        theta = np.array(inst.hypothesis.candidates[0]) if inst.hypothesis.kind == "finite" else np.full(inst.hypothesis.p, 0.3)
        assert eval_objective(back, theta) == eval_objective(inst, theta)
        np.testing.assert_array_equal(eval_constraints(back, theta), eval_constraints(inst, theta))

    def test_csv_loader(self, tmp_path):
        path = tmp_path / "split.csv"
        path.write_text("x1,x2,y\n1,2,1\n3,4,-1\n")
        s = load_split_csv(path, 1)
        np.testing.assert_array_equal(s.X, [[1, 2], [3, 4]])
        np.testing.assert_array_equal(s.y, [1, -1])
        assert s.index == 1


class TestLossBound:
    @pytest.mark.parametrize(
        "inst",
        [
            make_appendix_a(200, seed=4),
            make_convex_qp(2, 2, seed=1),
            make_svm([[1.0, 2.0], [-1.0, 0.5], [0.3, -0.2]], [1, -1, 1], 1.0)[0],
            make_invariance_toy(1, 5, translation=3.0),
        ],
        ids=["four_candidate", "qp", "svm", "invariance"],
    )
    def test_declared_bound_holds(self, inst, rng):
        if inst.hypothesis.kind == "finite":
            points = inst.hypothesis.candidates
        else:
            lo, hi = inst.hypothesis.bounds
            points = [rng.uniform(lo, hi, size=inst.hypothesis.p) for _ in range(50)]
            points.append(np.full(inst.hypothesis.p, hi))
            points.append(np.full(inst.hypothesis.p, lo))
        for theta in points:
            assert max_abs_loss(inst, theta) <= inst.loss_bound


class TestCosts:
    def test_values(self):
        assert cost_value(RelaxationCost.quadratic(1.0), [0.0, 0.0]) == 0.0
        assert cost_value(RelaxationCost.quadratic(2.0), [1.0, 0.5]) == 2.5
        assert cost_value(RelaxationCost.linear([3.0]), [0.2]) == pytest.approx(0.6)

    def test_gradients(self):
        np.testing.assert_array_equal(cost_grad(RelaxationCost.quadratic(1.0), [0.0, 0.0]), [0.0, 0.0])
        np.testing.assert_array_equal(cost_grad(RelaxationCost.quadratic(0.5), [2.0]), [2.0])
        np.testing.assert_array_equal(cost_grad(RelaxationCost.linear([1.0, 4.0]), [7.0, 0.1]), [1.0, 4.0])

    def test_negative_relaxation_rejected(self):
        for h in _costs(2):
            with pytest.raises(ValueError):
                cost_value(h, [-0.1, 0.0])
            with pytest.raises(ValueError):
                cost_grad(h, [0.0, -1e-9])

    def test_invalid_parameters(self):
        with pytest.raises(ValueError):
            RelaxationCost.quadratic(0.0)
        with pytest.raises(ValueError):
            RelaxationCost.linear([-1.0])
        with pytest.raises(ValueError):
            CoordinateCost("exponential", 1.0, 0.0)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            cost_value(RelaxationCost.linear([1.0, 2.0]), [1.0])

    def test_round_trip(self):
        for h in _costs(3):
            assert RelaxationCost.from_dict(h.to_dict()) == h

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(0.0, 5.0), min_size=3, max_size=3))
    def test_gradient_matches_finite_differences(self, u):
        u = np.array(u) + 1e-3
        for h in _costs(3):
            fd = central_diff(lambda v: cost_value(h, v), u, step=1e-6)
            g = cost_grad(h, u)
            assert np.all(g >= 0)
            assert np.linalg.norm(g - fd) <= 1e-6 * max(np.linalg.norm(g), 1.0)

    def test_normalized(self):
        for h in _costs(3):
            assert cost_value(h, np.zeros(3)) == 0.0

    @settings(max_examples=100, deadline=None)
    @given(
        st.lists(st.floats(0.0, 5.0), min_size=3, max_size=3),
        st.lists(st.one_of(st.just(0.0), st.floats(1e-3, 5.0)), min_size=3, max_size=3),
    )
    def test_componentwise_increasing(self, v, extra):
        v = np.array(v)
        w = v + np.array(extra)
        if np.all(w == v):
            return
        for h in _costs(3):
            assert cost_value(h, v) < cost_value(h, w)
