import numpy as np
import pytest

from resilient.losses import LossKind
from resilient.models import ModelFamily
from resilient.problem import DatasetSplit, HypothesisSpace, ProblemInstance


def central_diff(f, x, step=1e-6):
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = step
        g[j] = (f(x + e) - f(x - e)) / (2 * step)
    return g


def rel_error(a, b, floor=1e-6):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def random_finite_instance(rng, K=5, m=2, d=2, n=6):
    """Finite instance with linear-form losses and random offsets."""
    family = ModelFamily("linear", d)
    splits = [DatasetSplit(i, rng.normal(size=(n, d)), rng.choice([-1.0, 1.0], size=n)) for i in range(m + 1)]
    cons = tuple(LossKind("linear-form", offset=float(rng.normal())) for _ in range(m))
    cands = [rng.normal(size=d) for _ in range(K)]
    return ProblemInstance(
        d=d,
        m=m,
        splits=tuple(splits),
        objective=LossKind("absolute-linear"),
        constraints=cons,
        hypothesis=HypothesisSpace.finite(family, cands),
        loss_bound=100.0,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
