"""Predictor families with analytic gradients of composite losses.

Parameters are flat float vectors. Layouts:

* ``linear``: ``W`` (k, d), row-major.
* ``affine``: ``W`` (k, d) then ``b`` (k,).
* ``mlp``: ``W1`` (H, d), ``b1`` (H,), ``W2`` (k, H), ``b2`` (k,); tanh hidden layer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .losses import LossKind, base_grads, base_values

FAMILIES = ("linear", "affine", "mlp")


@dataclass(frozen=True)
class ModelFamily:
    kind: str
    d: int
    k: int = 1
    hidden: int = 0

    def __post_init__(self):
        if self.kind not in FAMILIES:
            raise ValueError(f"unknown model family {self.kind!r}")
        if self.d < 1 or self.k < 1:
            raise ValueError("model widths must be positive")
        if self.kind == "mlp" and self.hidden < 1:
            raise ValueError("mlp needs hidden >= 1")

    @property
    def n_params(self) -> int:
        d, k, H = self.d, self.k, self.hidden
        if self.kind == "linear":
            return k * d
        if self.kind == "affine":
            return k * (d + 1)
        return H * d + H + k * H + k

    def to_dict(self) -> dict:
        return {"kind": self.kind, "d": self.d, "k": self.k, "hidden": self.hidden}

    @classmethod
    def from_dict(cls, data: dict) -> "ModelFamily":
        return cls(data["kind"], int(data["d"]), int(data.get("k", 1)), int(data.get("hidden", 0)))


def _check(family: ModelFamily, params: np.ndarray) -> np.ndarray:
    params = np.asarray(params, dtype=float)
    if params.shape != (family.n_params,):
        raise ValueError(
            f"parameter vector has shape {params.shape}, expected ({family.n_params},)"
        )
    return params


def _unpack(family: ModelFamily, params: np.ndarray):
    d, k, H = family.d, family.k, family.hidden
    if family.kind == "linear":
        return (params.reshape(k, d),)
    if family.kind == "affine":
        return params[: k * d].reshape(k, d), params[k * d :]
    i = 0
    W1 = params[i : i + H * d].reshape(H, d)
    i += H * d
    b1 = params[i : i + H]
    i += H
    W2 = params[i : i + k * H].reshape(k, H)
    i += k * H
    return W1, b1, W2, params[i:]


def predict_batch(family: ModelFamily, params, X: np.ndarray) -> np.ndarray:
    """Outputs for a batch ``X`` of shape (N, d); returns (N, k)."""
    params = _check(family, params)
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != family.d:
        raise ValueError(f"features have shape {X.shape}, expected (N, {family.d})")
    parts = _unpack(family, params)
    if family.kind == "linear":
        return X @ parts[0].T
    if family.kind == "affine":
        return X @ parts[0].T + parts[1]
    W1, b1, W2, b2 = parts
    return np.tanh(X @ W1.T + b1) @ W2.T + b2


def predict(family: ModelFamily, params, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (family.d,):
        raise ValueError(f"feature vector has shape {x.shape}, expected ({family.d},)")
    return predict_batch(family, params, x[None, :])[0]


def per_sample_vjp(family: ModelFamily, params, X: np.ndarray, G: np.ndarray) -> np.ndarray:
    """Per-sample parameter gradients given output cotangents ``G`` (N, k)."""
    params = _check(family, params)
    parts = _unpack(family, params)
    N = X.shape[0]
    if family.kind == "linear":
        return (G[:, :, None] * X[:, None, :]).reshape(N, -1)
    if family.kind == "affine":
        return np.concatenate([(G[:, :, None] * X[:, None, :]).reshape(N, -1), G], axis=1)
    W1, b1, W2, _ = parts
    A = np.tanh(X @ W1.T + b1)
    dA = (G @ W2) * (1.0 - A * A)
    return np.concatenate(
        [
            (dA[:, :, None] * X[:, None, :]).reshape(N, -1),
            dA,
            (G[:, :, None] * A[:, None, :]).reshape(N, -1),
            G,
        ],
        axis=1,
    )


def loss_values(loss: LossKind, family: ModelFamily, params, X, y) -> np.ndarray:
    """Per-sample values of ``loss`` for the model on (X, y)."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if loss.tag == "robust-max":
        stacked = np.stack(
            [loss_values(loss.inner, family, params, t.apply(X), y) for t in loss.transforms]
        )
        return loss.scale * stacked.max(axis=0) - loss.offset
    Z = predict_batch(family, params, X)
    return loss.scale * base_values(loss.tag, Z, y) - loss.offset


def loss_param_grads(loss: LossKind, family: ModelFamily, params, X, y) -> np.ndarray:
    """Per-sample gradients (N, p) of ``loss`` with respect to the parameters.

    For robust-max the gradient is taken through the first maximizing transform.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if loss.tag == "robust-max":
        moved = [t.apply(X) for t in loss.transforms]
        stacked = np.stack([loss_values(loss.inner, family, params, Xt, y) for Xt in moved])
        pick = stacked.argmax(axis=0)
        out = np.zeros((X.shape[0], family.n_params))
        for j, Xt in enumerate(moved):
            rows = np.flatnonzero(pick == j)
            if rows.size:
                out[rows] = loss_param_grads(loss.inner, family, params, Xt[rows], y[rows])
        return loss.scale * out
    Z = predict_batch(family, params, X)
    G = base_grads(loss.tag, Z, y)
    return loss.scale * per_sample_vjp(family, params, X, G)


def loss_mean_grad(loss: LossKind, family: ModelFamily, params, X, y) -> np.ndarray:
    return loss_param_grads(loss, family, params, X, y).mean(axis=0)


def grad_weighted_loss(instance, params, lam, samples) -> np.ndarray:
    """Gradient of ``l_0(s_0) + sum_i lam_i l_i(s_i)`` at one sample per split.

    ``samples`` holds one ``(x, y)`` pair for each split 0..m.
    """
    lam = np.asarray(lam, dtype=float)
    if lam.shape != (instance.m,):
        raise ValueError(f"multiplier vector has shape {lam.shape}, expected ({instance.m},)")
    if len(samples) != instance.m + 1:
        raise ValueError("need exactly one sample per split")
    family = instance.hypothesis.family
    losses = (instance.objective, *instance.constraints)
    weights = np.concatenate([[1.0], lam])
    grad = np.zeros(family.n_params)
    for w, loss, (x, y) in zip(weights, losses, samples):
        if w == 0.0:
            continue
        X = np.asarray(x, dtype=float).reshape(1, -1)
        Y = np.asarray([y], dtype=float)
        grad += w * loss_param_grads(loss, family, params, X, Y)[0]
    return grad


def init_params(family: ModelFamily, rng: np.random.Generator, scale: float = 0.1) -> np.ndarray:
    return rng.uniform(-scale, scale, size=family.n_params)


def enumerate_finite(space) -> list[np.ndarray]:
    if space.kind != "finite":
        raise TypeError("enumerate_finite needs a finite hypothesis space")
    return [np.array(p, dtype=float) for p in space.candidates]
