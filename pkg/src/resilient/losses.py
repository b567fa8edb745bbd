"""Pointwise losses on model outputs.

Every loss is stored as a :class:`LossKind` and evaluated as
``scale * base(z, y) - offset``. The offset carries the nominal constraint
level (a requirement ``E[base] <= c`` becomes ``E[base - c] <= 0``).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

TAGS = ("squared", "hinge", "logistic", "linear-form", "absolute-linear", "robust-max")


@dataclass(frozen=True)
class InputMap:
    """Affine input transform ``x -> matrix @ x + shift``."""

    matrix: np.ndarray
    shift: np.ndarray

    def __post_init__(self):
        matrix = np.asarray(self.matrix, dtype=float)
        shift = np.asarray(self.shift, dtype=float)
        if matrix.ndim != 2 or matrix.shape[0] != shift.shape[0]:
            raise ValueError("input map matrix/shift shapes disagree")
        matrix.setflags(write=False)
        shift.setflags(write=False)
        object.__setattr__(self, "matrix", matrix)
        object.__setattr__(self, "shift", shift)

    @classmethod
    def identity(cls, d: int) -> "InputMap":
        return cls(np.eye(d), np.zeros(d))

    @classmethod
    def rotation(cls, angle: float) -> "InputMap":
        c, s = np.cos(angle), np.sin(angle)
        return cls(np.array([[c, -s], [s, c]]), np.zeros(2))

    @classmethod
    def translation(cls, shift) -> "InputMap":
        shift = np.asarray(shift, dtype=float)
        return cls(np.eye(shift.shape[0]), shift)

    def apply(self, X: np.ndarray) -> np.ndarray:
        return X @ self.matrix.T + self.shift

    def to_dict(self) -> dict:
        return {"matrix": self.matrix.tolist(), "shift": self.shift.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "InputMap":
        return cls(np.asarray(data["matrix"], float), np.asarray(data["shift"], float))


@dataclass(frozen=True)
class LossKind:
    tag: str
    offset: float = 0.0
    scale: float = 1.0
    inner: "LossKind | None" = None
    transforms: tuple[InputMap, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.tag not in TAGS:
            raise ValueError(f"unknown loss tag {self.tag!r}")
        if self.tag == "robust-max":
            if self.inner is None or not self.transforms:
                raise ValueError("robust-max needs an inner loss and at least one transform")
            if self.inner.tag == "robust-max":
                raise ValueError("nested robust-max is not supported")
        object.__setattr__(self, "transforms", tuple(self.transforms))

    def to_dict(self) -> dict:
        out = {"tag": self.tag, "offset": self.offset, "scale": self.scale}
        if self.tag == "robust-max":
            out["inner"] = self.inner.to_dict()
            out["transforms"] = [t.to_dict() for t in self.transforms]
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "LossKind":
        inner = data.get("inner")
        return cls(
            tag=data["tag"],
            offset=float(data.get("offset", 0.0)),
            scale=float(data.get("scale", 1.0)),
            inner=cls.from_dict(inner) if inner is not None else None,
            transforms=tuple(InputMap.from_dict(t) for t in data.get("transforms", ())),
        )


def _log1pexp(t):
    return np.logaddexp(0.0, t)


def _sigmoid(t):
    return np.exp(-np.logaddexp(0.0, -t))


def base_values(tag: str, Z: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Unscaled, unshifted per-sample loss values; ``Z`` has shape (N, k)."""
    if tag == "squared":
        return np.sum((Z - y[:, None]) ** 2, axis=1)
    if tag == "hinge":
        return np.maximum(0.0, 1.0 - y * Z[:, 0])
    if tag == "logistic":
        if Z.shape[1] == 1:
            return _log1pexp(-y * Z[:, 0])
        labels = y.astype(int)
        lse = np.logaddexp.reduce(Z, axis=1)
        return lse - Z[np.arange(Z.shape[0]), labels]
    if tag == "linear-form":
        return y * Z[:, 0]
    if tag == "absolute-linear":
        return np.abs(Z[:, 0])
    raise ValueError(f"{tag!r} is not a pointwise base loss")


def base_grads(tag: str, Z: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Derivative of :func:`base_values` with respect to ``Z`` (shape (N, k)).

    Hinge at margin exactly one and |z| at zero take the zero branch.
    """
    G = np.zeros_like(Z)
    if tag == "squared":
        return 2.0 * (Z - y[:, None])
    if tag == "hinge":
        active = 1.0 - y * Z[:, 0] > 0.0
        G[:, 0] = np.where(active, -y, 0.0)
        return G
    if tag == "logistic":
        if Z.shape[1] == 1:
            G[:, 0] = -y * _sigmoid(-y * Z[:, 0])
            return G
        labels = y.astype(int)
        P = np.exp(Z - np.logaddexp.reduce(Z, axis=1, keepdims=True))
        P[np.arange(Z.shape[0]), labels] -= 1.0
        return P
    if tag == "linear-form":
        G[:, 0] = y
        return G
    if tag == "absolute-linear":
        G[:, 0] = np.sign(Z[:, 0])
        return G
    raise ValueError(f"{tag!r} is not a pointwise base loss")
