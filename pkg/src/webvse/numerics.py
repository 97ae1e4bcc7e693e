"""Dense vector helpers, the parameter container and a finite-difference gradient checker.

Everything runs in float64. Vectors and matrices are plain numpy arrays; the
helpers here only add shape/finiteness validation on top of numpy.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .errors import DegenerateInputError, NumericInstabilityError, ShapeError


def as_vector(v) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ShapeError(f"expected a non-empty 1-d vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ShapeError("vector contains non-finite entries")
    return arr


def as_matrix(m) -> np.ndarray:
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2 or arr.size == 0:
        raise ShapeError(f"expected a non-empty 2-d matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ShapeError("matrix contains non-finite entries")
    return arr


def matvec(m, v) -> np.ndarray:
    m = as_matrix(m)
    v = as_vector(v)
    if m.shape[1] != v.shape[0]:
        raise ShapeError(f"cannot multiply {m.shape[0]}x{m.shape[1]} matrix by {v.shape[0]}-vector")
    return m @ v


def l2_norm(v) -> float:
    return float(np.sqrt(np.sum(np.square(np.asarray(v, dtype=np.float64)))))


def cosine_similarity(a, b) -> float:
    a = as_vector(a)
    b = as_vector(b)
    if a.shape != b.shape:
        raise ShapeError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    na, nb = l2_norm(a), l2_norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine similarity of a zero-norm vector is undefined")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def row_norms(x: np.ndarray) -> np.ndarray:
    """Row-wise L2 norms; raises on any zero row."""
    n = np.sqrt(np.sum(x * x, axis=1))
    if np.any(n == 0.0):
        bad = np.flatnonzero(n == 0.0).tolist()
        raise DegenerateInputError(f"zero-norm embedding at rows {bad}")
    return n


def normalize_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x / row_norms(x)[:, None]


class ParameterSet:
    """Named float64 arrays with a gradient buffer of identical shapes."""

    def __init__(self, values: dict[str, np.ndarray] | None = None):
        self.values: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        for name, value in (values or {}).items():
            self.add(name, value)

    def add(self, name: str, value) -> None:
        if name in self.values:
            raise KeyError(f"duplicate parameter name {name!r}")
        arr = np.array(value, dtype=np.float64)
        self.values[name] = arr
        self.grads[name] = np.zeros_like(arr)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def __contains__(self, name: str) -> bool:
        return name in self.values

    def __iter__(self):
        return iter(self.values)

    def names(self) -> list[str]:
        return list(self.values)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def copy(self) -> "ParameterSet":
        out = ParameterSet()
        for name, value in self.values.items():
            out.values[name] = value.copy()
            out.grads[name] = self.grads[name].copy()
        return out

    def num_entries(self) -> int:
        return sum(v.size for v in self.values.values())

    def equal(self, other: "ParameterSet", names: Iterable[str] | None = None) -> bool:
        """Bitwise equality of values over ``names`` (all by default)."""
        names = list(names) if names is not None else self.names()
        return all(
            name in other
            and self.values[name].shape == other.values[name].shape
            and self.values[name].tobytes() == other.values[name].tobytes()
            for name in names
        )


@dataclass
class GradCheckResult:
    max_rel_error: dict[str, float] = field(default_factory=dict)
    worst_entry: dict[str, tuple] = field(default_factory=dict)
    checked: dict[str, int] = field(default_factory=dict)
    skipped: dict[str, int] = field(default_factory=dict)
    tolerance: float = 1e-4

    @property
    def overall(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.overall < self.tolerance

    def failures(self) -> list[str]:
        return [n for n, e in self.max_rel_error.items() if e >= self.tolerance]


def check_gradient(
    loss_fn: Callable[[ParameterSet], float],
    params: ParameterSet,
    epsilon: float = 1e-5,
    tolerance: float = 1e-4,
    kink_fn: Callable[[ParameterSet], np.ndarray] | None = None,
    kink_tol: float = 1e-3,
    names: Iterable[str] | None = None,
) -> GradCheckResult:
    """Compare analytic gradients against central differences.

    ``loss_fn(p)`` must return the scalar loss and write its analytic gradient
    into ``p.grads``. The error per entry is ``|analytic - numeric| / max(1, |numeric|)``.

    ``kink_fn(p)`` optionally returns the switching quantities of the loss
    (hinge arguments, argmax gaps). An entry is skipped, and counted in
    ``skipped``, when perturbing it moves any switching quantity that lies
    within ``kink_tol`` of zero at the base point; central differences are
    meaningless across a hinge kink or an argmax swap.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    params.zero_grad()
    base = loss_fn(params)
    if not np.isfinite(base):
        raise NumericInstabilityError("loss is not finite at the base point")
    analytic = {k: g.copy() for k, g in params.grads.items()}
    s0 = np.asarray(kink_fn(params), dtype=np.float64) if kink_fn is not None else None
    near = np.abs(s0) < kink_tol if s0 is not None else None

    probe = params.copy()
    result = GradCheckResult(tolerance=tolerance)
    for name in names if names is not None else params.names():
        values = probe.values[name]
        worst, worst_idx, checked, skipped = 0.0, None, 0, 0
        for idx in np.ndindex(values.shape):
            orig = values[idx]
            values[idx] = orig + epsilon
            lp = loss_fn(probe)
            sp = kink_fn(probe) if near is not None and near.any() else None
            values[idx] = orig - epsilon
            lm = loss_fn(probe)
            sm = kink_fn(probe) if sp is not None else None
            values[idx] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise NumericInstabilityError(f"non-finite loss when perturbing {name}{list(idx)}")
            if sp is not None:
                moved = (np.asarray(sp) != s0) | (np.asarray(sm) != s0)
                if np.any(moved & near):
                    skipped += 1
                    continue
            numeric = (lp - lm) / (2.0 * epsilon)
            err = abs(analytic[name][idx] - numeric) / max(1.0, abs(numeric))
            checked += 1
            if err > worst or worst_idx is None:
                worst, worst_idx = err, idx
        result.max_rel_error[name] = worst
        result.worst_entry[name] = worst_idx
        result.checked[name] = checked
        result.skipped[name] = skipped
    return result
