"""Continual estimators for a sequence of linear regression tasks.

All updates take the previous estimate and the new task and return the
next estimate.  They accept a 2-D ``(p, k)`` previous estimate together
with ``(n, k)`` labels and then act on every column independently, which
lets the experiment harness push many noise replicates through one
factorization.

Update rules (``S = X^T X / n``):

- oracle: pooled least squares over all tasks seen so far
- gr:     ``w = prev + (S + H)^{-1} X^T (y - X prev) / n``
- crr:    gr with ``H = lam * I``
- mn:     ``w = prev + X^+ (y - X prev)``
- es:     ``m`` steps of ``w <- w - (A / n) X^T (X w - y)``
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .errors import InfeasibleError, RankDeficientError, SingularSystemError, UnstableScheduleError
from .metrics import estimation_error
from .model import TaskData, TrueModel

__all__ = [
    "RegWeights",
    "ESSchedule",
    "EstimateTrace",
    "fit_oracle",
    "gr_update",
    "crr_update",
    "mn_update",
    "es_update",
    "run_sequence",
    "ESTIMATOR_KINDS",
]

ESTIMATOR_KINDS = ("oracle", "gr", "crr", "mn", "es")

# Cholesky pivots below PIVOT_SCREEN (relative to the largest diagonal entry)
# trigger an eigenvalue test; eigenvalues below EIG_RCOND * max count as zero
PIVOT_SCREEN = 1e-8
EIG_RCOND = 1e-10
FEASIBILITY_TOL = 1e-8


@dataclass(frozen=True, eq=False)
class RegWeights:
    """Regularization matrix ``H`` for one generalized-ridge step.

    When built with :meth:`from_spectrum`, ``basis`` and ``values`` hold the
    spectral form ``H = U diag(values) U^T``.  ``pinned`` marks basis
    directions with infinite weight: the update leaves the estimate's
    component along them exactly where it was.
    """

    matrix: np.ndarray
    basis: np.ndarray | None = None
    values: np.ndarray | None = None
    pinned: np.ndarray | None = None

    def __post_init__(self):
        H = np.asarray(self.matrix, dtype=float)
        if H.ndim != 2 or H.shape[0] != H.shape[1]:
            raise ValueError(f"weight matrix must be square, got {H.shape}")
        if np.max(np.abs(H - H.T), initial=0.0) > 1e-10 * max(1.0, float(np.max(np.abs(H), initial=0.0))):
            raise ValueError("weight matrix is not symmetric")
        object.__setattr__(self, "matrix", 0.5 * (H + H.T))
        if self.values is not None and np.any(np.asarray(self.values) < -1e-12):
            raise ValueError("spectral weights must be nonnegative")
        if self.pinned is not None and self.basis is None:
            raise ValueError("pinned directions need a basis")

    @classmethod
    def from_spectrum(cls, basis, values, pinned=None) -> "RegWeights":
        basis = np.asarray(basis, dtype=float)
        values = np.asarray(values, dtype=float).copy()
        if pinned is not None:
            pinned = np.asarray(pinned, dtype=bool)
            values[pinned] = 0.0
            if not pinned.any():
                pinned = None
        free = values if pinned is None else np.where(pinned, 0.0, values)
        return cls((basis * free) @ basis.T, basis, values, pinned)

    @classmethod
    def ridge(cls, lam: float, p: int) -> "RegWeights":
        return cls(lam * np.eye(p))

    @classmethod
    def frozen(cls, p: int) -> "RegWeights":
        """Infinite weight in every direction."""
        return cls.from_spectrum(np.eye(p), np.zeros(p), np.ones(p, dtype=bool))

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def check(self) -> None:
        """Full PSD check (costs an eigendecomposition)."""
        vals = np.linalg.eigvalsh(self.matrix)
        if vals.size and vals.min() < -1e-12 * max(1.0, abs(vals.max())):
            raise ValueError(f"weight matrix is not PSD (min eigenvalue {vals.min():.3e})")
        if self.values is not None:
            recon = (self.basis * np.where(self.pinned, 0.0, self.values) if self.pinned is not None
                     else self.basis * self.values) @ self.basis.T
            scale = max(1.0, float(np.linalg.norm(self.matrix)))
            if np.linalg.norm(recon - self.matrix) > 1e-8 * scale:
                raise ValueError("spectral form does not reconstruct the matrix")


@dataclass(frozen=True, eq=False)
class ESSchedule:
    """Learning-rate matrix ``A`` and number of gradient steps for one task."""

    rate_matrix: np.ndarray
    steps: int
    basis: np.ndarray | None = None
    rates: np.ndarray | None = None
    unstable: bool = False

    def __post_init__(self):
        A = np.asarray(self.rate_matrix, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValueError(f"rate matrix must be square, got {A.shape}")
        if int(self.steps) != self.steps or self.steps < 0:
            raise ValueError(f"steps must be a nonnegative integer, got {self.steps}")
        object.__setattr__(self, "rate_matrix", 0.5 * (A + A.T))
        object.__setattr__(self, "steps", int(self.steps))

    @classmethod
    def from_spectrum(cls, basis, rates, steps: int, unstable: bool = False) -> "ESSchedule":
        basis = np.asarray(basis, dtype=float)
        rates = np.asarray(rates, dtype=float)
        return cls((basis * rates) @ basis.T, steps, basis, rates, unstable)

    def check(self, cov: np.ndarray, tol: float = 1e-10) -> None:
        """Raise if some eigenvalue of ``A S`` lies outside ``[0, 2]``."""
        mu = np.linalg.eigvals(self.rate_matrix @ cov).real
        if mu.size and (mu.min() < -tol or mu.max() > 2.0 + tol):
            raise UnstableScheduleError(
                f"contraction factors 1 - s*gamma range over [{1 - mu.max():.3g}, {1 - mu.min():.3g}]")


@dataclass
class EstimateTrace:
    estimates: list
    per_task_errors: np.ndarray | None = None
    metadata: dict = field(default_factory=dict)

    @property
    def final(self) -> np.ndarray:
        return self.estimates[-1]


def _null_directions(A: np.ndarray, rel: float = EIG_RCOND) -> np.ndarray:
    vals, vecs = np.linalg.eigh(A)
    cut = rel * max(vals[-1], 0.0) if vals.size else 0.0
    return vecs[:, vals <= cut]


def _spd_solve(A: np.ndarray, b: np.ndarray, what: str = "system") -> np.ndarray:
    """Solve ``A x = b`` for symmetric PSD ``A``; raise if ``A`` is singular."""
    A = 0.5 * (A + A.T)
    scale = float(np.max(np.abs(np.diag(A)), initial=0.0))
    factor = None
    if scale > 0.0:
        try:
            factor = cho_factor(A, lower=True, check_finite=False)
        except LinAlgError:
            factor = None
    suspicious = factor is None or np.min(np.diag(factor[0])) ** 2 <= PIVOT_SCREEN * scale
    if suspicious:
        vals = np.linalg.eigvalsh(A) if scale > 0.0 else np.zeros(1)
        if factor is None or vals[0] <= EIG_RCOND * max(vals[-1], 0.0):
            dirs = _null_directions(A) if scale > 0.0 else np.eye(A.shape[0])
            first = np.round(dirs[:, 0], 4) if dirs.size else "?"
            raise SingularSystemError(
                f"{what} is singular: {dirs.shape[1]} null direction(s), first {first}", dirs)
    return cho_solve(factor, b, check_finite=False)


def _pooled_solve(gram: np.ndarray, moment: np.ndarray) -> np.ndarray:
    try:
        return _spd_solve(gram, moment, "pooled design")
    except SingularSystemError as exc:
        raise RankDeficientError(
            f"pooled design is rank deficient ({exc.directions.shape[1]} null directions); "
            "the oracle estimator is not unique") from exc


def fit_oracle(tasks: Sequence[TaskData]) -> np.ndarray:
    """Pooled least squares over every task."""
    if not tasks:
        raise ValueError("no tasks")
    gram = sum(t.features.T @ t.features for t in tasks)
    moment = sum(t.features.T @ t.labels for t in tasks)
    return _pooled_solve(gram, moment)


def gr_update(prev, task: TaskData, weights: RegWeights) -> np.ndarray:
    """Generalized ridge step towards the new task, anchored at ``prev``."""
    prev = np.asarray(prev, dtype=float)
    X, n = task.features, task.sample_size
    if weights.dim != task.dim or prev.shape[0] != task.dim:
        raise ValueError("dimension mismatch")
    grad = X.T @ (task.labels - X @ prev) / n
    pinned = weights.pinned
    if pinned is not None and pinned.any():
        free = ~pinned
        if not free.any():
            return prev.copy()
        Uf = weights.basis[:, free]
        A = Uf.T @ task.covariance @ Uf + np.diag(weights.values[free])
        try:
            z = _spd_solve(A, Uf.T @ grad)
        except SingularSystemError as exc:
            raise SingularSystemError(str(exc), Uf @ exc.directions) from None
        return prev + Uf @ z
    return prev + _spd_solve(task.covariance + weights.matrix, grad)


def crr_update(prev, task: TaskData, lam: float) -> np.ndarray:
    """Continual ridge step: generalized ridge with ``H = lam * I``."""
    if not lam > 0:
        raise ValueError(f"ridge parameter must be positive, got {lam}")
    return gr_update(prev, task, RegWeights.ridge(lam, task.dim))


def mn_update(prev, task: TaskData) -> np.ndarray:
    """Closest interpolant of the new task to ``prev``."""
    prev = np.asarray(prev, dtype=float)
    X, y = task.features, task.labels
    resid = y - X @ prev
    step = np.linalg.lstsq(X, resid, rcond=None)[0]
    miss = np.linalg.norm(X @ step - resid, axis=0)
    if np.any(miss > FEASIBILITY_TOL * (1.0 + np.linalg.norm(y, axis=0))):
        raise InfeasibleError(f"X w = y has no solution (residual {np.max(miss):.3e})")
    return prev + step


def es_update(prev, task: TaskData, schedule: ESSchedule) -> np.ndarray:
    """``schedule.steps`` full-batch gradient steps starting from ``prev``."""
    prev = np.asarray(prev, dtype=float)
    X, y, n = task.features, task.labels, task.sample_size
    if schedule.rate_matrix.shape[0] != task.dim or prev.shape[0] != task.dim:
        raise ValueError("dimension mismatch")
    if not schedule.unstable:
        schedule.check(task.covariance)
    G = schedule.rate_matrix @ X.T / n
    w = prev.copy()
    for _ in range(schedule.steps):
        w = w - G @ (X @ w - y)
    return w


Policy = Callable[[int, Sequence[TaskData]], object]


def run_sequence(tasks: Sequence[TaskData], kind: str, policy: Policy | None = None,
                 model: TrueModel | None = None, name: str | None = None) -> EstimateTrace:
    """Run one estimator over ``tasks`` starting from the zero vector.

    ``policy(t, tasks)`` supplies the hyperparameter for task ``t``
    (1-based): a :class:`RegWeights` for ``"gr"``, a ridge value for
    ``"crr"`` and an :class:`ESSchedule` for ``"es"``.  For ``"oracle"``
    the t-th estimate pools tasks 1..t and is NaN while that pool is rank
    deficient.
    """
    if not tasks:
        raise ValueError("no tasks")
    if kind not in ESTIMATOR_KINDS:
        raise ValueError(f"unknown estimator kind {kind!r}")
    if kind in ("gr", "crr", "es") and policy is None:
        raise ValueError(f"estimator {kind!r} needs a hyperparameter policy")
    p = tasks[0].dim
    if any(t.dim != p for t in tasks):
        raise ValueError("tasks do not share a dimension")
    extra = tasks[0].labels.shape[1:]
    prev = np.zeros((p,) + extra)
    estimates = [prev]
    undefined = []
    gram = np.zeros((p, p))
    moment = np.zeros((p,) + extra)
    for t, task in enumerate(tasks, start=1):
        if kind == "oracle":
            gram = gram + task.features.T @ task.features
            moment = moment + task.features.T @ task.labels
            try:
                w = _pooled_solve(gram, moment)
            except RankDeficientError:
                w = np.full((p,) + extra, np.nan)
                undefined.append(t)
        elif kind == "gr":
            w = gr_update(prev, task, policy(t, tasks))
        elif kind == "crr":
            w = crr_update(prev, task, policy(t, tasks))
        elif kind == "mn":
            w = mn_update(prev, task)
        else:
            w = es_update(prev, task, policy(t, tasks))
        estimates.append(w)
        prev = w
    errors = None
    if model is not None:
        errors = np.array([estimation_error(w, model) for w in estimates])
    meta = {"estimator": name or kind, "kind": kind}
    if undefined:
        meta["undefined_steps"] = undefined
    return EstimateTrace(estimates, errors, meta)
