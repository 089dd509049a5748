"""Closed-form error theory for continual linear regression.

Most functions here work on a :class:`SpectralSequence`: every task
covariance is diagonal in one shared orthogonal basis ``U``, so a task is
described by its eigenvalue vector ``gamma^(t)`` and sample size ``n_t``.
With ``info_j^(t) = gamma_j^(t) * n_t`` and ``e0_j = (u_j^T w_*)^2``:

- oracle after t tasks:      ``sum_j sigma^2 / sum_{tau<=t} info_j``
- optimal weights for task t: ``lam_j = (sigma^2/e0_j + sum_{tau<t} info_j) / n_t``
- optimal GR error:          ``sum_j sigma^2 / (sigma^2/e0_j + sum_{tau<=t} info_j)``

Infinite weights (``e0_j = 0``) are returned as pin flags next to a value
of 0, never as large floats.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .estimators import ESSchedule, RegWeights
from .model import TaskSpectrum, TrueModel

__all__ = [
    "SpectralSequence",
    "PinnedVector",
    "SensitivityReport",
    "TwoTaskErrors",
    "RatioPoint",
    "oracle_error",
    "gr_error_recursion",
    "gr_error_curve",
    "optimal_lambda",
    "optimal_weights",
    "gr_error_closed_form",
    "practical_weights",
    "sensitivity_check",
    "sensitivity_rhs",
    "mn_lower_bound",
    "crr_two_task_error",
    "crr_gr_ratio_curve",
    "lambda_from_es",
    "es_from_lambda",
    "es_optimal_schedule",
    "nonshared_basis_monotone_policy",
    "nonshared_basis_expected_errors",
    "pooled_oracle_error",
    "practical_lambda",
    "two_task_sequence",
    "DEFAULT_LAMBDA_GRID",
]

DEFAULT_LAMBDA_GRID = np.logspace(-8, 4, 400)


class PinnedVector(NamedTuple):
    """Per-coordinate values; ``pinned`` marks coordinates that must not move."""

    values: np.ndarray
    pinned: np.ndarray


@dataclass(frozen=True, eq=False)
class SpectralSequence:
    """Commuting task sequence: shared basis, per-task eigenvalues and sizes.

    ``eigenvalues`` has shape ``(T, p)``; row ``t-1`` belongs to task ``t``.
    """

    basis: np.ndarray
    eigenvalues: np.ndarray
    sample_sizes: np.ndarray
    e0: np.ndarray
    sigma2: float

    def __post_init__(self):
        g = np.atleast_2d(np.asarray(self.eigenvalues, dtype=float))
        n = np.asarray(self.sample_sizes, dtype=float).reshape(-1)
        e0 = np.asarray(self.e0, dtype=float).reshape(-1)
        U = np.asarray(self.basis, dtype=float)
        if g.shape[0] != n.shape[0] or g.shape[1] != e0.shape[0] or U.shape != (e0.shape[0],) * 2:
            raise ValueError("inconsistent spectral sequence shapes")
        if np.any(g < 0) or np.any(n <= 0) or np.any(e0 < 0) or not self.sigma2 >= 0:
            raise ValueError("eigenvalues, e0 and sigma2 must be nonnegative and sample sizes positive")
        for name, val in (("eigenvalues", g), ("sample_sizes", n), ("e0", e0), ("basis", U)):
            object.__setattr__(self, name, val)
        object.__setattr__(self, "sigma2", float(self.sigma2))

    @classmethod
    def from_model(cls, basis, eigenvalues, sample_sizes, model: TrueModel) -> "SpectralSequence":
        basis = np.asarray(basis, dtype=float)
        e0 = (basis.T @ model.w_star) ** 2
        return cls(basis, eigenvalues, sample_sizes, e0, model.noise_variance)

    @property
    def tasks(self) -> int:
        return self.eigenvalues.shape[0]

    @property
    def dim(self) -> int:
        return self.eigenvalues.shape[1]

    @property
    def info(self) -> np.ndarray:
        """``gamma_j^(t) * n_t`` with shape ``(T, p)``."""
        return self.eigenvalues * self.sample_sizes[:, None]

    def cumulative_info(self, t: int) -> np.ndarray:
        """``sum_{tau <= t} gamma_j^(tau) n_tau`` (zeros for ``t = 0``)."""
        self._check_t(t, allow_zero=True)
        return self.info[:t].sum(axis=0)

    def uninformed(self) -> np.ndarray:
        """Coordinates that no task carries information about."""
        return self.cumulative_info(self.tasks) == 0

    def permuted(self, order: Sequence[int]) -> "SpectralSequence":
        order = list(order)
        return SpectralSequence(self.basis, self.eigenvalues[order], self.sample_sizes[order], self.e0, self.sigma2)

    def _check_t(self, t: int, allow_zero: bool = False) -> None:
        lo = 0 if allow_zero else 1
        if not lo <= t <= self.tasks:
            raise ValueError(f"task index {t} outside {lo}..{self.tasks}")


def _posterior_error(e0: np.ndarray, info: np.ndarray, sigma2: float) -> np.ndarray:
    """``sigma^2 / (sigma^2/e0 + info)`` written to survive e0 = 0 and sigma^2 = 0."""
    with np.errstate(divide="ignore", invalid="ignore"):
        out = e0 * sigma2 / (sigma2 + e0 * info)
    return np.where(info == 0, e0, np.where(e0 == 0, 0.0, out))


def oracle_error(seq: SpectralSequence, t: int | None = None) -> float:
    """Expected error of pooled least squares after ``t`` tasks (default all)."""
    t = seq.tasks if t is None else t
    total = seq.cumulative_info(t)
    if np.any(total <= 0):
        raise ValueError(f"coordinates {np.flatnonzero(total <= 0).tolist()} carry no information in tasks 1..{t}")
    return math.fsum(seq.sigma2 / total)


def gr_error_recursion(prev_errors, gamma, lam, n: float, sigma2: float, pinned=None) -> np.ndarray:
    """One step of the expected projected-error recursion for generalized ridge.

    ``E e_j <- E e_j - 2 g E e_j / (lam + g) + (g^2 E e_j + g sigma^2 / n) / (lam + g)^2``

    evaluated in the equivalent factored form
    ``(lam^2 E e_j + g sigma^2 / n) / (lam + g)^2``, which avoids the
    cancellation of the expanded expression.  Coordinates with ``g = 0`` or
    pinned weight are returned unchanged.
    """
    prev = np.asarray(prev_errors, dtype=float)
    gamma = np.broadcast_to(np.asarray(gamma, dtype=float), prev.shape)
    lam = np.broadcast_to(np.asarray(lam, dtype=float), prev.shape)
    pinned = np.zeros(prev.shape, bool) if pinned is None else np.broadcast_to(np.asarray(pinned, bool), prev.shape)
    denom = lam + gamma
    if np.any((denom == 0) & ~pinned):
        raise ValueError(f"lam + gamma = 0 at coordinates {np.flatnonzero((denom == 0) & ~pinned).tolist()}")
    with np.errstate(divide="ignore", invalid="ignore"):
        new = (lam**2 * prev + gamma * sigma2 / n) / denom**2
    return np.where(pinned | (gamma == 0), prev, new)


def gr_error_curve(seq: SpectralSequence, lambdas: Sequence[PinnedVector]) -> np.ndarray:
    """Expected projected errors ``(T + 1, p)`` for given per-task weights."""
    rows = [seq.e0.copy()]
    for t, lam in enumerate(lambdas, start=1):
        values, pinned = lam if isinstance(lam, PinnedVector) else (lam, None)
        rows.append(gr_error_recursion(rows[-1], seq.eigenvalues[t - 1], values,
                                       seq.sample_sizes[t - 1], seq.sigma2, pinned))
    return np.array(rows)


def optimal_lambda(seq: SpectralSequence, t: int) -> PinnedVector:
    """Error-minimizing spectral weights for task ``t``.

    ``e0_j = 0`` pins coordinate j.  So does a zero weight on a coordinate
    the task carries no information about (only possible when
    ``sigma^2 = 0``), where any positive weight would do the same.
    """
    seq._check_t(t)
    prior = seq.cumulative_info(t - 1)
    n_t = seq.sample_sizes[t - 1]
    pinned = seq.e0 == 0
    with np.errstate(divide="ignore"):
        values = np.where(pinned, 0.0, (seq.sigma2 / np.where(pinned, 1.0, seq.e0) + prior) / n_t)
    pinned = pinned | ((values == 0) & (seq.eigenvalues[t - 1] == 0))
    return PinnedVector(values, pinned)


def optimal_weights(seq: SpectralSequence, t: int, scale: float = 1.0) -> RegWeights:
    lam = optimal_lambda(seq, t)
    return RegWeights.from_spectrum(seq.basis, scale * lam.values, lam.pinned)


def gr_error_closed_form(seq: SpectralSequence, t: int) -> tuple[float, np.ndarray]:
    """Expected error of optimally weighted GR after task ``t``.

    Returns the total and the per-coordinate errors.
    """
    per = _posterior_error(seq.e0, seq.cumulative_info(t), seq.sigma2)
    return math.fsum(per), per


def practical_weights(prior_tasks: Sequence[tuple[np.ndarray, int]], n_t: int, ridge: float = 1e-3) -> RegWeights:
    """Sample-size weighted sum of earlier covariances, plus ``ridge * I``.

    ``prior_tasks`` holds ``(covariance, n)`` for every task before t.  The
    ridge keeps the first task well posed when it is overparameterized;
    pass ``ridge=0`` for the bare weighted sum.
    """
    if n_t <= 0 or ridge < 0:
        raise ValueError("n_t must be positive and ridge nonnegative")
    if not prior_tasks:
        raise ValueError("dimension unknown without prior tasks; use RegWeights.ridge for the first task")
    p = prior_tasks[0][0].shape[0]
    H = np.zeros((p, p))
    for cov, n in prior_tasks:
        H = H + n * np.asarray(cov, dtype=float)
    return RegWeights(H / n_t + ridge * np.eye(p))


def practical_lambda(seq: SpectralSequence, t: int, ridge: float = 1e-3) -> PinnedVector:
    """Spectral form of :func:`practical_weights` for a commuting sequence."""
    seq._check_t(t)
    values = seq.cumulative_info(t - 1) / seq.sample_sizes[t - 1] + ridge
    return PinnedVector(values, (values == 0) & (seq.eigenvalues[t - 1] == 0))


@dataclass(frozen=True, eq=False)
class SensitivityReport:
    """Per-(task, coordinate) check of the weight-perturbation condition.

    All arrays have shape ``(T, p)``; ``bound`` is ``C sigma^2 / (e0_j +
    sum_{tau<=t} info_j)``.
    """

    rho: np.ndarray
    delta: np.ndarray
    lhs: np.ndarray
    rhs: np.ndarray
    holds: np.ndarray
    bound: np.ndarray
    C: float

    @property
    def all_hold(self) -> bool:
        return bool(np.all(self.holds))

    def total_bound(self, t: int) -> float:
        return math.fsum(self.bound[t - 1])


def sensitivity_rhs(rho, C: float):
    rho = np.asarray(rho, dtype=float)
    return C * (C - 1) * rho**2 / ((1 + rho) * (1 + C * rho) ** 2)


def sensitivity_check(seq: SpectralSequence, lam_tilde, C: float) -> SensitivityReport:
    """Check whether approximate weights ``lam_tilde`` (shape ``(T, p)``) are close enough.

    The information ratio is ``rho = info^(t) / (e0 + sum_{tau<=t} info)``.
    """
    if not C > 1:
        raise ValueError(f"C must exceed 1, got {C}")
    lam_tilde = np.asarray(lam_tilde, dtype=float)
    if lam_tilde.shape != seq.eigenvalues.shape:
        raise ValueError(f"lam_tilde must have shape {seq.eigenvalues.shape}")
    T = seq.tasks
    rho, delta, bound = (np.zeros_like(lam_tilde) for _ in range(3))
    for t in range(1, T + 1):
        g = seq.eigenvalues[t - 1]
        cum = seq.cumulative_info(t)
        denom = seq.e0 + cum
        with np.errstate(divide="ignore", invalid="ignore"):
            rho[t - 1] = np.where(denom > 0, seq.info[t - 1] / denom, 0.0)
            bound[t - 1] = np.where(denom > 0, C * seq.sigma2 / denom, np.inf)
        opt = optimal_lambda(seq, t)
        with np.errstate(divide="ignore"):
            inv_opt = np.where(opt.pinned, 0.0, 1.0 / (opt.values + g))
            inv_tilde = 1.0 / (lam_tilde[t - 1] + g)
        delta[t - 1] = np.where(g == 0, 0.0, inv_tilde - inv_opt)
    lhs = (seq.eigenvalues * delta) ** 2
    rhs = sensitivity_rhs(rho, C)
    return SensitivityReport(rho, delta, lhs, rhs, lhs <= rhs, bound, float(C))


def mn_lower_bound(gamma_max: float, sigma2: float) -> float:
    """Floor on the minimum-norm estimator's error: ``sigma^2 / gamma_max``."""
    if not gamma_max > 0:
        raise ValueError(f"gamma_max must be positive, got {gamma_max}")
    return sigma2 / gamma_max


class TwoTaskErrors(NamedTuple):
    task1: np.ndarray  # (coordinate 1, coordinate 2)
    task2: np.ndarray


def crr_two_task_error(n1, n2, eps, lam1, lam2, sigma2) -> TwoTaskErrors:
    """Expected per-coordinate CRR errors on the two-task problem
    ``Sigma_1 = diag(1, eps)``, ``Sigma_2 = diag(eps, 1)`` with ``w_*^2 = (1, 1)``.

    Broadcasts over array-valued ``lam1`` / ``lam2``; each returned field
    stacks the two coordinates along the first axis.
    """
    lam1 = np.asarray(lam1, dtype=float)
    lam2 = np.asarray(lam2, dtype=float)
    if not eps > 0 or np.any(lam1 < 0) or np.any(lam2 < 0):
        raise ValueError("eps must be positive and ridge parameters nonnegative")
    if not (n1 > 0 and n2 > 0):
        raise ValueError("sample sizes must be positive")
    c11 = (lam1 / (1 + lam1)) ** 2 + sigma2 / (n1 * (1 + lam1) ** 2)
    c12 = (lam1 / (eps + lam1)) ** 2 + eps * sigma2 / (n1 * (eps + lam1) ** 2)
    c21 = (lam2 / (eps + lam2)) ** 2 * c11 + eps * sigma2 / (n2 * (eps + lam2) ** 2)
    c22 = (lam2 / (1 + lam2)) ** 2 * c12 + sigma2 / (n2 * (1 + lam2) ** 2)
    return TwoTaskErrors(np.stack(np.broadcast_arrays(c11, c12)), np.stack(np.broadcast_arrays(c21, c22)))


class RatioPoint(NamedTuple):
    n: int
    eps: float
    ratio: float
    lam1: float
    lam2: float
    crr_error: float
    gr_error: float


def two_task_sequence(n1, n2, eps, sigma2) -> SpectralSequence:
    return SpectralSequence(np.eye(2), [[1.0, eps], [eps, 1.0]], [n1, n2], np.ones(2), sigma2)


def crr_gr_ratio_curve(n_grid: Sequence[int], lambda_grid=None, sigma2: float = 1.0,
                       eps: float | None = None, shared: bool = False) -> list[RatioPoint]:
    """Best-case CRR over optimal GR after two tasks, along ``n1 = n^2``, ``n2 = n^3``.

    ``eps`` defaults to ``n^{-1/2}``; pass a constant (e.g. 1) for a control
    curve.  The infimum runs jointly over ``(lam1, lam2)`` on the grid, or
    over one common value when ``shared`` is set.
    """
    grid = DEFAULT_LAMBDA_GRID if lambda_grid is None else np.asarray(lambda_grid, dtype=float)
    if len(n_grid) == 0 or grid.size == 0:
        raise ValueError("empty grid")
    out = []
    for n in n_grid:
        n1, n2 = float(n) ** 2, float(n) ** 3
        e = float(n) ** -0.5 if eps is None else float(eps)
        if shared:
            l1, l2 = grid, grid
        else:
            l1, l2 = grid[:, None], grid[None, :]
        crr = crr_two_task_error(n1, n2, e, l1, l2, sigma2).task2.sum(axis=0)
        gr = gr_error_closed_form(two_task_sequence(n1, n2, e, sigma2), 2)[0]
        idx = np.unravel_index(np.argmin(crr), crr.shape)
        best = float(crr[idx])
        lam1 = float(grid[idx[0]])
        lam2 = float(grid[idx[-1]])
        out.append(RatioPoint(int(n), e, best / gr, lam1, lam2, best, gr))
    return out


def lambda_from_es(gamma, s, m: int) -> PinnedVector:
    """Ridge weights that reproduce ``m`` gradient steps with rates ``s``.

    ``lam = g q / (1 - q)`` with ``q = (1 - s g)^m``.  Coordinates with
    ``g = 0`` are unconstrained and come back pinned.
    """
    gamma = np.asarray(gamma, dtype=float)
    s = np.broadcast_to(np.asarray(s, dtype=float), gamma.shape)
    if m < 1:
        raise ValueError("m must be at least 1")
    q = (1.0 - s * gamma) ** m
    free = gamma > 0
    stuck = free & (q == 1.0)
    if np.any(stuck):
        raise ValueError(f"no progress (s * gamma = 0) at coordinates {np.flatnonzero(stuck).tolist()}")
    with np.errstate(divide="ignore", invalid="ignore"):
        lam = np.where(free, gamma * q / (1.0 - q), 0.0)
    return PinnedVector(lam, ~free)


def es_from_lambda(gamma, lam, m: int, pinned=None) -> PinnedVector:
    """Learning rates that reproduce ridge weights ``lam`` in ``m`` steps.

    ``s = (1 - (lam / (g + lam))^{1/m}) / g``.  Coordinates with ``g = 0``
    and pinned coordinates get rate 0 and are flagged.
    """
    gamma = np.asarray(gamma, dtype=float)
    lam = np.broadcast_to(np.asarray(lam, dtype=float), gamma.shape)
    if m < 1:
        raise ValueError("m must be at least 1")
    if np.any(lam < 0):
        raise ValueError("ridge weights must be nonnegative")
    flag = gamma <= 0
    if pinned is not None:
        flag = flag | np.asarray(pinned, bool)
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(flag, 0.0, (1.0 - (lam / (gamma + lam)) ** (1.0 / m)) / gamma)
    return PinnedVector(s, flag)


def es_optimal_schedule(seq: SpectralSequence, t: int, m: int) -> ESSchedule:
    """Gradient-descent schedule whose output equals optimally weighted GR.

    Chooses ``(1 - s_j g_j)^m = 1 - g_j n_t / (sigma^2/e0_j + sum_{tau<=t} info_j)``.
    """
    seq._check_t(t)
    if m < 1:
        raise ValueError("m must be at least 1")
    g = seq.eigenvalues[t - 1]
    informative = (g > 0) & (seq.e0 > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        denom = seq.sigma2 / np.where(seq.e0 > 0, seq.e0, 1.0) + seq.cumulative_info(t)
        q = np.where(informative, 1.0 - seq.info[t - 1] / denom, 1.0)
    if np.any(q[informative] < 0) or np.any(q[informative] >= 1):
        raise AssertionError(f"contraction target outside [0, 1): {q[informative]}")
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(informative, (1.0 - q ** (1.0 / m)) / g, 0.0)
    return ESSchedule.from_spectrum(seq.basis, s, m)


def _nonshared_moments(task_spectra: Sequence[TaskSpectrum], model: TrueModel, sigma2: float):
    p = model.dim
    mean = -model.w_star.copy()
    cov = np.zeros((p, p))
    for spec in task_spectra:
        if spec.sample_size is None:
            raise ValueError("task spectra need sample sizes")
        U, g, n = spec.basis, spec.eigenvalues, spec.sample_size
        expected = (U.T @ mean) ** 2 + np.einsum("ij,ij->j", U, cov @ U)
        expected = np.maximum(expected, 0.0)
        pinned = (g == 0) | (expected <= 1e-300)
        with np.errstate(divide="ignore", invalid="ignore"):
            lam = np.where(pinned, 0.0, (sigma2 / n) / np.where(pinned, 1.0, expected))
            keep = np.where(pinned, 1.0, lam / (lam + g))
            inject = np.where(pinned, 0.0, sigma2 * g / (n * (lam + g) ** 2))
        M = (U * keep) @ U.T
        mean = M @ mean
        cov = M @ cov @ M.T + (U * inject) @ U.T
        cov = 0.5 * (cov + cov.T)
        yield RegWeights.from_spectrum(U, lam, pinned), math.fsum(mean**2) + float(np.trace(cov))


def nonshared_basis_monotone_policy(task_spectra: Sequence[TaskSpectrum], model: TrueModel,
                                    sigma2: float | None = None) -> list[RegWeights]:
    """Per-task weights in each task's own eigenbasis that never increase the error.

    For task t, ``lam_j = (sigma^2 / n_t) / E[(u_j^(t)T (w_{t-1} - w_*))^2]``.
    The expectation is exact: under a fixed design the GR error is a linear
    Gaussian recursion, so its mean and covariance are propagated in closed
    form instead of being estimated by simulation.  Directions with no
    information in task t, or with zero expected error, are pinned.
    """
    sigma2 = model.noise_variance if sigma2 is None else float(sigma2)
    return [w for w, _ in _nonshared_moments(task_spectra, model, sigma2)]


def nonshared_basis_expected_errors(task_spectra: Sequence[TaskSpectrum], model: TrueModel,
                                    sigma2: float | None = None) -> np.ndarray:
    """Exact fixed-design ``E L(w_t)`` for ``t = 0..T`` under the policy above."""
    sigma2 = model.noise_variance if sigma2 is None else float(sigma2)
    out = [math.fsum(model.w_star**2)]
    out.extend(e for _, e in _nonshared_moments(task_spectra, model, sigma2))
    return np.array(out)


def pooled_oracle_error(grams: Sequence[np.ndarray], sigma2: float) -> np.ndarray:
    """Fixed-design oracle error ``sigma^2 tr((sum_{tau<=t} X^T X)^{-1})`` for each t.

    Entries are NaN while the pooled Gram matrix is singular.  For commuting
    covariances this equals :func:`oracle_error`.
    """
    out = []
    total = np.zeros_like(np.asarray(grams[0], dtype=float))
    for G in grams:
        total = total + G
        vals = np.linalg.eigvalsh(total)
        if vals[0] <= 1e-10 * max(vals[-1], 0.0):
            out.append(np.nan)
        else:
            out.append(sigma2 * math.fsum(1.0 / vals))
    return np.array(out)
