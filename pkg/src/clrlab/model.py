"""Task data, synthetic generators and spectral helpers.

Every random draw goes through :func:`stream`, which keys a numpy
``SeedSequence`` by ``(master seed, *key)``.  Streams for different
replicates or tasks are therefore independent of the order in which they
are consumed, which is what makes threaded experiment runs reproducible.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

__all__ = [
    "TaskData",
    "TrueModel",
    "TaskSpectrum",
    "ProjectedErrorVector",
    "stream",
    "empirical_covariance",
    "spectral_decompose",
    "commutability_defect",
    "generate_iid_task",
    "generate_shift_task",
    "draw_shift_eigenvalues",
    "design_from_spectrum",
    "label_features",
    "project_error",
]

# stream kinds
W_STAR = 0
DESIGN = 1
NOISE = 2
SPECTRA = 3

# eigenvalues below this (relative to the largest magnitude) are exact zeros
ZERO_EIG = 1e-12


def stream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator keyed by ``(seed, *key)``."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key)))


@dataclass(frozen=True, eq=False)
class TaskData:
    """One task: design ``features`` (n x p) and ``labels``.

    ``labels`` is normally a length-n vector.  A 2-D ``(n, k)`` array is
    accepted as well and means k label vectors sharing the same design
    (e.g. k noise replicates); all estimators act column-wise on it.
    """

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.features, dtype=float)
        y = np.asarray(self.labels, dtype=float)
        if X.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {X.shape}")
        if y.ndim not in (1, 2) or y.shape[0] != X.shape[0]:
            raise ValueError(f"labels shape {y.shape} does not match {X.shape[0]} rows")
        if X.shape[0] < 1:
            raise ValueError("a task needs at least one sample")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)

    @property
    def sample_size(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @cached_property
    def covariance(self) -> np.ndarray:
        return empirical_covariance(self)

    def with_labels(self, labels) -> "TaskData":
        return TaskData(self.features, labels)


@dataclass(frozen=True, eq=False)
class TrueModel:
    w_star: np.ndarray
    noise_variance: float = 1.0

    def __post_init__(self):
        w = np.asarray(self.w_star, dtype=float).reshape(-1)
        if not np.all(np.isfinite(w)):
            raise ValueError("w_star must be finite")
        if not self.noise_variance >= 0:
            raise ValueError(f"noise_variance must be >= 0, got {self.noise_variance}")
        object.__setattr__(self, "w_star", w)
        object.__setattr__(self, "noise_variance", float(self.noise_variance))

    @property
    def dim(self) -> int:
        return self.w_star.shape[0]


@dataclass(frozen=True, eq=False)
class TaskSpectrum:
    """Eigendecomposition ``basis @ diag(eigenvalues) @ basis.T`` of a covariance."""

    basis: np.ndarray
    eigenvalues: np.ndarray
    sample_size: int | None = None

    @property
    def dim(self) -> int:
        return self.basis.shape[0]

    @cached_property
    def basis_id(self) -> str:
        return hashlib.sha1(np.ascontiguousarray(self.basis).tobytes()).hexdigest()[:12]

    def covariance(self) -> np.ndarray:
        return (self.basis * self.eigenvalues) @ self.basis.T


@dataclass(frozen=True, eq=False)
class ProjectedErrorVector:
    values: np.ndarray
    basis_id: str = field(default="")

    @property
    def total(self):
        return np.sum(self.values, axis=0)


def empirical_covariance(task: TaskData) -> np.ndarray:
    X = task.features
    cov = X.T @ X / task.sample_size
    return 0.5 * (cov + cov.T)


def _check_symmetric(mat: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    mat = np.asarray(mat, dtype=float)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {mat.shape}")
    scale = max(1.0, float(np.max(np.abs(mat))) if mat.size else 1.0)
    if np.max(np.abs(mat - mat.T), initial=0.0) > tol * scale:
        raise ValueError("matrix is not symmetric")
    return mat


def spectral_decompose(cov, sample_size: int | None = None) -> TaskSpectrum:
    """Symmetric eigendecomposition with a reproducible layout.

    Eigenvalues come out in descending order, tiny ones are clamped to
    exactly zero, and each eigenvector is signed so that its first
    non-negligible component is positive.
    """
    cov = _check_symmetric(cov)
    vals, vecs = np.linalg.eigh(0.5 * (cov + cov.T))
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], vecs[:, order]
    tol = ZERO_EIG * max(1.0, float(np.max(np.abs(vals), initial=0.0)))
    if np.any(vals < -tol):
        raise ValueError(f"matrix is not positive semidefinite (min eigenvalue {vals.min():.3e})")
    vals = np.where(vals < tol, 0.0, vals)
    for j in range(vecs.shape[1]):
        col = vecs[:, j]
        lead = np.flatnonzero(np.abs(col) > 1e-12)
        if lead.size and col[lead[0]] < 0:
            vecs[:, j] = -col
    return TaskSpectrum(vecs, vals, sample_size)


def commutability_defect(matrices: Sequence[np.ndarray]) -> float:
    """Largest normalized commutator norm over all pairs."""
    mats = [np.asarray(m, dtype=float) for m in matrices]
    if not mats:
        return 0.0
    shape = mats[0].shape
    for m in mats:
        if m.ndim != 2 or m.shape != shape or shape[0] != shape[1]:
            raise ValueError(f"mismatched matrix dimensions {m.shape} vs {shape}")
    eps = np.finfo(float).eps
    norms = [np.linalg.norm(m) for m in mats]
    worst = 0.0
    for a in range(len(mats)):
        for b in range(a + 1, len(mats)):
            comm = mats[a] @ mats[b] - mats[b] @ mats[a]
            worst = max(worst, float(np.linalg.norm(comm) / (norms[a] * norms[b] + eps)))
    return worst


def label_features(features: np.ndarray, model: TrueModel, rng: np.random.Generator) -> TaskData:
    """Attach labels ``X w_* + eps`` with ``eps ~ N(0, sigma^2)``."""
    features = np.asarray(features, dtype=float)
    noise = rng.standard_normal(features.shape[0])
    labels = features @ model.w_star + np.sqrt(model.noise_variance) * noise
    return TaskData(features, labels)


def generate_iid_task(p: int, n: int, model: TrueModel, rng: np.random.Generator) -> TaskData:
    """Task with standard-normal features (no covariate shift)."""
    if p < 1 or n < 1:
        raise ValueError("p and n must be positive")
    if model.dim != p:
        raise ValueError(f"model has dimension {model.dim}, expected {p}")
    X = rng.standard_normal((n, p))
    return label_features(X, model, rng)


def draw_shift_eigenvalues(p: int, rng: np.random.Generator) -> np.ndarray:
    """Per-coordinate variances: 100 with probability 0.01, else 1."""
    return np.where(rng.random(p) < 0.01, 100.0, 1.0)


def generate_shift_task(p: int, n: int, model: TrueModel, rng: np.random.Generator) -> TaskData:
    """Task whose features have a random diagonal covariance (covariate shift).

    The stream is consumed as: eigenvalues, then features, then noise, so
    ``draw_shift_eigenvalues`` on an identically keyed stream recovers the
    population spectrum used here.
    """
    if p < 1 or n < 1:
        raise ValueError("p and n must be positive")
    if model.dim != p:
        raise ValueError(f"model has dimension {model.dim}, expected {p}")
    gammas = draw_shift_eigenvalues(p, rng)
    X = rng.standard_normal((n, p)) * np.sqrt(gammas)
    return label_features(X, model, rng)


def design_from_spectrum(basis: np.ndarray, eigenvalues: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Design matrix whose empirical covariance is exactly ``U diag(g) U^T``.

    Builds ``X = sqrt(n) Q diag(sqrt(g)) U^T`` restricted to the nonzero
    eigenvalues, with ``Q`` a random n x k matrix of orthonormal columns.
    Needs ``n`` at least the number of nonzero eigenvalues.
    """
    basis = np.asarray(basis, dtype=float)
    eigenvalues = np.asarray(eigenvalues, dtype=float)
    active = np.flatnonzero(eigenvalues > 0)
    if active.size > n:
        raise ValueError(f"{active.size} nonzero eigenvalues need at least that many samples, got n={n}")
    X = np.zeros((n, basis.shape[0]))
    if active.size:
        Q, _ = np.linalg.qr(rng.standard_normal((n, active.size)))
        X = np.sqrt(n) * (Q * np.sqrt(eigenvalues[active])) @ basis[:, active].T
    return X


def project_error(estimate, model: TrueModel, spectrum: TaskSpectrum) -> ProjectedErrorVector:
    """Squared coordinates of ``estimate - w_*`` in the spectrum's eigenbasis."""
    estimate = np.asarray(estimate, dtype=float)
    if estimate.shape[0] != spectrum.dim or model.dim != spectrum.dim:
        raise ValueError("dimension mismatch between estimate, model and spectrum")
    diff = estimate - (model.w_star if estimate.ndim == 1 else model.w_star[:, None])
    coords = spectrum.basis.T @ diff
    return ProjectedErrorVector(coords**2, spectrum.basis_id)
