"""Error, forgetting and generalization metrics."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .model import TrueModel


def estimation_error(estimate, model: TrueModel):
    """Squared distance ``||estimate - w_*||^2``.

    For a 2-D ``(p, k)`` estimate the error of every column is returned.
    """
    estimate = np.asarray(estimate, dtype=float)
    if estimate.shape[0] != model.dim:
        raise ValueError(f"estimate has dimension {estimate.shape[0]}, model has {model.dim}")
    diff = estimate - (model.w_star if estimate.ndim == 1 else model.w_star[:, None])
    out = np.einsum("i...,i...->...", diff, diff)
    return float(out) if out.ndim == 0 else out


def forgetting(errors: Sequence[float]) -> float | None:
    """Average increase of the last error over all earlier ones.

    ``errors`` is ``L(w_1), ..., L(w_t)``; with fewer than two entries the
    quantity is undefined and ``None`` is returned.
    """
    errors = [float(e) for e in errors]
    if len(errors) < 2:
        return None
    last = errors[-1]
    return math.fsum(last - e for e in errors[:-1]) / (len(errors) - 1)


def generalization(errors: Sequence[float], t: int | None = None) -> float:
    """Error of the estimator after task ``t`` (defaults to the last one).

    All tasks share one true parameter, so the per-task average collapses
    to the current estimation error.
    """
    if t is None:
        t = len(errors)
    if t < 1 or t > len(errors):
        raise ValueError(f"t={t} outside 1..{len(errors)}")
    return float(errors[t - 1])
