"""Seeded Monte Carlo experiments and theory comparison.

A run draws one "world" (true parameter, designs, spectra) per replicate in
random-design mode, or a single world shared by all replicates in
fixed-design mode, where only the label noise is redrawn.  Fixed-design
replicates are pushed through the estimators as label matrices in chunks of
:data:`CHUNK` columns, so the work split never depends on the thread count.
Every draw comes from a stream keyed by ``(kind, replicate, task)``.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import eigvalsh

from . import theory
from .errors import ConfigError
from .estimators import RegWeights, run_sequence
from .metrics import estimation_error, forgetting, generalization
from .model import (DESIGN, NOISE, SPECTRA, W_STAR, TaskData, TaskSpectrum, TrueModel,
                    design_from_spectrum, draw_shift_eigenvalues, generate_iid_task,
                    generate_shift_task, spectral_decompose, stream)

__all__ = [
    "EstimatorSpec",
    "ExperimentConfig",
    "EstimatorTrace",
    "Trace",
    "TheoryComparison",
    "run_experiment",
    "compare_to_theory",
    "estimation_error",
    "forgetting",
    "generalization",
    "SETTINGS",
    "HARNESS_KINDS",
    "CHUNK",
]

log = logging.getLogger(__name__)

SETTINGS = ("iid", "covariate_shift", "custom-spectra")
DESIGNS = ("fixed", "random")
BASES = ("identity", "random", "two-basis")
CHUNK = 500

# estimator kind -> allowed parameters and defaults
HARNESS_KINDS = {
    "oracle": {},
    "gr-practical": {"ridge0": 1e-3},
    "gr-opt": {"scale": 1.0},
    "crr": {"lambda": "auto"},
    "mn": {},
    "es-opt": {"steps": 1},
    "gr-nonshared": {},
}
_NEEDS_SHARED_BASIS = ("gr-opt", "es-opt")


@dataclass(frozen=True)
class EstimatorSpec:
    name: str
    kind: str
    params: tuple = ()

    def param(self, key):
        return dict(self.params).get(key, HARNESS_KINDS[self.kind][key])


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to reproduce a run.

    ``samples`` holds either one sample size for every task or one per
    task.  ``basis``, ``eig_low``, ``eig_high`` and ``active`` only matter
    for ``setting="custom-spectra"``: each task gets ``active`` nonzero
    eigenvalues drawn uniformly from ``[eig_low, eig_high]`` on a random
    subset of directions (all directions when ``active`` is None).
    """

    setting: str = "iid"
    tasks: int = 20
    dim: int = 200
    samples: tuple = (150,)
    sigma2: float = 1.0
    replicates: int = 100
    roster: tuple = ()
    design: str = "random"
    seed: int = 0
    basis: str = "identity"
    eig_low: float = 0.5
    eig_high: float = 2.0
    active: int | None = None

    @property
    def sample_sizes(self) -> tuple:
        s = tuple(int(v) for v in self.samples)
        return s * self.tasks if len(s) == 1 else s

    @property
    def fixed_world(self) -> bool:
        """True when every replicate sees the same designs and true parameter."""
        return self.design == "fixed" or self.setting == "custom-spectra"

    def validate(self) -> "ExperimentConfig":
        def fail(msg):
            raise ConfigError(msg)

        if self.setting not in SETTINGS:
            fail(f"setting must be one of {SETTINGS}, got {self.setting!r}")
        if self.design not in DESIGNS:
            fail(f"design must be one of {DESIGNS}, got {self.design!r}")
        if self.basis not in BASES:
            fail(f"basis must be one of {BASES}, got {self.basis!r}")
        for key in ("tasks", "dim", "replicates"):
            if int(getattr(self, key)) < 1:
                fail(f"{key} must be at least 1")
        if len(self.samples) not in (1, self.tasks):
            fail(f"samples needs 1 or {self.tasks} entries, got {len(self.samples)}")
        if any(n < 1 for n in self.sample_sizes):
            fail("sample sizes must be positive")
        if not (math.isfinite(self.sigma2) and self.sigma2 >= 0):
            fail("sigma2 must be a finite nonnegative number")
        if not 0 <= self.seed < 2**64:
            fail("seed must fit in an unsigned 64-bit integer")
        if not self.roster:
            fail("roster is empty")
        names = [e.name for e in self.roster]
        if len(set(names)) != len(names):
            fail("duplicate estimator names in roster")
        for spec in self.roster:
            if spec.kind not in HARNESS_KINDS:
                fail(f"estimator {spec.name!r}: unknown kind {spec.kind!r}")
            extra = set(dict(spec.params)) - set(HARNESS_KINDS[spec.kind])
            if extra:
                fail(f"estimator {spec.name!r}: unknown parameter(s) {sorted(extra)}")
            if spec.kind in _NEEDS_SHARED_BASIS and (self.setting != "custom-spectra" or self.basis == "two-basis"):
                fail(f"estimator {spec.name!r} ({spec.kind}) needs custom-spectra with a shared basis")
            self._check_params(spec, fail)
        if self.setting == "custom-spectra":
            if not 0 < self.eig_low <= self.eig_high:
                fail("need 0 < eig_low <= eig_high")
            active = self.dim if self.active is None else self.active
            if not 1 <= active <= self.dim:
                fail(f"active must lie in 1..{self.dim}")
            if min(self.sample_sizes) < active:
                fail(f"custom spectra with {active} active directions need n_t >= {active}")
        return self

    @staticmethod
    def _check_params(spec: EstimatorSpec, fail) -> None:
        try:
            if spec.kind == "crr":
                lam = spec.param("lambda")
                if lam != "auto" and not float(lam) > 0:
                    fail(f"estimator {spec.name!r}: lambda must be positive or 'auto'")
            elif spec.kind == "es-opt":
                m = spec.param("steps")
                if int(m) != float(m) or int(m) < 1:
                    fail(f"estimator {spec.name!r}: steps must be a positive integer")
            elif spec.kind == "gr-practical":
                if not float(spec.param("ridge0")) >= 0:
                    fail(f"estimator {spec.name!r}: ridge0 must be nonnegative")
            elif spec.kind == "gr-opt":
                if not float(spec.param("scale")) > 0:
                    fail(f"estimator {spec.name!r}: scale must be positive")
        except (TypeError, ValueError) as exc:
            fail(f"estimator {spec.name!r}: bad parameter ({exc})")


@dataclass
class EstimatorTrace:
    """Aggregated results for one estimator; arrays are indexed by t = 0..T.

    ``theory`` is the expected error implied by the hyperparameters actually
    used (the projected recursion for commuting spectra, exact moment
    propagation for the nonshared policy, the pooled formula for the
    oracle).  ``closed_form`` is the optimal-GR formula for the optimal
    estimators and the oracle formula for the oracle.  ``bound`` is the
    minimum-norm floor.  Any of them is None when not applicable.
    """

    name: str
    kind: str
    mean: np.ndarray
    stderr: np.ndarray
    forgetting: np.ndarray
    forgetting_stderr: np.ndarray
    generalization: np.ndarray
    errors: np.ndarray
    theory: np.ndarray | None = None
    closed_form: np.ndarray | None = None
    bound: np.ndarray | None = None
    failures: list = field(default_factory=list)

    @property
    def failure_count(self) -> int:
        return sum(hi - lo for lo, hi, _ in self.failures)

    @property
    def valid_replicates(self) -> np.ndarray:
        return np.isfinite(self.errors).sum(axis=0)


@dataclass
class Trace:
    config: ExperimentConfig
    estimators: dict

    def __getitem__(self, name: str) -> EstimatorTrace:
        return self.estimators[name]

    @property
    def failure_count(self) -> int:
        return sum(e.failure_count for e in self.estimators.values())


@dataclass(frozen=True)
class TheoryComparison:
    estimator: str
    mode: str
    z: np.ndarray
    passed: np.ndarray
    worst_t: int | None

    @property
    def compared(self) -> int:
        return int(np.sum(~np.isnan(self.z)))

    @property
    def ok(self) -> bool:
        """All compared steps pass and at least one step was comparable."""
        return self.compared > 0 and bool(np.all(self.passed))


# ----------------------------------------------------------------------------- worlds


@dataclass
class _World:
    model: TrueModel
    features: list
    covs: list
    seq: theory.SpectralSequence | None = None
    spectra: list | None = None  # per-task TaskSpectrum, only when needed

    def task_spectra(self, sizes) -> list:
        if self.spectra is None:
            self.spectra = [spectral_decompose(c, n) for c, n in zip(self.covs, sizes)]
        return self.spectra


def _random_basis(p: int, rng: np.random.Generator) -> np.ndarray:
    Q, R = np.linalg.qr(rng.standard_normal((p, p)))
    return Q * np.sign(np.diag(R))


def _custom_spectra(cfg: ExperimentConfig):
    """Bases (one per task) and eigenvalues ``(T, p)`` for custom-spectra runs."""
    rng = stream(cfg.seed, SPECTRA, 0)
    p, T = cfg.dim, cfg.tasks
    eye = np.eye(p)
    other = eye if cfg.basis == "identity" else _random_basis(p, rng)
    if cfg.basis == "two-basis":
        bases = [eye if t % 2 == 0 else other for t in range(T)]
    else:
        bases = [other] * T
    active = p if cfg.active is None else cfg.active
    eig = np.zeros((T, p))
    for t in range(T):
        idx = np.sort(rng.permutation(p)[:active])
        eig[t, idx] = rng.uniform(cfg.eig_low, cfg.eig_high, active)
    return bases, eig


def _fixed_features(cfg: ExperimentConfig, t: int, n: int) -> np.ndarray:
    rng = stream(cfg.seed, DESIGN, 0, t)
    p = cfg.dim
    if cfg.setting == "covariate_shift":
        gammas = draw_shift_eigenvalues(p, rng)
        return rng.standard_normal((n, p)) * np.sqrt(gammas)
    return rng.standard_normal((n, p))


def _w_star(cfg: ExperimentConfig, r: int) -> np.ndarray:
    return stream(cfg.seed, W_STAR, r).standard_normal(cfg.dim)


def _build_world(cfg: ExperimentConfig, r: int, custom=None):
    """World for replicate ``r`` (``r = 0`` doubles as the shared fixed world).

    Random-design iid/shift worlds also return the fully labelled tasks.
    """
    sizes = cfg.sample_sizes
    if cfg.setting == "custom-spectra":
        bases, eig = custom
        model = TrueModel(_w_star(cfg, 0), cfg.sigma2)
        feats = [design_from_spectrum(bases[t], eig[t], sizes[t], stream(cfg.seed, DESIGN, r, t))
                 for t in range(cfg.tasks)]
        covs = [(b * g) @ b.T for b, g in zip(bases, eig)]
        world = _World(model, feats, covs)
        if cfg.basis != "two-basis":
            world.seq = theory.SpectralSequence.from_model(bases[0], eig, sizes, model)
        else:
            world.spectra = [TaskSpectrum(b, g, n) for b, g, n in zip(bases, eig, sizes)]
        return world, None
    if cfg.design == "fixed":
        model = TrueModel(_w_star(cfg, 0), cfg.sigma2)
        feats = [_fixed_features(cfg, t, sizes[t]) for t in range(cfg.tasks)]
        return _World(model, feats, [X.T @ X / X.shape[0] for X in feats]), None
    model = TrueModel(_w_star(cfg, r), cfg.sigma2)
    gen = generate_shift_task if cfg.setting == "covariate_shift" else generate_iid_task
    tasks = [gen(cfg.dim, sizes[t], model, stream(cfg.seed, DESIGN, r, t)) for t in range(cfg.tasks)]
    return _World(model, [d.features for d in tasks], [d.covariance for d in tasks]), tasks


# ----------------------------------------------------------------------------- policies


@dataclass
class _Plan:
    """How to run one rostered estimator in one world."""

    kind: str
    policy: Callable | None
    theory: np.ndarray | None = None
    closed_form: np.ndarray | None = None
    bound: np.ndarray | None = None


def _recursion_curve(seq: theory.SpectralSequence, lambdas) -> np.ndarray:
    return theory.gr_error_curve(seq, lambdas).sum(axis=1)


def _closed_form_curve(seq: theory.SpectralSequence) -> np.ndarray:
    return np.array([math.fsum(seq.e0)] + [theory.gr_error_closed_form(seq, t)[0]
                                           for t in range(1, seq.tasks + 1)])


def _crr_auto(world: _World, sizes, sigma2: float) -> list:
    """Scalar analogue of the optimal spectral weights, using the mean signal per direction."""
    p = world.model.dim
    e_bar = math.fsum(world.model.w_star**2) / p
    prior = 0.0
    out = []
    for cov, n in zip(world.covs, sizes):
        lam = ((sigma2 / e_bar if e_bar > 0 else 0.0) + prior) / n
        out.append(lam)
        prior += n * float(np.trace(cov)) / p
    return out


def _plan(spec: EstimatorSpec, world: _World, cfg: ExperimentConfig, with_theory: bool = True) -> _Plan:
    sizes = cfg.sample_sizes
    seq = world.seq
    T, p = cfg.tasks, cfg.dim
    e_total = math.fsum(world.model.w_star**2)
    kind = spec.kind
    if kind == "oracle":
        curve = None
        if with_theory:
            grams = [n * c for n, c in zip(sizes, world.covs)]
            curve = np.concatenate([[e_total], theory.pooled_oracle_error(grams, cfg.sigma2)])
        return _Plan("oracle", None, curve, curve)
    if kind == "mn":
        bound = np.concatenate([[np.nan], [theory.mn_lower_bound(eigvalsh(c, subset_by_index=[p - 1, p - 1])[0],
                                                                 cfg.sigma2) for c in world.covs]])
        curve = None
        if seq is not None:
            curve = _recursion_curve(seq, [theory.PinnedVector(np.zeros(p), g == 0) for g in seq.eigenvalues])
        return _Plan("mn", None, curve, None, bound)
    if kind == "crr":
        lam = spec.param("lambda")
        lams = _crr_auto(world, sizes, cfg.sigma2) if lam == "auto" else [float(lam)] * T
        curve = None if seq is None else _recursion_curve(seq, [np.full(p, v) for v in lams])
        return _Plan("crr", lambda t, tasks: lams[t - 1], curve)
    if kind == "gr-practical":
        ridge0 = float(spec.param("ridge0"))
        weights = [RegWeights.ridge(ridge0, p)]
        weights += [theory.practical_weights(list(zip(world.covs[: t - 1], sizes[: t - 1])), sizes[t - 1], ridge0)
                    for t in range(2, T + 1)]
        curve = None
        if seq is not None:
            curve = _recursion_curve(seq, [theory.practical_lambda(seq, t, ridge0) for t in range(1, T + 1)])
        return _Plan("gr", lambda t, tasks: weights[t - 1], curve)
    if kind == "gr-opt":
        scale = float(spec.param("scale"))
        weights = [theory.optimal_weights(seq, t, scale) for t in range(1, T + 1)]
        lams = []
        for t in range(1, T + 1):
            lam = theory.optimal_lambda(seq, t)
            lams.append(theory.PinnedVector(scale * lam.values, lam.pinned))
        return _Plan("gr", lambda t, tasks: weights[t - 1], _recursion_curve(seq, lams), _closed_form_curve(seq))
    if kind == "es-opt":
        m = int(spec.param("steps"))
        schedules = [theory.es_optimal_schedule(seq, t, m) for t in range(1, T + 1)]
        curve = _closed_form_curve(seq)
        return _Plan("es", lambda t, tasks: schedules[t - 1], curve, curve)
    if kind == "gr-nonshared":
        spectra = world.task_spectra(sizes)
        weights = theory.nonshared_basis_monotone_policy(spectra, world.model, cfg.sigma2)
        curve = theory.nonshared_basis_expected_errors(spectra, world.model, cfg.sigma2)
        return _Plan("gr", lambda t, tasks: weights[t - 1], curve)
    raise ConfigError(f"unknown estimator kind {kind!r}")


# ----------------------------------------------------------------------------- execution


def _noise(cfg: ExperimentConfig, lo: int, hi: int, t: int, n: int) -> np.ndarray:
    return np.stack([stream(cfg.seed, NOISE, r, t).standard_normal(n) for r in range(lo, hi)], axis=1)


def _run_plans(plans: dict, tasks: Sequence[TaskData], model: TrueModel, width: int):
    """Errors ``(T + 1, width)`` per estimator plus failure messages."""
    out, failed = {}, {}
    for name, plan in plans.items():
        try:
            trace = run_sequence(tasks, plan.kind, plan.policy, model=model, name=name)
            errs = np.asarray(trace.per_task_errors, dtype=float).reshape(len(tasks) + 1, -1)
            out[name] = np.broadcast_to(errs, (len(tasks) + 1, width)).copy()
        except Exception as exc:  # record and continue
            out[name] = np.full((len(tasks) + 1, width), np.nan)
            failed[name] = f"{type(exc).__name__}: {exc}"
    return out, failed


def _fixed_unit(cfg, world, plans, lo, hi):
    sqrt_s = math.sqrt(cfg.sigma2)
    tasks = []
    for t, X in enumerate(world.features):
        clean = X @ world.model.w_star
        tasks.append(TaskData(X, clean[:, None] + sqrt_s * _noise(cfg, lo, hi, t, X.shape[0])))
    return _run_plans(plans, tasks, world.model, hi - lo)


def _random_unit(cfg, custom, r):
    world, tasks = _build_world(cfg, r, custom)
    if tasks is None:
        sqrt_s = math.sqrt(cfg.sigma2)
        tasks = []
        for t, X in enumerate(world.features):
            noise = stream(cfg.seed, NOISE, r, t).standard_normal(X.shape[0])
            tasks.append(TaskData(X, X @ world.model.w_star + sqrt_s * noise))
    plans, failed = {}, {}
    for spec in cfg.roster:
        try:
            plans[spec.name] = _plan(spec, world, cfg, with_theory=False)
        except Exception as exc:
            failed[spec.name] = f"{type(exc).__name__}: {exc}"
    out, run_failed = _run_plans(plans, tasks, world.model, 1)
    for name in failed:
        out[name] = np.full((cfg.tasks + 1, 1), np.nan)
    failed.update(run_failed)
    bounds = {name: plans[name].bound for name in plans if plans[name].bound is not None}
    return out, failed, bounds


def _stderr(col: np.ndarray) -> float:
    """Sample standard deviation over sqrt(R); exactly 0 for constant samples or R < 2."""
    if col.size < 2 or np.ptp(col) == 0:
        return 0.0
    return float(np.std(col, ddof=1)) / math.sqrt(col.size)


def _aggregate(name, kind, errors, plan_info, failures) -> EstimatorTrace:
    R, cols = errors.shape
    mean = np.full(cols, np.nan)
    se = np.full(cols, np.nan)
    for t in range(cols):
        col = errors[:, t]
        col = col[np.isfinite(col)]
        if col.size:
            mean[t] = math.fsum(col) / col.size
            se[t] = _stderr(col)
    fmean = np.full(cols, np.nan)
    fse = np.full(cols, np.nan)
    for t in range(2, cols):
        per = np.array([forgetting(row[1: t + 1]) for row in errors])
        per = per[np.isfinite(per)]
        if per.size:
            fmean[t] = math.fsum(per) / per.size
            fse[t] = _stderr(per)
    return EstimatorTrace(name, kind, mean, se, fmean, fse, mean.copy(), errors, *plan_info, failures=failures)


def run_experiment(config: ExperimentConfig, threads: int = 1) -> Trace:
    """Run every rostered estimator over ``config.replicates`` replicates.

    Results depend only on the configuration (including its seed), never on
    ``threads`` or on scheduling.
    """
    cfg = config.validate()
    threads = max(1, int(threads))
    custom = _custom_spectra(cfg) if cfg.setting == "custom-spectra" else None
    R, T = cfg.replicates, cfg.tasks
    failures = {spec.name: [] for spec in cfg.roster}
    info = {}

    if cfg.design == "fixed":
        world, _ = _build_world(cfg, 0, custom)
        plans = {}
        for spec in cfg.roster:
            try:
                plans[spec.name] = _plan(spec, world, cfg)
            except Exception as exc:
                failures[spec.name].append((0, R, f"{type(exc).__name__}: {exc}"))
        chunks = [(lo, min(lo + CHUNK, R)) for lo in range(0, R, CHUNK)]
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda c: _fixed_unit(cfg, world, plans, *c), chunks))
        errors = {}
        for spec in cfg.roster:
            if spec.name not in plans:
                errors[spec.name] = np.full((R, T + 1), np.nan)
                continue
            parts = []
            for (lo, hi), (out, failed) in zip(chunks, results):
                parts.append(out[spec.name].T)
                if spec.name in failed:
                    failures[spec.name].append((lo, hi, failed[spec.name]))
            errors[spec.name] = np.concatenate(parts, axis=0)
            plan = plans[spec.name]
            info[spec.name] = (plan.theory, plan.closed_form, plan.bound)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda r: _random_unit(cfg, custom, r), range(R)))
        errors = {}
        for spec in cfg.roster:
            errors[spec.name] = np.concatenate([out[spec.name].T for out, _, _ in results], axis=0)
            for r, (_, failed, _) in enumerate(results):
                if spec.name in failed:
                    failures[spec.name].append((r, r + 1, failed[spec.name]))
            theory_curve = closed = None
            if cfg.fixed_world:
                world, _ = _build_world(cfg, 0, custom)
                try:
                    plan = _plan(spec, world, cfg)
                    theory_curve, closed = plan.theory, plan.closed_form
                except Exception:
                    pass
            bounds = [b[spec.name] for _, _, b in results if spec.name in b]
            bound = None
            if bounds:
                stack = np.array(bounds)
                bound = np.concatenate([[np.nan], [math.fsum(stack[:, t]) / len(stack) for t in range(1, T + 1)]])
            info[spec.name] = (theory_curve, closed, bound)

    traces = {}
    for spec in cfg.roster:
        plan_info = info.get(spec.name, (None, None, None))
        for lo, hi, msg in failures[spec.name][:1]:
            log.warning("%s failed on replicates %d..%d: %s", spec.name, lo, hi - 1, msg)
        traces[spec.name] = _aggregate(spec.name, spec.kind, errors[spec.name], plan_info, failures[spec.name])
    return Trace(cfg, traces)


def compare_to_theory(trace: EstimatorTrace, curve, mode: str = "two-sided", z_max: float = 3.0,
                      times: Sequence[int] | None = None) -> TheoryComparison:
    """Per-t z-scores of the empirical mean against ``curve``.

    ``two-sided`` passes where ``|z| <= z_max``; ``lower-bound`` where
    ``mean + z_max * stderr >= curve``; ``upper-bound`` where
    ``mean - z_max * stderr <= curve``.  Steps with an undefined curve or
    mean are skipped; with zero standard error the mean must match to
    ``1e-10`` relative.
    """
    if mode not in ("two-sided", "lower-bound", "upper-bound"):
        raise ValueError(f"unknown mode {mode!r}")
    curve = np.asarray(curve, dtype=float)
    if curve.shape != trace.mean.shape:
        raise ValueError(f"curve has shape {curve.shape}, trace has {trace.mean.shape}")
    idx = range(curve.size) if times is None else times
    z = np.full(curve.size, np.nan)
    passed = np.ones(curve.size, dtype=bool)
    for t in idx:
        m, s, c = trace.mean[t], trace.stderr[t], curve[t]
        if not (np.isfinite(m) and np.isfinite(c)):
            continue
        diff = m - c
        slack = 1e-10 * (1.0 + abs(c))
        if s > 0:
            z[t] = diff / s
        else:
            z[t] = 0.0 if abs(diff) <= slack else math.copysign(math.inf, diff)
        if mode == "two-sided":
            passed[t] = abs(z[t]) <= z_max or abs(diff) <= slack
        elif mode == "lower-bound":
            passed[t] = m + z_max * s + slack >= c
        else:
            passed[t] = m - z_max * s - slack <= c
    worst = None
    if not np.all(np.isnan(z)):
        signed = {"two-sided": np.abs(z), "lower-bound": -z, "upper-bound": z}[mode]
        worst = int(np.argmax(np.where(np.isnan(z), -np.inf, signed)))
    return TheoryComparison(trace.name, mode, z, passed, worst)


def with_overrides(cfg: ExperimentConfig, **kw) -> ExperimentConfig:
    """Copy of ``cfg`` with the non-None keyword values replaced."""
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})
