"""Command-line entry point.

Exit codes: 0 success, 2 bad configuration or arguments, 3 runtime
failure, 4 a check failed.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .checks import (EQUIV_TOL, check_corollary_schedule, check_es_gr_equivalence, lower_bound_tables,
                     vanilla_mismatch, verify_theory)
from .config import config_hash, list_presets, load_config, load_preset
from .errors import ConfigError
from .harness import run_experiment, with_overrides
from .report import fmt_float, svg_line_chart, trace_svg, write_csv, write_manifest, write_trace_csv

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_CHECK = 0, 2, 3, 4
THREADS_ENV = "CLRLAB_THREADS"

log = logging.getLogger("clrlab")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _threads(args) -> int:
    if args.threads is not None:
        return args.threads
    raw = os.environ.get(THREADS_ENV, "")
    try:
        return max(1, int(raw)) if raw else 1
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None


def _load(args, default_preset=None):
    if args.config and args.preset:
        raise ConfigError("give either --config or --preset, not both")
    if args.config:
        cfg = load_config(args.config)
    elif args.preset or default_preset:
        cfg = load_preset(args.preset or default_preset)
    else:
        raise ConfigError("no configuration: pass --config PATH or --preset NAME")
    return with_overrides(cfg, seed=args.seed, replicates=args.replicates).validate()


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_simulate(args) -> int:
    cfg = _load(args)
    out = _out_dir(args.out)
    trace = run_experiment(cfg, threads=_threads(args))
    files = [write_trace_csv(trace, out / "trace.csv"),
             trace_svg(trace, out / "trace.svg", log_y=args.log_scale,
                       title=f"{cfg.setting}, p={cfg.dim}, T={cfg.tasks}, sigma2={cfg.sigma2:g}")]
    write_manifest(out, files, config_hash(cfg), cfg.seed,
                   {"failures": {k: v.failure_count for k, v in trace.estimators.items()}})
    for name, est in trace.estimators.items():
        print(f"{name:>16}  L(w_1)={fmt_float(est.mean[1]):<24} L(w_T)={fmt_float(est.mean[-1]):<24}"
              f" failures={est.failure_count}")
    if trace.failure_count:
        print(f"warning: {trace.failure_count} estimator-replicate failures recorded", file=sys.stderr)
    return EXIT_OK


def cmd_verify_theory(args) -> int:
    cfg = _load(args, default_preset="verify_default")
    trace, results = verify_theory(cfg, threads=_threads(args))
    header = ("check", "estimator", "status", "worst_t", "worst_z", "detail")
    rows = [(r.check, r.estimator, r.status, "" if r.worst_t is None else r.worst_t,
             None if r.worst_z is None else float(r.worst_z), r.detail) for r in results]
    print(f"{'check':<18}{'estimator':<16}{'status':<7}{'worst_t':>8}{'worst_z':>10}  detail")
    for r in results:
        z = "" if r.worst_z is None else f"{r.worst_z:.2f}"
        t = "" if r.worst_t is None else str(r.worst_t)
        print(f"{r.check:<18}{r.estimator:<16}{r.status:<7}{t:>8}{z:>10}  {r.detail}")
    if args.out:
        out = _out_dir(args.out)
        files = [write_csv(out / "checks.csv", header, rows), write_trace_csv(trace, out / "trace.csv"),
                 trace_svg(trace, out / "trace.svg", log_y=args.log_scale, title="theory verification")]
        write_manifest(out, files, config_hash(cfg), cfg.seed)
    failed = [r for r in results if r.failed]
    if failed:
        print("FAILED: " + ", ".join(f"{r.check}/{r.estimator}" for r in failed), file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def cmd_equivalence(args) -> int:
    if any(m < 1 for m in args.m):
        raise ConfigError("every m must be at least 1")
    if args.p < 1 or args.tasks < 1 or args.sequences < 1:
        raise ConfigError("p, tasks and sequences must be positive")
    seed = 0 if args.seed is None else args.seed
    ok = True
    for res in check_es_gr_equivalence(args.p, args.tasks, args.m, seed, args.sequences):
        status = "PASS" if res.ok else "FAIL"
        print(f"linked ES/GR  m={res.m:<4} sequences={res.sequences}  worst rel gap {res.worst_rel:.3e} "
              f"at (t={res.worst_t}, j={res.worst_j}, m={res.m}) sequence {res.worst_sequence}  {status}")
        ok &= res.ok
    for m in args.m:
        est_gap, curve_gap = check_corollary_schedule(args.p, args.tasks, m, seed)
        good = est_gap <= EQUIV_TOL and curve_gap <= 1e-10
        print(f"optimal schedule m={m:<4} estimate gap {est_gap:.3e}  error-curve gap {curve_gap:.3e}  "
              f"{'PASS' if good else 'FAIL'}")
        ok &= good
    gap = vanilla_mismatch()
    expected = gap > EQUIV_TOL
    print(f"scalar ES vs scalar ridge (expected to differ): gap {gap:.3e}  {'PASS' if expected else 'FAIL'}")
    ok &= expected
    return EXIT_OK if ok else EXIT_CHECK


def cmd_lower_bounds(args) -> int:
    try:
        curve, control, mn = lower_bound_tables(args.n_grid, shared=args.shared)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    header = ("curve", "n", "eps", "ratio", "lambda1", "lambda2", "crr_error", "gr_error")
    rows = [(label, pt.n, pt.eps, pt.ratio, pt.lam1, pt.lam2, pt.crr_error, pt.gr_error)
            for label, pts in (("construction", curve), ("control", control)) for pt in pts]
    for row in rows:
        print(f"{row[0]:<13} n={row[1]:<6} eps={row[2]:<10.4g} ratio={row[3]:.6g}")
    for s2, g, b in mn:
        print(f"mn floor  sigma2={s2:g} gamma_max={g:g} -> {b:.6g}")
    increasing = all(b.ratio > a.ratio for a, b in zip(curve, curve[1:]))
    if args.out:
        out = _out_dir(args.out)
        files = [write_csv(out / "ratio.csv", header, rows),
                 write_csv(out / "mn_bound.csv", ("sigma2", "gamma_max", "bound"), mn),
                 svg_line_chart({"construction": ([p.n for p in curve], [p.ratio for p in curve]),
                                 "control eps=1": ([p.n for p in control], [p.ratio for p in control])},
                                out / "ratio.svg", title="best CRR error / optimal GR error",
                                xlabel="n", ylabel="ratio", log_y=args.log_scale, dashed=["control eps=1"])]
        write_manifest(out, files, extra={"n_grid": list(args.n_grid), "shared_lambda": args.shared})
    if not increasing:
        print("FAILED: ratio curve is not strictly increasing", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="clrlab", description="Continual linear regression lab.")
    parser.add_argument("--version", action="version", version=f"clrlab {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to standard error")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, out_required=False):
        p.add_argument("--config", help="experiment config file")
        p.add_argument("--preset", help=f"bundled config ({', '.join(list_presets())})")
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--replicates", type=int, help="override the replicate count")
        p.add_argument("--threads", type=int, help=f"worker threads (default ${THREADS_ENV} or 1)")
        p.add_argument("--log-scale", action="store_true", help="log-scale y axis in plots")

    p = sub.add_parser("simulate", help="run an experiment and write trace.csv / trace.svg")
    common(p, out_required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("verify-theory", help="compare Monte Carlo errors with closed forms")
    common(p)
    p.set_defaults(func=cmd_verify_theory)

    p = sub.add_parser("equivalence", help="check early stopping against linked ridge weights")
    p.add_argument("--p", type=int, default=6)
    p.add_argument("--tasks", type=int, default=5)
    p.add_argument("--m", type=int, nargs="+", default=[1, 3, 10])
    p.add_argument("--seed", type=int)
    p.add_argument("--sequences", type=int, default=50)
    p.set_defaults(func=cmd_equivalence)

    p = sub.add_parser("lower-bounds", help="CRR/GR ratio along the divergence construction")
    p.add_argument("--n-grid", type=int, nargs="+", default=[10, 30, 100, 300])
    p.add_argument("--out", help="output directory")
    p.add_argument("--shared", action="store_true", help="infimize over one lambda shared by both tasks")
    p.add_argument("--log-scale", action="store_true")
    p.set_defaults(func=cmd_lower_bounds)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
