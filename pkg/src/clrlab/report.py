"""CSV, SVG and manifest writers."""

from __future__ import annotations

import csv
import json
import math
from datetime import datetime, timezone
from pathlib import Path
from typing import Mapping, Sequence
from xml.sax.saxutils import escape

import numpy as np

from . import __version__
from .harness import Trace

__all__ = ["fmt_float", "write_csv", "write_trace_csv", "svg_line_chart", "write_manifest", "TRACE_COLUMNS"]

TRACE_COLUMNS = ("estimator", "task_index", "mean_error", "stderr", "theory_error", "forgetting", "generalization")

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf")


def fmt_float(x) -> str:
    """17 significant digits; empty for missing values."""
    if x is None:
        return ""
    x = float(x)
    return "" if math.isnan(x) else format(x, ".17g")


def write_csv(path, header: Sequence[str], rows) -> Path:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt_float(v) if isinstance(v, (float, np.floating)) or v is None else v for v in row])
    return path


def trace_rows(trace: Trace):
    T = trace.config.tasks
    for name, est in trace.estimators.items():
        curve = est.theory if est.theory is not None else est.closed_form
        for t in range(1, T + 1):
            yield (name, t, float(est.mean[t]), float(est.stderr[t]),
                   None if curve is None else float(curve[t]),
                   float(est.forgetting[t]), float(est.generalization[t]))


def write_trace_csv(trace: Trace, path) -> Path:
    """One row per (estimator, t) for t = 1..T."""
    return write_csv(path, TRACE_COLUMNS, trace_rows(trace))


def svg_line_chart(series: Mapping[str, tuple], path, title: str = "", xlabel: str = "task",
                   ylabel: str = "estimation error", log_y: bool = False,
                   dashed: Sequence[str] = ()) -> Path:
    """Minimal line chart: one polyline per named ``(x, y)`` series.

    Non-finite points (and nonpositive ones on a log axis) are dropped.
    Series named in ``dashed`` are drawn dashed.
    """
    W, H, left, right, top, bottom = 720, 440, 70, 170, 40, 50
    clean = {}
    for name, (x, y) in series.items():
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        keep = np.isfinite(x) & np.isfinite(y) & ((y > 0) if log_y else True)
        clean[name] = (x[keep], np.log10(y[keep]) if log_y else y[keep])
    xs = np.concatenate([v[0] for v in clean.values()] or [np.zeros(1)])
    ys = np.concatenate([v[1] for v in clean.values()] or [np.zeros(1)])
    if xs.size == 0:
        xs, ys = np.zeros(1), np.zeros(1)
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = float(ys.min()), float(ys.max())
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0
    pw, ph = W - left - right, H - top - bottom

    def px(v):
        return left + (v - x0) / (x1 - x0) * pw

    def py(v):
        return top + (1.0 - (v - y0) / (y1 - y0)) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
           f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
           f'<text x="{W / 2:.1f}" y="22" text-anchor="middle" font-size="15">{escape(title)}</text>',
           f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
           f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>']
    for k in range(5):
        yv = y0 + (y1 - y0) * k / 4
        label = f"{10**yv:.3g}" if log_y else f"{yv:.3g}"
        out.append(f'<text x="{left - 6}" y="{py(yv) + 4:.1f}" text-anchor="end" font-size="11">{label}</text>')
        xv = x0 + (x1 - x0) * k / 4
        out.append(f'<text x="{px(xv):.1f}" y="{top + ph + 16}" text-anchor="middle" font-size="11">{xv:.3g}</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{H - 10}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>')
    ylab = escape(ylabel + (" (log scale)" if log_y else ""))
    out.append(f'<text x="16" y="{top + ph / 2:.1f}" text-anchor="middle" font-size="12" '
               f'transform="rotate(-90 16 {top + ph / 2:.1f})">{ylab}</text>')
    for i, (name, (x, y)) in enumerate(clean.items()):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(x, y))
        dash = ' stroke-dasharray="6,4"' if name in dashed else ""
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="2"{dash} points="{pts}">'
                   f'<title>{escape(name)}</title></polyline>')
        ly = top + 14 + 18 * i
        out.append(f'<line x1="{W - right + 12}" y1="{ly}" x2="{W - right + 36}" y2="{ly}" stroke="{color}" '
                   f'stroke-width="2"{dash}/>')
        out.append(f'<text x="{W - right + 42}" y="{ly + 4}" font-size="11">{escape(name)}</text>')
    out.append("</svg>")
    path = Path(path)
    path.write_text("\n".join(out) + "\n", encoding="utf-8")
    return path


def trace_svg(trace: Trace, path, log_y: bool = False, title: str = "") -> Path:
    """Mean error per estimator over t = 0..T, plus dashed theory curves when known."""
    series, dashed = {}, []
    t = np.arange(trace.config.tasks + 1)
    for name, est in trace.estimators.items():
        series[name] = (t, est.mean)
        curve = est.theory if est.theory is not None else est.closed_form
        if curve is not None:
            series[f"{name} (theory)"] = (t, curve)
            dashed.append(f"{name} (theory)")
    return svg_line_chart(series, path, title=title, log_y=log_y, dashed=dashed)


def write_manifest(out_dir, files: Sequence, config_hash: str | None = None, seed: int | None = None,
                   extra: dict | None = None) -> Path:
    out_dir = Path(out_dir)
    names = sorted(Path(f).name for f in files) + ["manifest.json"]
    body = {
        "tool": "clrlab",
        "version": __version__,
        "config_hash": config_hash,
        "seed": seed,
        "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "files": names,
    }
    if extra:
        body.update(extra)
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
