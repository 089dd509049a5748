"""INI-style experiment configuration files.

A file has one ``[experiment]`` section and one ``[estimator NAME]``
section per rostered estimator, in roster order::

    [experiment]
    setting = iid
    tasks = 20
    dim = 200
    samples = 150
    sigma2 = 1
    replicates = 100
    design = random
    seed = 2024

    [estimator GR]
    kind = gr-practical
    ridge0 = 0.001

The hash of a configuration is taken over :func:`canonical_text`, which
re-emits the effective values in a fixed layout, so whitespace, comments,
key order and spelled-out defaults do not change it.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import fields
from importlib import resources
from pathlib import Path

from .errors import ConfigError
from .harness import HARNESS_KINDS, EstimatorSpec, ExperimentConfig

__all__ = ["parse_config", "load_config", "load_preset", "list_presets", "canonical_text", "config_hash"]

_INT_KEYS = ("tasks", "dim", "replicates", "seed")
_FLOAT_KEYS = ("sigma2", "eig_low", "eig_high")
_STR_KEYS = ("setting", "design", "basis")
_EXPERIMENT_KEYS = set(_INT_KEYS + _FLOAT_KEYS + _STR_KEYS + ("samples", "active"))


def _parse_int(key, raw) -> int:
    try:
        value = float(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected an integer, got {raw!r}") from None
    if value != int(value):
        raise ConfigError(f"{key}: expected an integer, got {raw!r}")
    return int(raw) if raw.strip().lstrip("+-").isdigit() else int(value)


def _parse_float(key, raw) -> float:
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected a number, got {raw!r}") from None


def _parse_param(kind: str, key: str, raw: str):
    if kind == "crr" and key == "lambda" and raw.strip().lower() == "auto":
        return "auto"
    if kind == "es-opt" and key == "steps":
        return _parse_int(key, raw)
    return _parse_float(key, raw)


def parse_config(text: str) -> ExperimentConfig:
    """Parse configuration text into a validated :class:`ExperimentConfig`."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from None
    if not parser.has_section("experiment"):
        raise ConfigError("missing [experiment] section")
    exp = parser["experiment"]
    unknown = set(exp) - _EXPERIMENT_KEYS
    if unknown:
        raise ConfigError(f"unknown experiment key(s): {sorted(unknown)}")
    kw = {}
    for key in _INT_KEYS:
        if key in exp:
            kw[key] = _parse_int(key, exp[key])
    for key in _FLOAT_KEYS:
        if key in exp:
            kw[key] = _parse_float(key, exp[key])
    for key in _STR_KEYS:
        if key in exp:
            kw[key] = exp[key].strip()
    if "samples" in exp:
        parts = exp["samples"].replace(",", " ").split()
        if not parts:
            raise ConfigError("samples: empty")
        kw["samples"] = tuple(_parse_int("samples", s) for s in parts)
    if "active" in exp:
        raw = exp["active"].strip().lower()
        kw["active"] = None if raw in ("", "none", "all") else _parse_int("active", raw)

    roster = []
    for section in parser.sections():
        if section == "experiment":
            continue
        head, _, name = section.partition(" ")
        name = name.strip()
        if head != "estimator" or not name:
            raise ConfigError(f"unexpected section [{section}]; use [estimator NAME]")
        body = dict(parser[section])
        kind = body.pop("kind", "").strip()
        if kind not in HARNESS_KINDS:
            raise ConfigError(f"estimator {name!r}: unknown kind {kind!r} (choose from {sorted(HARNESS_KINDS)})")
        bad = set(body) - set(HARNESS_KINDS[kind])
        if bad:
            raise ConfigError(f"estimator {name!r}: unknown parameter(s) {sorted(bad)}")
        params = tuple(sorted((k, _parse_param(kind, k, v)) for k, v in body.items()))
        roster.append(EstimatorSpec(name, kind, params))
    kw["roster"] = tuple(roster)
    return ExperimentConfig(**kw).validate()


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)


def list_presets() -> list[str]:
    root = resources.files("clrlab") / "presets"
    return sorted(p.name[:-4] for p in root.iterdir() if p.name.endswith(".ini"))


def preset_text(name: str) -> str:
    res = resources.files("clrlab") / "presets" / f"{name}.ini"
    if not res.is_file():
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(list_presets())}")
    return res.read_text(encoding="utf-8")


def load_preset(name: str) -> ExperimentConfig:
    return parse_config(preset_text(name))


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return " ".join(_fmt(v) for v in value)
    return "none" if value is None else str(value)


def canonical_text(cfg: ExperimentConfig) -> str:
    """Stable text form of the effective configuration (roster order kept)."""
    lines = ["[experiment]"]
    for f in sorted(fields(cfg), key=lambda f: f.name):
        if f.name == "roster":
            continue
        value = getattr(cfg, f.name)
        if f.name == "samples":
            value = cfg.sample_sizes
        elif f.name in _FLOAT_KEYS:
            value = float(value)
        lines.append(f"{f.name} = {_fmt(value)}")
    for spec in cfg.roster:
        lines += ["", f"[estimator {spec.name}]", f"kind = {spec.kind}"]
        for key in sorted(HARNESS_KINDS[spec.kind]):
            value = spec.param(key)
            lines.append(f"{key} = {_fmt(float(value) if isinstance(value, int) and key != 'steps' else value)}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(canonical_text(cfg).encode("utf-8")).hexdigest()
