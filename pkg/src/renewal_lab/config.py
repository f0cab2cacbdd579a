"""Experiment configuration files.

INI-style text with three sections::

    [experiment]
    name = lyapunov
    seed = 0

    [measure]
    name = cone2
    # or explicit atoms, matrices row-major and separated by ';'
    # matrices = 2 1 1 1; 1 1 1 2
    # weights = 0.5 0.5
    # perms = 0; 0

    [params]
    n_steps = 1000

Values are kept as the original strings; typed accessors parse on demand.
"""

from __future__ import annotations

import configparser
import math
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, RenewalLabError
from .walk_engine import BUILTIN_MEASURES, GeneratorMeasure, measure, named_measure

SECTIONS = ("experiment", "measure", "params")


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    seed: int
    measure: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)
    out: str | None = None
    extra: dict = field(default_factory=dict)

    def get_float(self, key: str, default: float | None = None) -> float:
        raw = self.params.get(key)
        if raw is None:
            if default is None:
                raise ConfigError(f"missing parameter {key!r}")
            return float(default)
        try:
            return float(raw)
        except ValueError as exc:
            raise ConfigError(f"parameter {key!r} is not a number: {raw!r}") from exc

    def get_int(self, key: str, default: int | None = None) -> int:
        v = self.get_float(key, None if default is None else float(default))
        if v != int(v):
            raise ConfigError(f"parameter {key!r} must be an integer")
        return int(v)

    def get_floats(self, key: str, default=None) -> list[float]:
        raw = self.params.get(key)
        if raw is None:
            if default is None:
                raise ConfigError(f"missing parameter {key!r}")
            return [float(v) for v in default]
        return _parse_floats(raw, key)

    def get_str(self, key: str, default: str | None = None) -> str:
        raw = self.params.get(key, default)
        if raw is None:
            raise ConfigError(f"missing parameter {key!r}")
        return raw

    def with_overrides(self, seed: int | None = None, params: dict | None = None, out: str | None = None) -> "ExperimentConfig":
        p = dict(self.params)
        p.update(params or {})
        cfg = ExperimentConfig(self.name, self.seed if seed is None else int(seed), dict(self.measure), p, out or self.out, dict(self.extra))
        validate(cfg)
        return cfg

    def build_measure(self) -> GeneratorMeasure:
        return build_measure(self.measure)


def _parse_floats(raw: str, key: str) -> list[float]:
    try:
        return [float(v) for v in re.split(r"[,\s]+", raw.strip()) if v]
    except ValueError as exc:
        raise ConfigError(f"{key!r}: expected numbers, got {raw!r}") from exc


def build_measure(spec: dict) -> GeneratorMeasure:
    try:
        if "matrices" not in spec:
            name = spec.get("name", "")
            if name not in BUILTIN_MEASURES:
                raise ConfigError(f"unknown measure {name!r}; built-ins are {', '.join(BUILTIN_MEASURES)}")
            return named_measure(name)
        mats = []
        for chunk in spec["matrices"].split(";"):
            vals = _parse_floats(chunk, "matrices")
            d = int(round(math.sqrt(len(vals))))
            if d * d != len(vals) or d < 2:
                raise ConfigError(f"matrix with {len(vals)} entries is not square")
            mats.append(np.array(vals).reshape(d, d))
        weights = _parse_floats(spec["weights"], "weights") if "weights" in spec else None
        perms = None
        if "perms" in spec:
            perms = [[int(v) for v in _parse_floats(c, "perms")] for c in spec["perms"].split(";")]
        return measure(mats, weights, perms, spec.get("name", "custom"))
    except ConfigError:
        raise
    except RenewalLabError as exc:
        raise ConfigError(f"invalid measure: {exc}") from exc


def normalize(text: str) -> str:
    """Canonical text: comments and blank lines dropped, section names and
    keys lower-cased, single spaces around '=', values stripped."""
    out = []
    for line in text.splitlines():
        s = line.strip()
        if not s or s[0] in "#;":
            continue
        if s.startswith("[") and s.endswith("]"):
            if out:
                out.append("")
            out.append(f"[{s[1:-1].strip().lower()}]")
            continue
        if "=" not in s:
            raise ConfigError(f"cannot parse line {line!r}")
        k, v = s.split("=", 1)
        out.append(f"{k.strip().lower()} = {v.strip()}")
    return "\n".join(out) + "\n"


def parse(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"), inline_comment_prefixes=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unparsable config: {exc}") from exc
    sections = {s.lower(): dict(cp[s]) for s in cp.sections()}
    exp = sections.get("experiment", {})
    if "seed" not in exp:
        raise ConfigError("seed is mandatory in [experiment]")
    try:
        seed = int(exp["seed"])
    except ValueError as exc:
        raise ConfigError(f"seed must be an integer, got {exp['seed']!r}") from exc
    extra = {k: v for k, v in sections.items() if k not in SECTIONS}
    cfg = ExperimentConfig(
        name=exp.get("name", ""),
        seed=seed,
        measure=sections.get("measure", {}),
        params=sections.get("params", {}),
        out=exp.get("out"),
        extra=extra,
    )
    validate(cfg)
    return cfg


def serialize(cfg: ExperimentConfig) -> str:
    lines = ["[experiment]"]
    if cfg.name:
        lines.append(f"name = {cfg.name}")
    lines.append(f"seed = {cfg.seed}")
    if cfg.out:
        lines.append(f"out = {cfg.out}")
    for sec, body in (("measure", cfg.measure), ("params", cfg.params), *cfg.extra.items()):
        if not body:
            continue
        lines += ["", f"[{sec}]"] + [f"{k} = {v}" for k, v in body.items()]
    return "\n".join(lines) + "\n"


def validate(cfg: ExperimentConfig) -> None:
    for k, v in cfg.params.items():
        if "tol" in k:
            try:
                ok = float(v) > 0
            except ValueError:
                ok = False
            if not ok:
                raise ConfigError(f"tolerance {k!r} must be a positive number, got {v!r}")
    if cfg.measure:
        build_measure(cfg.measure)


def load(path: str) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            return parse(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path!r}: {exc}") from exc
