"""Flat ``key = value`` experiment files.

One key per line, ``#`` starts a comment, and the offspring law uses the
only table syntax::

    offspring = { 0: 0.2, 2: 0.8 }
    mode = conditioned-GW
    lambda = 0.8, 1.0, 1.2
    steps = 1000000

``emit`` writes every field in a fixed order so that ``parse(emit(c)) == c``.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, fields, replace

import numpy as np

from .offspring import LawError, OffspringLaw
from .tree import MODE_NAMES


class ConfigError(ValueError):
    pass


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(x) for x in s.split(",") if x.strip())


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("true", "yes", "1"):
        return True
    if v in ("false", "no", "0"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    offspring: tuple[tuple[int, float], ...] = ((0, 0.2), (2, 0.8))
    mode: str = "conditioned-GW"
    lambdas: tuple[float, ...] = (1.0,)
    steps: int = 10**6
    replicas: int = 1
    seed: int = 42
    censor_buffer: int = 50
    bootstrap: int = 2000
    h_fd: float = 0.05
    truncation: int = 16
    truncation_cap: int = 2**14
    escape_tol: float = 1e-3
    trees: int = 100
    girsanov_h: float = 0.1
    functional: str = "one"
    horizon: int = 50
    paths: int = 1000
    alphas: tuple[float, ...] = (1.0, 2.0)
    blocks_per_lambda: int = 10000
    trap_depth: int = 25
    trap_moments: int = 4
    trap_replicas: int = 100000
    workers: int = 1
    max_vertices: int = 10**8
    dump_blocks: bool = False
    output_dir: str = "gwspeed-out"

    @property
    def law(self) -> OffspringLaw:
        return OffspringLaw.from_mapping(dict(self.offspring))

    def with_updates(self, **kw) -> "ExperimentConfig":
        return replace(self, **kw)

    def digest(self) -> str:
        return hashlib.sha256(emit(self).encode()).hexdigest()


# file key -> (field name, parser)
_KEYS = {
    "offspring": ("offspring", None),
    "mode": ("mode", str),
    "lambda": ("lambdas", _floats),
    "steps": ("steps", int),
    "replicas": ("replicas", int),
    "seed": ("seed", int),
    "censor_buffer": ("censor_buffer", int),
    "bootstrap": ("bootstrap", int),
    "h_fd": ("h_fd", float),
    "truncation": ("truncation", int),
    "truncation_cap": ("truncation_cap", int),
    "escape_tol": ("escape_tol", float),
    "trees": ("trees", int),
    "girsanov_h": ("girsanov_h", float),
    "functional": ("functional", str),
    "horizon": ("horizon", int),
    "paths": ("paths", int),
    "alpha": ("alphas", _floats),
    "blocks_per_lambda": ("blocks_per_lambda", int),
    "trap_depth": ("trap_depth", int),
    "trap_moments": ("trap_moments", int),
    "trap_replicas": ("trap_replicas", int),
    "workers": ("workers", int),
    "max_vertices": ("max_vertices", int),
    "dump_blocks": ("dump_blocks", _bool),
    "output_dir": ("output_dir", str),
}
_FIELD_TO_KEY = {f: k for k, (f, _) in _KEYS.items()}

_TABLE = re.compile(r"^\{(.*)\}$")


def parse_offspring(text: str) -> tuple[tuple[int, float], ...]:
    m = _TABLE.match(text.strip())
    if not m:
        raise ConfigError(f"offspring must look like {{ 0: 0.2, 2: 0.8 }}, got {text!r}")
    entries = {}
    for item in filter(None, (s.strip() for s in m.group(1).split(","))):
        k, sep, v = item.partition(":")
        if not sep:
            raise ConfigError(f"offspring entry {item!r} is not 'k: p'")
        try:
            key = int(k.strip())
        except ValueError:
            raise ConfigError(f"offspring key {k.strip()!r} is not an integer") from None
        if key in entries:
            raise ConfigError(f"offspring key {key} repeated")
        try:
            entries[key] = float(v.strip())
        except ValueError:
            raise ConfigError(f"offspring key {key}: {v.strip()!r} is not a number") from None
    return tuple(sorted(entries.items()))


def parse(text: str) -> ExperimentConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        if key not in _KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        name, conv = _KEYS[key]
        if name in values:
            raise ConfigError(f"line {lineno}: key {key!r} given twice")
        try:
            values[name] = parse_offspring(val) if conv is None else conv(val)
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {exc}") from None
    cfg = ExperimentConfig(**values)
    validate(cfg)
    return cfg


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ", ".join(_fmt(x) for x in v)
    return str(v)


def emit(cfg: ExperimentConfig) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        key = _FIELD_TO_KEY[f.name]
        if f.name == "offspring":
            body = ", ".join(f"{k}: {p!r}" for k, p in v)
            lines.append(f"{key} = {{ {body} }}")
        else:
            lines.append(f"{key} = {_fmt(v)}")
    return "\n".join(lines) + "\n"


def validate(cfg: ExperimentConfig) -> None:
    try:
        law = cfg.law
    except LawError as exc:
        raise ConfigError(str(exc)) from None
    if cfg.mode not in MODE_NAMES:
        raise ConfigError(f"mode {cfg.mode!r} not one of {sorted(MODE_NAMES)}")
    if cfg.mode == "d-ary" and not law.is_deterministic:
        raise ConfigError("d-ary mode needs a point-mass offspring table such as { 2: 1.0 }")
    if not cfg.lambdas:
        raise ConfigError("no lambda given")
    lam = np.asarray(cfg.lambdas)
    if np.any(~np.isfinite(lam)) or np.any(lam < 0):
        raise ConfigError("lambda values must be finite and non-negative")
    if lam.size > 1 and not np.all(np.diff(lam) > 0):
        raise ConfigError("lambda grid must be strictly increasing")
    if cfg.steps < 1000:
        raise ConfigError(f"steps must be at least 1000, got {cfg.steps}")
    for name in ("replicas", "bootstrap", "trees", "horizon", "paths", "truncation",
                 "blocks_per_lambda", "trap_replicas", "workers", "trap_moments"):
        if getattr(cfg, name) < 1:
            raise ConfigError(f"{name} must be positive")
    if cfg.censor_buffer < 0 or cfg.trap_depth < 0:
        raise ConfigError("censor_buffer and trap_depth must be non-negative")
    if not 0 <= cfg.seed < 2**64:
        raise ConfigError("seed must fit in 64 bits")
    if cfg.h_fd < 0:
        raise ConfigError("h_fd must be non-negative")
