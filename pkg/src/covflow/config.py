"""Run configuration: JSON file + command-line overrides.

Precedence (lowest to highest): built-in defaults, per-study defaults,
config file, command-line flags. The resolved configuration is written to
``manifest.json`` and parses back to the same :class:`RunConfig`.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping, Optional

from .errors import ConfigError, DomainError
from .nets import ARCHS, ENGINES
from .scaling import sequence_from_dict

STUDIES = ("theory", "simulate", "grid", "depth-rate", "width-rate", "joint")
DEFAULT_SEED = 42
OUTPUT_ENV = "COVFLOW_OUT"
DEFAULT_OUTPUT = "covflow_out"

_STUDY_DEFAULTS = {
    "theory": {"L_list": [64], "c_list": [-1.0, -0.5, 0.0, 0.5, 1.0]},
    "simulate": {"n_list": [256], "L_list": [64], "trials": 100},
    "grid": {"n_list": [8, 256, 4096], "L_list": [2, 8, 64], "trials": 100},
    "depth-rate": {"L_list": [2**k for k in range(3, 14)]},
    "width-rate": {"n_list": [2**k for k in range(5, 13)], "L_list": [64], "trials": 100},
    "joint": {"n_list": [64, 256, 1024], "trials": 200},
}


@dataclass
class RunConfig:
    study: str
    arch: str = "scaled_resnet"
    scaling: dict = field(default_factory=lambda: {"kind": "uniform", "gamma": 0.5})
    beta: float = 0.5
    engine: str = "projected"
    archs: list = field(default_factory=lambda: ["scaled_resnet", "shaped_mlp", "shaped_resnet"])
    n_list: list = field(default_factory=lambda: [256])
    L_list: list = field(default_factory=lambda: [64])
    d: int = 30
    inputs: dict = field(default_factory=lambda: {"kind": "random_unit"})
    c_list: list = field(default_factory=lambda: [-1.0, -0.5, 0.0, 0.5, 1.0])
    trials: int = 100
    master_seed: int = DEFAULT_SEED
    step: float = 1e-5
    tol: float = 1e-8
    drop_fraction: float = 0.2
    auxiliary: bool = False
    output_dir: str = DEFAULT_OUTPUT
    workers: int = 1

    def to_dict(self) -> dict:
        return asdict(self)


_FIELDS = {f.name for f in fields(RunConfig)}


def _require(cond, key, msg):
    if not cond:
        raise ConfigError(key, msg)


def _is_int(x):
    return isinstance(x, int) and not isinstance(x, bool)


def _is_real(x):
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def _validate(cfg: RunConfig) -> None:
    _require(cfg.study in STUDIES, "study", f"unknown study {cfg.study!r}; expected one of {', '.join(STUDIES)}")
    _require(cfg.arch in ARCHS, "arch", f"unknown architecture {cfg.arch!r}")
    _require(cfg.engine in ENGINES, "engine", f"unknown engine {cfg.engine!r}")
    _require(isinstance(cfg.archs, list) and cfg.archs, "archs", "must be a non-empty list")
    for a in cfg.archs:
        _require(a in ARCHS, "archs", f"unknown architecture {a!r}")
    try:
        sequence_from_dict(cfg.scaling)
    except DomainError as exc:
        key, sep, msg = str(exc).partition(": ")
        raise ConfigError(key if sep else "scaling", msg if sep else str(exc)) from None
    for key in ("n_list", "L_list"):
        vals = getattr(cfg, key)
        _require(isinstance(vals, list) and vals, key, "must be a non-empty list")
        _require(all(_is_int(v) and v >= 1 for v in vals), key, "entries must be positive integers")
    _require(isinstance(cfg.c_list, list) and cfg.c_list, "c_list", "must be a non-empty list")
    _require(all(_is_real(c) and -1 <= c <= 1 for c in cfg.c_list), "c_list", "entries must lie in [-1, 1]")
    _require(_is_int(cfg.d) and cfg.d >= 1, "d", "must be a positive integer")
    _require(_is_int(cfg.trials) and cfg.trials >= 2, "trials", "must be an integer >= 2")
    _require(_is_int(cfg.master_seed) and 0 <= cfg.master_seed < 2**64, "master_seed", "must be an unsigned 64-bit integer")
    _require(_is_real(cfg.step) and cfg.step > 0, "step", "must be positive")
    _require(_is_real(cfg.tol) and cfg.tol > 0, "tol", "must be positive")
    _require(_is_real(cfg.beta) and 0 < cfg.beta < 1, "beta", "must lie in (0, 1)")
    _require(_is_real(cfg.drop_fraction) and 0 <= cfg.drop_fraction < 1, "drop_fraction", "must lie in [0, 1)")
    _require(isinstance(cfg.auxiliary, bool), "auxiliary", "must be a boolean")
    _require(_is_int(cfg.workers) and cfg.workers >= 1, "workers", "must be a positive integer")
    _require(isinstance(cfg.output_dir, str) and cfg.output_dir, "output_dir", "must be a non-empty string")
    _validate_inputs(cfg.inputs)


def _validate_inputs(inputs) -> None:
    _require(isinstance(inputs, Mapping), "inputs", "must be a mapping")
    kind = inputs.get("kind")
    allowed = {
        "random_unit": {"kind", "seed"},
        "correlation": {"kind", "c0", "q_aa", "q_bb"},
        "vectors": {"kind", "a", "b"},
    }
    _require(kind in allowed, "inputs.kind", f"unknown input kind {kind!r}")
    extra = set(inputs) - allowed[kind]
    _require(not extra, f"inputs.{sorted(extra)[0]}" if extra else "inputs", "unexpected key")
    if kind == "random_unit" and "seed" in inputs:
        _require(_is_int(inputs["seed"]) and inputs["seed"] >= 0, "inputs.seed", "must be a non-negative integer")
    if kind == "correlation":
        c0 = inputs.get("c0")
        _require(_is_real(c0) and -1 <= c0 <= 1 and c0 != 0, "inputs.c0", "must lie in [-1, 1] and be nonzero")
        for k in ("q_aa", "q_bb"):
            if k in inputs:
                _require(_is_real(inputs[k]) and inputs[k] > 0, f"inputs.{k}", "must be positive")
    if kind == "vectors":
        for k in ("a", "b"):
            v = inputs.get(k)
            _require(isinstance(v, list) and v and all(_is_real(x) for x in v), f"inputs.{k}", "must be a list of numbers")
        _require(len(inputs["a"]) == len(inputs["b"]), "inputs.b", "must match the length of inputs.a")


def load_file(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"malformed JSON in {path}: {exc.msg} (line {exc.lineno})") from None
    if not isinstance(data, dict):
        raise ConfigError("config", "top level must be an object")
    # a manifest carries the resolved config under "config"
    if isinstance(data.get("config"), dict):
        data = data["config"]
    return data


def parse_config(path: Optional[str] = None, overrides: Optional[Mapping[str, Any]] = None,
                 data: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """Resolve a :class:`RunConfig` from a file and/or mapping plus overrides."""
    merged: dict = {}
    if path is not None:
        merged.update(load_file(path))
    if data is not None:
        merged.update(data)
    for k, v in (overrides or {}).items():
        if v is not None:
            if k in merged and k == "study" and merged[k] != v:
                raise ConfigError("study", f"flag study {v!r} conflicts with config study {merged[k]!r}")
            merged[k] = v
    unknown = sorted(set(merged) - _FIELDS)
    if unknown:
        raise ConfigError(unknown[0], "unknown configuration key")
    if "study" not in merged:
        raise ConfigError("study", "missing")
    study = merged["study"]
    base = dict(_STUDY_DEFAULTS.get(study, {}))
    if "output_dir" not in merged:
        base["output_dir"] = os.environ.get(OUTPUT_ENV, DEFAULT_OUTPUT)
    base.update(merged)
    cfg = RunConfig(**base)
    _validate(cfg)
    return cfg
