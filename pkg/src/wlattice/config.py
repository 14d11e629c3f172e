"""Run configuration: JSON schema, defaults and cross-reference checks."""
from __future__ import annotations

from dataclasses import dataclass, field
import json
from pathlib import Path

import jsonschema
import numpy as np

from .errors import ConfigError

_num = {"type": "number"}
_site = {"type": "array", "items": {"type": "integer"}, "minItems": 1}

SCHEMA = {
    "type": "object",
    "required": ["model", "epsilon", "gamma", "R", "N", "excited_sites"],
    "properties": {
        "model": {"enum": ["rotor_saddle", "coupled_standard", "klein_gordon"]},
        "lambda": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "omega": {"type": "array", "items": _num},
        "epsilon": {"type": "number", "minimum": 0},
        "gamma": {"type": "object", "required": ["alpha", "p"],
                  "properties": {"alpha": {"type": "number", "minimum": 0},
                                 "p": {"type": "number", "minimum": 0}}},
        "R": {"type": "integer", "minimum": 0},
        "N": {"type": "integer", "minimum": 1},
        "boundary": {"enum": ["frozen", "periodic"]},
        "excited_sites": {"type": "array", "items": _site},
        "beta": _num,
        "nonlinearity": {"type": "object",
                         "properties": {c: {"type": "array", "items": {"type": "array", "items": _num,
                                                                       "minItems": 3, "maxItems": 3}}
                                        for c in ("x", "y")},
                         "additionalProperties": False},
        "k": _num,
        "nu": {"type": "number", "exclusiveMinimum": 0},
        "kappa": {"type": "number", "exclusiveMinimum": 0},
        "quartic": _num,
        "t0": {"type": "number", "exclusiveMinimum": 0},
        "t_list": {"type": "array", "items": _num},
        "h": {"type": "number", "exclusiveMinimum": 0},
        "N_theta": {"type": "integer", "minimum": 1},
        "L": {"type": "integer", "minimum": 1},
        "L_max": {"type": "integer", "minimum": 1},
        "style": {"enum": ["polynomial_P", "linear_P"]},
        "tail": {"enum": ["taylor_extend", "contraction"]},
        "continuation_steps": {"type": "integer", "minimum": 1},
        "power": {"anyOf": [{"type": "integer", "minimum": 1}, {"const": "auto"}]},
        "unstable": {"type": "boolean"},
        "tolerances": {"type": "object", "additionalProperties": _num},
        "out": {"type": "string"},
        "seed": {"type": "integer"},
    },
    "additionalProperties": False,
}

DEFAULT_TOLERANCES = {"tol_torus": 1e-12, "tol_split": 1e-14, "tol_order": 1e-10, "tol_total": 1e-8}


@dataclass
class RunConfig:
    model: str
    epsilon: float
    gamma: dict
    R: int
    N: int
    excited_sites: list
    lam: float | None = None
    omega: list = field(default_factory=list)
    boundary: str = "frozen"
    beta: float | None = None
    nonlinearity: dict | None = None
    k: float | None = None
    nu: float | None = None
    kappa: float | None = None
    quartic: float = 0.0
    t0: float = 1.0
    t_list: list = field(default_factory=lambda: [0.3, 1.7])
    h: float = 0.01
    N_theta: int = 32
    L: int = 5
    L_max: int | None = None
    style: str = "polynomial_P"
    tail: str = "taylor_extend"
    continuation_steps: int = 1
    power: object = "auto"
    unstable: bool = True
    tolerances: dict = field(default_factory=dict)
    out: str = "wl_out"
    seed: int = 0

    @property
    def L_max_eff(self) -> int:
        return 2 * self.L if self.L_max is None else self.L_max

    def tol(self, name: str) -> float:
        return float(self.tolerances.get(name, DEFAULT_TOLERANCES.get(name, 1e-8)))

    def as_dict(self) -> dict:
        d = dict(self.__dict__)
        d["lambda"] = d.pop("lam")
        return {k: v for k, v in d.items() if v is not None}


def parse_config(doc: dict) -> RunConfig:
    """Validate a config document and return a :class:`RunConfig`."""
    try:
        jsonschema.validate(doc, SCHEMA)
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{path}: {exc.message}") from None
    d = dict(doc)
    d["lam"] = d.pop("lambda", None)
    cfg = RunConfig(**d)
    _cross_check(cfg)
    return cfg


def _cross_check(cfg: RunConfig):
    for s in cfg.excited_sites:
        if len(s) != cfg.N:
            raise ConfigError(f"excited site {s} does not have {cfg.N} coordinates")
        if max(abs(v) for v in s) > cfg.R:
            raise ConfigError(f"excited site {s} lies outside the box of radius {cfg.R}")
    if len({tuple(s) for s in cfg.excited_sites}) != len(cfg.excited_sites):
        raise ConfigError("excited sites must be distinct")
    if cfg.model == "rotor_saddle":
        if cfg.lam is None:
            raise ConfigError("rotor_saddle requires lambda")
        if not cfg.excited_sites:
            raise ConfigError("rotor_saddle requires at least one excited site")
        if len(cfg.omega) > len(cfg.excited_sites):
            raise ConfigError("omega has more entries than excited sites")
    elif cfg.model == "coupled_standard":
        if cfg.k is None:
            raise ConfigError("coupled_standard requires k")
        if cfg.omega:
            raise ConfigError("coupled_standard runs at the fixed point; omega must be empty")
    elif cfg.model == "klein_gordon":
        if cfg.nu is None or cfg.kappa is None:
            raise ConfigError("klein_gordon requires nu and kappa")
        if cfg.omega:
            raise ConfigError("klein_gordon runs at the pinned torus; omega must be empty")
        for t in cfg.t_list:
            n = t / cfg.h
            if abs(n - round(n)) > 1e-9:
                raise ConfigError(f"time {t} is not a whole number of steps h={cfg.h}")
    if cfg.L_max is not None and cfg.L_max < cfg.L:
        raise ConfigError("L_max must be at least L")
    if cfg.omega:
        w = np.asarray(cfg.omega)
        if np.any(np.abs(w - np.round(w)) < 1e-12):
            raise ConfigError("omega has an integer entry; the rotation is resonant")


def load_config(path, overrides: dict | None = None) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    for k, v in (overrides or {}).items():
        if v is not None:
            doc[k] = v
    return parse_config(doc)
