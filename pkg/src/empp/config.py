"""Flat ``key = value`` run configuration.

Lines starting with ``#`` and blank lines are ignored. Every key has a typed
default; unknown keys and unparsable values raise :class:`ConfigError`.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

from .sphere import GRID_KINDS


class ConfigError(ValueError):
    pass


# key -> (default, description)
DEFAULTS: dict[str, tuple[object, str]] = {
    "grid.n_theta": (100, "polar nodes of the direction grid"),
    "grid.n_phi": (100, "azimuthal nodes of the direction grid"),
    "grid.kind": ("gauss_legendre_theta", "gauss_legendre_theta or equiangular"),
    "head.tau": (0.1, "softmax temperature for radius and direction"),
    "head.lmax": (2, "highest degree used by the prediction head"),
    "label.sigma": (0.5, "radius label width (angstrom)"),
    "label.lmax": (2, "degrees in the direction-label exponent"),
    "radius.bins": (128, "number of radius bins"),
    "radius.min": (0.9, "lower edge of the radius range (angstrom)"),
    "radius.max": (5.0, "upper edge of the radius range (angstrom)"),
    "cutoff": (5.0, "graph and neighbour cutoff (angstrom)"),
    "mask.n": (1, "masked copies per molecule"),
    "loss.weight": (1.0, "weight of the masking loss in auxiliary mode"),
    "backbone.layers": (3, "message-passing layers"),
    "backbone.hidden": ("64x0+32x1+16x2+8x3", "node feature layout"),
    "property.encoding": ("none", "none, energy or force: label injected in auxiliary mode"),
    "train.lr": (5e-4, "initial learning rate"),
    "train.momentum": (0.9, "SGD momentum"),
    "train.optimizer": ("sgd", "sgd or adam"),
    "train.epochs": (10, "passes over the training split"),
    "train.batch": (16, "molecules per optimisation step"),
    "train.clip": (10.0, "global gradient-norm clip, 0 disables"),
    "seed": (0, "seed for initialisation, masking and shuffling"),
}


class Config(dict):
    """Effective configuration: defaults overlaid with explicit settings."""

    def __init__(self, values: dict | None = None):
        super().__init__({k: v for k, (v, _) in DEFAULTS.items()})
        for k, v in (values or {}).items():
            self[k] = v
        self.validate()

    def __setitem__(self, key, value):
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        super().__setitem__(key, _coerce(key, value))

    def validate(self) -> None:
        if self["grid.kind"] not in GRID_KINDS:
            raise ConfigError(f"grid.kind must be one of {GRID_KINDS}")
        if self["property.encoding"] not in ("none", "energy", "force"):
            raise ConfigError("property.encoding must be none, energy or force")
        if self["train.optimizer"] not in ("sgd", "adam"):
            raise ConfigError("train.optimizer must be sgd or adam")
        positive = ["head.tau", "label.sigma", "cutoff", "radius.bins", "mask.n", "train.batch", "grid.n_theta", "grid.n_phi"]
        for k in positive:
            if not self[k] > 0:
                raise ConfigError(f"{k} must be positive")
        for k in ("train.epochs", "train.lr", "loss.weight", "backbone.layers", "train.clip"):
            if self[k] < 0:
                raise ConfigError(f"{k} must be non-negative")
        if not self["radius.min"] < self["radius.max"]:
            raise ConfigError("radius.min must be below radius.max")

    def to_text(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.items())

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]


def _coerce(key: str, value):
    default = DEFAULTS[key][0]
    try:
        if isinstance(default, int):
            if isinstance(value, str):
                f = float(value)
                if not f.is_integer():
                    raise ValueError
                return int(f)
            if float(value) != int(value):
                raise ValueError
            return int(value)
        if isinstance(default, float):
            return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot interpret {value!r} as {type(default).__name__}") from None
    return str(value).strip()


def _format(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def parse_config(text: str) -> Config:
    values = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        if k in values:
            raise ConfigError(f"line {n}: duplicate key {k!r}")
        if k not in DEFAULTS:
            raise ConfigError(f"line {n}: unknown config key {k!r}")
        values[k] = v
    return Config(values)


def load_config(path=None) -> Config:
    if path is None:
        return Config()
    return parse_config(Path(path).read_text())


def describe_defaults() -> str:
    return "\n".join(f"{k} = {_format(v)}  # {d}" for k, (v, d) in DEFAULTS.items())
