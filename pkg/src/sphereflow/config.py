"""INI-style run configs and vMF target files.

Config keys are unique across sections, so a flat override dictionary
(from ``SPHEREFLOW_<KEY>`` environment variables or CLI flags) maps onto
them unambiguously. Precedence: file < environment < flags.

Example config::

    [model]
    n = 2
    hidden = 10, 10

    [train]
    lr = 1e-3
    batch_size = 256
    epochs = 3000
    grad_mode = discretize
    seed = 0
    checkpoint_every = 500

    [integrator]
    steps = 100

    [eval]
    eval_samples = 20000

    [data]
    target = s2_vmf4.ini

    [run]
    threads = 1
    deterministic = true

Example target file::

    [target]
    dim = 3
    weights = 0.25, 0.25, 0.25, 0.25
    kappas = 10, 10, 10, 10
    means = 1 1 1; 1 -1 -1; -1 1 -1; -1 -1 1

Means are normalized on load; weights must sum to one within 1e-6.
"""
import configparser
from dataclasses import fields
import os
from pathlib import Path

import numpy as np

from .density import VmfMixture
from .errors import ConfigError
from .trainer import TrainConfig

ENV_PREFIX = "SPHEREFLOW_"
_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _parse_bool(text):
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _coerce(key, value):
    kind = _FIELD_TYPES[key]
    try:
        if kind is bool:
            return value if isinstance(value, bool) else _parse_bool(value)
        if kind is int:
            return int(value)
        if kind is float:
            return float(value)
        if kind is tuple:
            if isinstance(value, str):
                return tuple(int(v) for v in value.replace(",", " ").split())
            return tuple(int(v) for v in value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"bad value for {key}: {value!r}") from None


def read_config_file(path):
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    values = {}
    for section in parser.sections():
        for key, raw in parser.items(section):
            if key not in _FIELD_TYPES:
                raise ConfigError(f"{path}: unknown key {key!r} in section [{section}]")
            if key in values:
                raise ConfigError(f"{path}: key {key!r} appears in more than one section")
            values[key] = raw
    if values.get("target"):
        target = Path(values["target"])
        if not target.is_absolute():
            values["target"] = str(path.parent / target)
    return values


def env_overrides(environ=None):
    environ = os.environ if environ is None else environ
    out = {}
    for key in _FIELD_TYPES:
        raw = environ.get(ENV_PREFIX + key.upper())
        if raw is not None:
            out[key] = raw
    return out


def build_config(path=None, overrides=None, environ=None):
    values = read_config_file(path) if path is not None else {}
    values.update(env_overrides(environ))
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        return TrainConfig(**{k: _coerce(k, v) for k, v in values.items()})
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def _format_value(v):
    if isinstance(v, list):
        return ", ".join(str(h) for h in v)
    if isinstance(v, bool):
        return str(v).lower()
    return str(v)


def write_config(path, cfg):
    parser = configparser.ConfigParser()
    sections = {
        "model": ("n", "hidden"),
        "train": ("lr", "batch_size", "epochs", "grad_mode", "seed", "checkpoint_every"),
        "integrator": ("steps",),
        "eval": ("eval_samples",),
        "data": ("target",),
        "run": ("threads", "deterministic"),
    }
    d = cfg.to_dict()
    for section, keys in sections.items():
        parser[section] = {}
        for k in keys:
            parser[section][k] = _format_value(d[k])
    with open(path, "w") as fh:
        parser.write(fh)


def load_target(path):
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"target file not found: {path}")
    parser = configparser.ConfigParser()
    try:
        parser.read(path)
        sec = parser["target"]
        dim = int(sec["dim"])
        weights = [float(v) for v in sec["weights"].replace(",", " ").split()]
        kappas = [float(v) for v in sec["kappas"].replace(",", " ").split()]
        means = [[float(v) for v in row.replace(",", " ").split()] for row in sec["means"].split(";")]
    except (KeyError, ValueError, configparser.Error) as exc:
        raise ConfigError(f"malformed target file {path}: {exc}") from None
    means = np.asarray(means, dtype=float)
    if means.ndim != 2 or means.shape[1] != dim:
        raise ConfigError(f"{path}: means must have {dim} coordinates each")
    means = means / np.linalg.norm(means, axis=1, keepdims=True)
    weights = np.asarray(weights)
    if abs(weights.sum() - 1.0) > 1e-6:
        raise ConfigError(f"{path}: weights sum to {weights.sum()}, expected 1")
    return VmfMixture(weights / weights.sum(), means, kappas)


def write_target(path, mix):
    parser = configparser.ConfigParser()
    parser["target"] = {
        "dim": str(mix.dim),
        "weights": ", ".join(repr(float(w)) for w in mix.weights),
        "kappas": ", ".join(repr(float(k)) for k in mix.kappas),
        "means": "; ".join(" ".join(repr(float(c)) for c in m) for m in mix.means),
    }
    with open(path, "w") as fh:
        parser.write(fh)


def bundled(name):
    """Path of a config or target file shipped with the package."""
    return Path(__file__).parent / "configs" / name
