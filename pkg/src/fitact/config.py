"""Versioned TOML experiment configs.

A config is a TOML document with ``schema_version = 1`` and any of the
sections below. Missing keys take the defaults in :data:`DEFAULTS`; unknown
sections or keys are rejected so typos fail loudly.

    schema_version = 1

    [data]
    kind = "digits"          # "blobs" | "digits" | "directory"
    path = ""                # image directory for kind = "directory"

    [model]
    arch = "cnn"             # "mlp" | "cnn"

    [campaign]
    schemes = ["unprotected", "gbrelu_squash", "fitact"]
    expected_flips = [1, 10, 100]

Command-line overrides use dotted keys with TOML values, e.g.
``--set train.epochs=5 --set campaign.schemes='["fitact"]'``.
"""
from __future__ import annotations

import copy
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


DEFAULTS: dict = {
    "data": {
        "kind": "blobs",
        "path": "",
        "seed": 0,
        "n_train": 2000,
        "n_val": 500,
        "n_test": 1000,
        "eval_split": "test",
    },
    "model": {
        "arch": "mlp",
        "sizes": [2, 512, 512, 4],
        "channels": [32, 64],
        "pools": [2, 6],
        "kernel": 3,
        "seed": 0,
    },
    "train": {
        "epochs": 20,
        "learning_rate": 1e-3,
        "batch_size": 64,
        "seed": 0,
    },
    "modify": {
        "slope": 10.0,
        "granularity": "element",
        "global_mode": "",  # "" = per-neuron fitrelu; else a gbrelu mode
    },
    "post_train": {
        "zeta": 1e-3,
        "epochs": 20,
        "learning_rate": 1e-3,
        "delta": 0.01,
        "batch_size": 64,
        "seed": 0,
        "evals_per_epoch": 1,
    },
    "campaign": {
        "schemes": ["unprotected"],
        "models": {},
        "fault_rates": [],
        "expected_flips": [],
        "rate_reference": "unprotected",
        "trials_per_rate": 100,
        "seed": 0,
        "scope_layers": [],
        "include_bounds": True,
        "workers": 1,
    },
    "sweep": {
        "layer": 2,
        "bounds": [1e-6, 0.5, 1.0, 2.0, 4.0, 8.0, 1e4],
        "fault_rate": 0.0,
        "expected_flips": 0.0,
        "trials": 50,
        "seed": 0,
        "mode": "squash_to_zero",
        "scope_layers": [],
    },
    "histogram": {
        "layer": 2,
        "bins": 20,
    },
    "overhead": {
        "models": {},
        "reps": 30,
        "warmup": 5,
        "batch": 1000,
    },
}

# Workload presets used by the shipped configs and the acceptance suite.
PRESETS = {
    "blobs": {
        "data": {"kind": "blobs"},
        "model": {"arch": "mlp", "sizes": [2, 512, 512, 4]},
        "train": {"epochs": 20, "learning_rate": 1e-3},
        "post_train": {"zeta": 1.0, "epochs": 10, "learning_rate": 1e-2, "evals_per_epoch": 4},
    },
    "digits": {
        "data": {"kind": "digits"},
        "model": {"arch": "cnn", "channels": [32, 64], "pools": [2, 6]},
        "train": {"epochs": 15, "learning_rate": 3e-3},
        "post_train": {"zeta": 1.0, "epochs": 15, "learning_rate": 1e-2, "evals_per_epoch": 4},
    },
}


def merge(base: dict, extra: dict, where: str = "") -> dict:
    """Recursive merge of ``extra`` into a copy of ``base``; keys must already exist.

    Free-form tables (``campaign.models``, ``overhead.models``) accept any key.
    """
    out = copy.deepcopy(base)
    for key, val in extra.items():
        path = f"{where}.{key}" if where else key
        if key not in out:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(out[key], dict) and out[key] == {} and isinstance(val, dict):
            out[key] = dict(val)
        elif isinstance(out[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"{path!r} must be a table")
            out[key] = merge(out[key], val, path)
        else:
            out[key] = _coerce(out[key], val, path)
    return out


def _coerce(default, val, path):
    if isinstance(default, bool):
        if not isinstance(val, bool):
            raise ConfigError(f"{path!r} must be true or false, got {val!r}")
        return val
    if isinstance(default, float) and isinstance(val, int) and not isinstance(val, bool):
        return float(val)
    if isinstance(default, (int, float)) and isinstance(val, (int, float)) and not isinstance(val, bool):
        return val
    if type(default) is not type(val):
        raise ConfigError(f"{path!r} expects {type(default).__name__}, got {val!r}")
    return val


def parse_override(text: str) -> dict:
    """``'a.b=3'`` -> ``{'a': {'b': 3}}``; the value is read as TOML, else as a string."""
    key, sep, raw = text.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"override {text!r} is not of the form section.key=value")
    try:
        value = tomllib.loads(f"v = {raw.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()
    out: dict = {}
    node = out
    parts = key.strip().split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value
    return out


def load_config(path=None, overrides=(), preset: str | None = None) -> dict:
    """Defaults, then an optional preset, then the file, then ``--set`` overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    doc: dict = {}
    if path is not None:
        try:
            doc = tomllib.loads(Path(path).read_text())
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"{path}: malformed config: {e}") from None
        except OSError as e:
            raise ConfigError(f"{path}: {e.strerror or e}") from None
        version = doc.pop("schema_version", None)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"{path}: schema_version must be {SCHEMA_VERSION}, got {version!r}")
        preset = doc.pop("preset", preset)
    if preset:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        cfg = merge(cfg, PRESETS[preset])
    cfg = merge(cfg, doc)
    for text in overrides:
        cfg = merge(cfg, parse_override(text))
    return cfg
