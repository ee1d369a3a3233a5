"""Run configuration: one YAML document, versioned, every field optional.

Sections mirror the pipeline stages; see ``configs/example.yaml`` in the repo
for the full schema with defaults.
"""
from __future__ import annotations

import copy
from pathlib import Path

import yaml

from .archive import config_hash
from .convlstm import TrainConfig
from .cube import Regime, SeverityWeights

CONFIG_VERSION = 1

DEFAULTS = {
    "version": CONFIG_VERSION,
    "seed": 0,
    "workers": None,
    "synth": {
        "benchmark": True,
        "width": 32,
        "height": 32,
        "cell_size_miles": 5.0,
        "weeks": 209,
        "roadless_fraction": 0.03,
        "regimes": [],
    },
    "ingest": {
        "weeks": 209,
        "width": None,
        "height": None,
        "cell_size_miles": 5.0,
        "severity_weights": None,
    },
    "split": {"test_weeks": 52, "validation_fraction": 0.10},
    "train": {k: v for k, v in TrainConfig().to_dict().items() if k != "seed"},
    "ensemble": {"window": [10, 10], "stride": [5, 5], "fallback": "persistence", "drop_factor": None},
    "baselines": {"lr_lookback": 8, "ridge_tau": 1e-6, "arima_order": [1, 0, 1]},
    "evaluation": {"radius_stop": 50.0, "radius_step": 5.0, "clusters": 3, "cluster_max_iter": 50},
}


class ConfigError(ValueError):
    pass


def _merge(base, override, path=""):
    out = copy.deepcopy(base)
    for key, value in (override or {}).items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and base[key] and not isinstance(value, dict):
            raise ConfigError(f"config key {where!r} must be a mapping")
        if isinstance(base[key], dict) and base[key]:
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = value
    return out


def load_config(path=None, overrides=()):
    """Defaults, then the YAML file, then ``key.path=value`` overrides."""
    data = {}
    if path is not None:
        text = Path(path).read_text()
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    if data.get("version", CONFIG_VERSION) != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {data.get('version')}")
    cfg = _merge(DEFAULTS, data)
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        node = cfg
        parts = key.strip().split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"unknown config key {key!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = yaml.safe_load(raw)
    return cfg


def dump_config(cfg):
    return yaml.safe_dump(cfg, sort_keys=True)


def run_hash(cfg, sections=None):
    """Hash of the whole config, or of the named sections only."""
    if sections is None:
        return config_hash(cfg)
    return config_hash({s: cfg.get(s) for s in sections})


def train_config(cfg, seed=None):
    return TrainConfig(**cfg["train"], seed=cfg["seed"] if seed is None else seed)


def severity_weights(cfg):
    w = cfg["ingest"]["severity_weights"]
    if not w:
        raise ConfigError("ingest.severity_weights is required (e.g. K: 12, A: 12, B: 3, C: 3, O: 1)")
    return SeverityWeights(**{k: float(v) for k, v in w.items()})


def regimes(cfg):
    out = []
    for i, r in enumerate(cfg["synth"]["regimes"]):
        try:
            out.append(Regime(**r))
        except TypeError as exc:
            raise ConfigError(f"synth.regimes[{i}]: {exc}") from exc
    return out
