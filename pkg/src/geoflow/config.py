"""Run configuration: defaults, YAML overrides, validation, hashing."""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import yaml

from .errors import ConfigError

STAGES = ("gen", "features", "mgwr", "train", "evaluate", "insights", "transfer")

MGWR_COVARIATES = (
    "LUM", "PopDens", "EmpAcc", "TransitAcc", "RoadDens", "DistCBD", "CarOwn",
)

DEFAULTS = {
    "seed": 42,
    "generator": {
        "weeks": 12,
        "knn_k": 6,
        "morphology_shift": 1.0,
        "spatial_noise_range": 3,
        "noise_sd": {"static": 0.09, "dynamic": 0.05, "iid": 0.07},
    },
    "features": {
        "include_lag": True,
        "transit_beta": 0.1,
    },
    "mgwr": {
        "covariates": list(MGWR_COVARIATES),
        "kernel": "bisquare",
        "adaptive": True,
        "tol": 1e-4,
        "max_iter": 60,
        "alpha": 0.05,
        "panel_tol": 1e-4,
        "panel_max_iter": 40,
    },
    "learners": {
        "rf": {
            "n_trees": 120,
            "max_depth": 12,
            "min_leaf": 5,
            "features_per_split": None,
            "bootstrap": True,
        },
        "rf_cv_select": False,
        "augment_intercept": True,
        "gnn": {
            "window": 12,
            "hidden": 32,
            "epochs": 220,
            "lr": 0.01,
            "momentum": 0.9,
            "patience": 20,
        },
        "graph": {"radius": 0.06, "speed": 0.05},
    },
    "ensemble": {"grid_step": 0.01},
    "diagnostics": {"permutations": 999, "alpha": 0.05},
    "insights": {
        "min_pts": 12,
        "eps_grid_size": 30,
        "shap_instances": 120,
        "shap_samples": 30,
        "max_exact_features": 12,
    },
    "transfer": {
        "fine_tune": False,
        "fine_tune_epochs": 40,
    },
    "split": {"train": 0.85, "validation": 0.077, "test": 0.077},
}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key: {where}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where} must be a mapping")
            out[key] = _merge(base[key], value, where)
        else:
            out[key] = value
    return out


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Resolved run configuration: defaults <- file <- explicit overrides."""
    resolved = copy.deepcopy(DEFAULTS)
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        with open(path) as fh:
            raw = yaml.safe_load(fh) or {}
        if not isinstance(raw, dict):
            raise ConfigError(f"config file {path} must hold a mapping")
        resolved = _merge(resolved, raw)
    if overrides:
        resolved = _merge(resolved, overrides)
    return resolved


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]
