"""Learned predictors behind one train/predict/serialize interface."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..errors import ParameterError
from .cv import spatial_cv_folds
from .forest import ForestSpec, RandomForestPredictor, fit_rf
from .graph import TrafficGraph, build_traffic_graph
from .ols import OLSPredictor, fit_ols
from .stgcn import STGCNPredictor, fit_stgcn

__all__ = [
    "ForestSpec",
    "OLSPredictor",
    "RandomForestPredictor",
    "STGCNPredictor",
    "TrafficGraph",
    "build_traffic_graph",
    "fit_ols",
    "fit_rf",
    "fit_stgcn",
    "predict",
    "save_predictor",
    "load_predictor",
    "spatial_cv_folds",
]

_KINDS = {
    "OLS": OLSPredictor,
    "RF": RandomForestPredictor,
    "GNN": STGCNPredictor,
}


def predict(predictor, inputs) -> np.ndarray:
    """Predictions clipped to the normalized flow range [0, 1]."""
    raw = predictor.predict_raw(inputs)
    return np.clip(raw, 0.0, 1.0)


def save_predictor(predictor, path) -> None:
    payload = {
        "format": "geoflow-predictor",
        "version": 1,
        "kind": predictor.kind,
        "state": predictor.to_dict(),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_predictor(path):
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("format") != "geoflow-predictor":
        raise ParameterError(f"{path} is not a predictor file")
    kind = payload["kind"]
    if kind not in _KINDS:
        raise ParameterError(f"unknown predictor kind {kind!r}")
    return _KINDS[kind].from_dict(payload["state"])
