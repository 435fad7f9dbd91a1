"""Convex combination of the forest and graph-network predictions, with the
mixing weight chosen by line search on validation RMSE."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import AlignmentError, ParameterError


@dataclass(frozen=True, eq=False)
class HybridModel:
    alpha: float
    rf: object = None
    gnn: object = None
    trace: tuple = ()  # (alpha, rmse) over the search grid
    closed_form_alpha: float = float("nan")
    per_mode_alpha: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0):
            raise ParameterError(f"alpha {self.alpha} outside [0, 1]")


def _rmse(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.sqrt(np.mean((a - b) ** 2)))


def closed_form_alpha(rf_preds, gnn_preds, y) -> float:
    """Unconstrained quadratic minimizer of RMSE(alpha), clipped to [0, 1].

    The shared irreducible error cancels: the optimum depends only on the
    two error vectors e_rf and e_gnn.
    """
    e_rf = np.asarray(rf_preds, dtype=float) - np.asarray(y, dtype=float)
    e_gnn = np.asarray(gnn_preds, dtype=float) - np.asarray(y, dtype=float)
    diff = e_rf - e_gnn
    denom = float(diff @ diff)
    if denom == 0.0:
        return 0.5
    alpha = float(-(e_gnn @ diff) / denom)
    return min(max(alpha, 0.0), 1.0)


def search_alpha(rf_val_preds, gnn_val_preds, y_val, grid_step: float = 0.01) -> HybridModel:
    """Grid line search over alpha in {0, step, ..., 1}; argmin validation
    RMSE with ties broken toward 0.5. The closed-form quadratic optimum is
    stored as a cross-check."""
    rf = np.asarray(rf_val_preds, dtype=float).ravel()
    gnn = np.asarray(gnn_val_preds, dtype=float).ravel()
    y = np.asarray(y_val, dtype=float).ravel()
    if not (rf.shape == gnn.shape == y.shape):
        raise AlignmentError("prediction and target vectors must align")
    if not (0.0 < grid_step <= 0.5):
        raise ParameterError("grid_step must be in (0, 0.5]")
    n_steps = int(round(1.0 / grid_step))
    grid = np.linspace(0.0, 1.0, n_steps + 1)
    trace = []
    for a in grid:
        trace.append((float(a), _rmse(a * rf + (1.0 - a) * gnn, y)))
    best_rmse = min(r for _, r in trace)
    # among ties (within fp noise), prefer the alpha closest to 0.5
    candidates = [a for a, r in trace if r <= best_rmse + 1e-12]
    alpha = min(candidates, key=lambda a: (abs(a - 0.5), a))
    return HybridModel(
        alpha=float(alpha),
        trace=tuple(trace),
        closed_form_alpha=closed_form_alpha(rf, gnn, y),
    )


def predict_hybrid(model: HybridModel, rf_preds, gnn_preds) -> np.ndarray:
    """alpha * RF + (1 - alpha) * GNN, clipped to the normalized range."""
    rf = np.asarray(rf_preds, dtype=float)
    gnn = np.asarray(gnn_preds, dtype=float)
    if rf.shape != gnn.shape:
        raise AlignmentError("component predictions must align")
    return np.clip(model.alpha * rf + (1.0 - model.alpha) * gnn, 0.0, 1.0)
