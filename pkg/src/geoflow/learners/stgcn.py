"""Spatio-temporal graph convolutional network, trained with hand-derived
gradients.

Each sample is the trailing `window` periods of all zones' flows, flattened
into node features. Three graph-convolution layers (normalized-operator
propagation, ReLU) feed a shared linear readout producing one-step-ahead
flows per zone. Training is full-batch gradient descent with momentum on
mean absolute error, with patience-based early stopping on validation MAE.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from ..core import RngSeed
from ..errors import ParameterError, TrainingFailureError
from .graph import TrafficGraph

N_LAYERS = 3


@dataclass(frozen=True, eq=False)
class STGCNPredictor:
    kind = "GNN"
    weights: tuple  # (W0..W2, W_out, b_out)
    window: int
    hidden: int
    seed: int
    loss_trace: tuple
    val_trace: tuple
    best_epoch: int
    hyper: dict = field(default_factory=dict)

    def predict_raw(self, inputs) -> np.ndarray:
        """inputs = (graph, X) with X shaped (samples, zones, window)."""
        graph, X = inputs
        X = np.asarray(X, dtype=float)
        if X.ndim == 2:
            X = X[None, :, :]
        if X.shape[2] != self.window:
            raise ParameterError(
                f"window mismatch: model expects {self.window}, got {X.shape[2]}"
            )
        out, _ = _forward(self.weights, graph.normalized, X)
        return out

    def to_dict(self) -> dict:
        return {
            "weights": [w.tolist() for w in self.weights],
            "window": self.window,
            "hidden": self.hidden,
            "seed": self.seed,
            "loss_trace": list(self.loss_trace),
            "val_trace": list(self.val_trace),
            "best_epoch": self.best_epoch,
            "hyper": dict(self.hyper),
        }

    @classmethod
    def from_dict(cls, state: dict) -> "STGCNPredictor":
        return cls(
            weights=tuple(np.asarray(w, dtype=float) for w in state["weights"]),
            window=int(state["window"]),
            hidden=int(state["hidden"]),
            seed=int(state["seed"]),
            loss_trace=tuple(state["loss_trace"]),
            val_trace=tuple(state["val_trace"]),
            best_epoch=int(state["best_epoch"]),
            hyper=dict(state["hyper"]),
        )


def build_windows(flows: np.ndarray, window: int, targets) -> tuple[np.ndarray, np.ndarray]:
    """Trailing-window samples for the given target periods.

    flows is (N, T); every target t must satisfy t >= window. Returns
    X (S, N, window) and y (S, N).
    """
    flows = np.asarray(flows, dtype=float)
    targets = np.asarray(targets, dtype=int)
    if targets.size and targets.min() < window:
        raise ParameterError(f"target {targets.min()} has fewer than {window} periods of history")
    X = np.stack([flows[:, t - window : t] for t in targets]) if targets.size else np.empty((0, flows.shape[0], window))
    y = flows[:, targets].T if targets.size else np.empty((0, flows.shape[0]))
    return X, y


def _propagate(op, H: np.ndarray) -> np.ndarray:
    """Apply the (sparse or dense) normalized operator per sample: op @ H."""
    S, N, F = H.shape
    flat = H.transpose(1, 0, 2).reshape(N, S * F)
    out = op @ flat
    return np.asarray(out).reshape(N, S, F).transpose(1, 0, 2)


def _forward(weights, op, X: np.ndarray):
    W_layers, W_out, b_out = weights[:N_LAYERS], weights[N_LAYERS], weights[N_LAYERS + 1]
    cache = []
    H = X
    for W in W_layers:
        SH = _propagate(op, H)
        Z = SH @ W
        H_next = np.maximum(Z, 0.0)
        cache.append((SH, Z))
        H = H_next
    out = H @ W_out + b_out  # (S, N, 1)
    cache.append(H)
    return out[:, :, 0], cache


def _backward(weights, op, X, cache, d_out):
    """Gradient of the scalar loss w.r.t. every weight; d_out is dL/d(out)."""
    W_layers, W_out, _ = weights[:N_LAYERS], weights[N_LAYERS], weights[N_LAYERS + 1]
    H_last = cache[N_LAYERS]
    S, N, _ = X.shape
    d_out3 = d_out[:, :, None]  # (S, N, 1)
    flatH = H_last.reshape(S * N, -1)
    g_Wout = flatH.T @ d_out3.reshape(S * N, 1)
    g_bout = np.array([float(d_out3.sum())])
    dH = d_out3 @ W_out.T
    grads = [None] * N_LAYERS
    for layer in range(N_LAYERS - 1, -1, -1):
        SH, Z = cache[layer]
        dZ = dH * (Z > 0.0)
        g_W = SH.reshape(S * N, -1).T @ dZ.reshape(S * N, -1)
        grads[layer] = g_W
        if layer > 0:
            # operator is symmetric, so op^T propagation equals op propagation
            dH = _propagate(op, dZ @ W_layers[layer].T)
    return grads + [g_Wout, g_bout]


def mae_loss_and_grad(pred: np.ndarray, target: np.ndarray):
    resid = pred - target
    loss = float(np.abs(resid).mean())
    grad = np.sign(resid) / resid.size
    return loss, grad


def _glorot(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def fit_stgcn(
    flows: np.ndarray,
    graph: TrafficGraph,
    train_targets,
    val_targets,
    window: int = 12,
    hidden: int = 32,
    epochs: int = 300,
    lr: float = 0.01,
    momentum: float = 0.9,
    patience: int = 20,
    seed: int = 0,
) -> STGCNPredictor:
    """Train on one-step-ahead targets; returns the best-validation weights."""
    flows = np.asarray(flows, dtype=float)
    if graph.n != flows.shape[0]:
        raise ParameterError("graph and flows must cover the same zones")
    X_train, y_train = build_windows(flows, window, train_targets)
    if X_train.shape[0] == 0:
        raise ParameterError("no training samples: training range shorter than the window")
    X_val, y_val = build_windows(flows, window, val_targets)

    rng = RngSeed(seed).derive("stgcn-init")
    dims = [window] + [hidden] * N_LAYERS
    weights = [
        _glorot(rng, dims[i], dims[i + 1]) for i in range(N_LAYERS)
    ] + [_glorot(rng, hidden, 1), np.zeros(1)]
    velocity = [np.zeros_like(w) for w in weights]
    op = graph.normalized

    loss_trace: list[float] = []
    val_trace: list[float] = []
    best_val = np.inf
    best_weights = [w.copy() for w in weights]
    best_epoch = -1
    since_best = 0
    for epoch in range(epochs):
        pred, cache = _forward(weights, op, X_train)
        loss, d_out = mae_loss_and_grad(pred, y_train)
        if not np.isfinite(loss):
            raise TrainingFailureError(
                f"training loss diverged at epoch {epoch}",
                last_stable_epoch=epoch - 1,
            )
        loss_trace.append(loss)
        grads = _backward(weights, op, X_train, cache, d_out)
        for i, g in enumerate(grads):
            velocity[i] = momentum * velocity[i] - lr * g
            weights[i] = weights[i] + velocity[i]

        if X_val.shape[0]:
            val_pred, _ = _forward(weights, op, X_val)
            val_mae = float(np.abs(val_pred - y_val).mean())
        else:
            val_mae = loss
        val_trace.append(val_mae)
        if val_mae < best_val - 1e-12:
            best_val = val_mae
            best_weights = [w.copy() for w in weights]
            best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if since_best >= patience:
                break

    return STGCNPredictor(
        weights=tuple(best_weights),
        window=window,
        hidden=hidden,
        seed=seed,
        loss_trace=tuple(loss_trace),
        val_trace=tuple(val_trace),
        best_epoch=best_epoch,
        hyper={
            "epochs": epochs,
            "lr": lr,
            "momentum": momentum,
            "patience": patience,
        },
    )
