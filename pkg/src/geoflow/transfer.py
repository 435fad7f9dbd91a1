"""Cross-city transfer experiments and seasonal stability profiles.

Every transfer cell trains the forest+network hybrid on the source city's
train/validation ranges and evaluates one-step-ahead R-squared on the target
city's test range. Target evaluation works on a test-range-only sub-panel
built before any model code runs, so target training data is unreachable by
construction. The mixing weight is recalibrated on the source validation
range; the forest uses the raw feature set (coefficient-surface features
would require fitting local regressions on target training flows).
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .core import MODES, PERIODS_PER_DAY, RngSeed, SplitSpec, ZonePanel, build_knn_weights, slice_panel, split_panel
from .datagen import GeneratorConfig, NORDIC, TURKISH
from .ensemble import predict_hybrid, search_alpha
from .errors import InsufficientCityError, InsufficientSpanError, ParameterError
from .features import assemble_features
from .learners import ForestSpec, build_traffic_graph, fit_rf, fit_stgcn, predict
from .learners.stgcn import build_windows


@dataclass(frozen=True, eq=False)
class TransferMatrix:
    cities: tuple[str, ...]
    morphology: dict
    r2_by_mode: dict  # mode -> (n_cities, n_cities) array
    r2_mean: np.ndarray
    within_mean: float
    cross_mean: float
    diagonal_mean: float


MIN_CITY_ZONES = 20


def _feature_rows(panel: ZonePanel, mode: str, weights, periods: np.ndarray):
    X = assemble_features(panel, mode, include_lag=True, weights=weights)
    mask = np.isin(X.period_index, periods)
    return X.values[mask], X.zone_index[mask], X.period_index[mask]


def fit_city_hybrid(city_panel: ZonePanel, split: SplitSpec, config: dict, seed: RngSeed, city: str):
    """Per-mode forest + graph-network + mixing weight for one city."""
    weights = build_knn_weights(city_panel.zones, min(config["generator"]["knn_k"], city_panel.n_zones - 1))
    graph = build_traffic_graph(
        city_panel.zones, config["learners"]["graph"]["radius"], config["learners"]["graph"]["speed"]
    )
    gnn_cfg = config["learners"]["gnn"]
    rf_cfg = config["learners"]["rf"]
    window = gnn_cfg["window"]
    train_periods = split.indices("train")
    val_periods = split.indices("validation")
    models = {}
    for mode in city_panel.modes:
        flows = city_panel.mode_flows(mode)
        Xtr, _, _ = _feature_rows(city_panel, mode, weights, train_periods[1:])
        ytr = flows[:, train_periods[1:]].T.ravel()
        spec = ForestSpec(
            n_trees=rf_cfg["n_trees"],
            max_depth=rf_cfg["max_depth"],
            min_leaf=rf_cfg["min_leaf"],
            features_per_split=rf_cfg["features_per_split"],
            bootstrap=rf_cfg["bootstrap"],
            seed=int(seed.derive("transfer-rf", city, mode).integers(2**32)),
        )
        rf = fit_rf(Xtr, ytr, spec, track_oob=False)
        gnn = fit_stgcn(
            flows,
            graph,
            train_targets=np.arange(window, split.train_range[1]),
            val_targets=val_periods,
            window=window,
            hidden=gnn_cfg["hidden"],
            epochs=gnn_cfg["epochs"],
            lr=gnn_cfg["lr"],
            momentum=gnn_cfg["momentum"],
            patience=gnn_cfg["patience"],
            seed=int(seed.derive("transfer-gnn", city, mode).integers(2**32)),
        )
        Xval, _, _ = _feature_rows(city_panel, mode, weights, val_periods)
        rf_val = predict(rf, Xval)
        Xw, yw = build_windows(flows, window, val_periods)
        gnn_val = predict(gnn, (graph, Xw)).ravel()
        y_val = flows[:, val_periods].T.ravel()
        hybrid = search_alpha(rf_val, gnn_val, y_val, config["ensemble"]["grid_step"])
        models[mode] = {"rf": rf, "gnn": gnn, "alpha": hybrid.alpha, "graph": graph}
    return models


def evaluate_on_target(models: dict, target_panel: ZonePanel, window: int, config: dict):
    """One-step-ahead hybrid R-squared per mode on a test-range-only panel.

    `target_panel` must already be sliced to the target's test range; the
    first `window` periods serve as warm-up history only.
    """
    weights = build_knn_weights(
        target_panel.zones, min(config["generator"]["knn_k"], target_panel.n_zones - 1)
    )
    graph = build_traffic_graph(
        target_panel.zones, config["learners"]["graph"]["radius"], config["learners"]["graph"]["speed"]
    )
    eval_periods = np.arange(window, target_panel.n_periods)
    out = {}
    for mode in target_panel.modes:
        flows = target_panel.mode_flows(mode)
        X, _, _ = _feature_rows(target_panel, mode, weights, eval_periods)
        rf_pred = predict(models[mode]["rf"], X)
        Xw, yw = build_windows(flows, window, eval_periods)
        gnn_pred = predict(models[mode]["gnn"], (graph, Xw)).ravel()
        y = flows[:, eval_periods].T.ravel()
        hybrid = np.clip(
            models[mode]["alpha"] * rf_pred + (1 - models[mode]["alpha"]) * gnn_pred, 0, 1
        )
        ss_res = float(((y - hybrid) ** 2).sum())
        ss_tot = float(((y - y.mean()) ** 2).sum())
        out[mode] = 1.0 - ss_res / ss_tot if ss_tot > 0 else float("nan")
    return out


def run_transfer(
    panel: ZonePanel,
    config: dict,
    seed: RngSeed,
    generator_config: GeneratorConfig | None = None,
) -> TransferMatrix:
    """Zero-shot city-to-city transfer matrix with alpha from the source."""
    cities = list(panel.cities)
    if len(cities) < 2:
        raise ParameterError("transfer needs at least two cities")
    gen_cfg = generator_config or GeneratorConfig(seed=seed)
    morphology = {c: gen_cfg.morphology_of(c) for c in cities}
    window = config["learners"]["gnn"]["window"]
    split = split_panel(panel, min_range=window + 2)

    city_panels = {}
    for city in cities:
        idx = panel.zone_indices(city)
        if idx.size < MIN_CITY_ZONES:
            raise InsufficientCityError(f"city {city} has only {idx.size} zones")
        city_panels[city] = slice_panel(panel, zone_indices=idx)

    test_slices = {
        city: slice_panel(
            city_panels[city], period_range=(split.test_range[0], split.test_range[1])
        )
        for city in cities
    }

    r2_by_mode = {mode: np.full((len(cities), len(cities)), np.nan) for mode in panel.modes}

    def run_source(source):
        models = fit_city_hybrid(city_panels[source], split, config, seed, source)
        return [evaluate_on_target(models, test_slices[t], window, config) for t in cities]

    workers = max(1, int(os.environ.get("GEOFLOW_THREADS", "1")))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            all_scores = list(pool.map(run_source, cities))
    else:
        all_scores = [run_source(c) for c in cities]
    for s_idx in range(len(cities)):
        for t_idx in range(len(cities)):
            for mode in panel.modes:
                r2_by_mode[mode][s_idx, t_idx] = all_scores[s_idx][t_idx][mode]

    r2_mean = np.mean([r2_by_mode[m] for m in panel.modes], axis=0)
    same = np.array(
        [[morphology[a] == morphology[b] for b in cities] for a in cities]
    )
    off_diag = ~np.eye(len(cities), dtype=bool)
    within = float(r2_mean[same & off_diag].mean())
    cross = float(r2_mean[~same].mean())
    diag = float(np.diag(r2_mean).mean())
    return TransferMatrix(
        cities=tuple(cities),
        morphology=morphology,
        r2_by_mode={m: r2_by_mode[m] for m in panel.modes},
        r2_mean=r2_mean,
        within_mean=within,
        cross_mean=cross,
        diagonal_mean=diag,
    )


def run_seasonal(panel: ZonePanel, predictions: dict, min_weeks: int = 4) -> dict:
    """Weekly hybrid R-squared per mode plus quarterly (season-block) means.

    `predictions` maps mode -> (eval_periods, predicted matrix of shape
    (N, len(eval_periods))) from the trained single-city-protocol hybrid,
    evaluated rolling over the whole panel.
    """
    periods_per_week = 7 * PERIODS_PER_DAY
    n_weeks = panel.n_periods // periods_per_week
    if n_weeks < min_weeks:
        raise InsufficientSpanError(f"panel spans {n_weeks} weeks, need >= {min_weeks}")
    seasons = panel.temporal_controls.season
    out = {"weekly": {}, "quarterly": {}, "range": {}}
    for mode, (eval_periods, preds) in predictions.items():
        flows = panel.mode_flows(mode)
        weekly = []
        for w in range(n_weeks):
            lo, hi = w * periods_per_week, (w + 1) * periods_per_week
            sel = (eval_periods >= lo) & (eval_periods < hi)
            if not sel.any():
                weekly.append(float("nan"))
                continue
            y = flows[:, eval_periods[sel]].ravel()
            p = preds[:, sel].ravel()
            ss_res = float(((y - p) ** 2).sum())
            ss_tot = float(((y - y.mean()) ** 2).sum())
            weekly.append(1.0 - ss_res / ss_tot if ss_tot > 0 else float("nan"))
        out["weekly"][mode] = weekly
        quarters = []
        for q in range(4):
            weeks_in_q = [
                w
                for w in range(n_weeks)
                if seasons[w * periods_per_week] == q and weekly[w] == weekly[w]
            ]
            quarters.append(
                float(np.mean([weekly[w] for w in weeks_in_q])) if weeks_in_q else float("nan")
            )
        out["quarterly"][mode] = quarters
        valid = [v for v in weekly if v == v]
        out["range"][mode] = float(max(valid) - min(valid)) if valid else float("nan")
    return out


def fine_tune_on_target(models: dict, target_panel: ZonePanel, split: SplitSpec, config: dict, seed: RngSeed):
    """Optional two-stage strategy: continue network training on the target's
    training range and recalibrate the mixing weight on its validation range.
    This mode deliberately reads target training data and is therefore kept
    out of the zero-shot matrix."""
    window = config["learners"]["gnn"]["window"]
    gnn_cfg = config["learners"]["gnn"]
    weights = build_knn_weights(
        target_panel.zones, min(config["generator"]["knn_k"], target_panel.n_zones - 1)
    )
    graph = build_traffic_graph(
        target_panel.zones, config["learners"]["graph"]["radius"], config["learners"]["graph"]["speed"]
    )
    tuned = {}
    for mode in target_panel.modes:
        flows = target_panel.mode_flows(mode)
        base = models[mode]["gnn"]
        gnn = fit_stgcn(
            flows,
            graph,
            train_targets=np.arange(window, split.train_range[1]),
            val_targets=split.indices("validation"),
            window=window,
            hidden=base.hidden,
            epochs=config["transfer"]["fine_tune_epochs"],
            lr=gnn_cfg["lr"] * 0.5,
            momentum=gnn_cfg["momentum"],
            patience=gnn_cfg["patience"],
            seed=base.seed,
        )
        val_periods = split.indices("validation")
        Xval, _, _ = _feature_rows(target_panel, mode, weights, val_periods)
        rf_val = predict(models[mode]["rf"], Xval)
        Xw, _ = build_windows(flows, window, val_periods)
        gnn_val = predict(gnn, (graph, Xw)).ravel()
        y_val = flows[:, val_periods].T.ravel()
        hybrid = search_alpha(rf_val, gnn_val, y_val, config["ensemble"]["grid_step"])
        tuned[mode] = {"rf": models[mode]["rf"], "gnn": gnn, "alpha": hybrid.alpha, "graph": graph}
    return tuned
