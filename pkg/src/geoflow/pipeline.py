"""Configuration-driven orchestration of the full pipeline.

Stages run in dependency order (gen, features, mgwr, train, evaluate,
insights, transfer), each writing its table/plot-data files into the output
directory. A stage whose outputs already exist under the same config hash is
resumed (reloaded) instead of recomputed. The manifest, written last, lists
every emitted file with a checksum.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import config_hash
from .core import (
    ATTRIBUTE_NAMES,
    MODES,
    MODE_LABELS,
    RngSeed,
    SplitSpec,
    TYPOLOGIES,
    ZonePanel,
    build_knn_weights,
    split_panel,
)
from .datagen import (
    GeneratorConfig,
    default_templates,
    describe_flows,
    generate_flows,
    generate_zones,
)
from .diagnostics import compute_metrics, diebold_mariano, morans_i
from .ensemble import predict_hybrid, search_alpha
from .errors import (
    DegenerateTestError,
    GeoflowError,
    NonConvergenceError,
    ProtocolError,
)
from .features import assemble_features, augment_with_surfaces
from .insights import (
    build_cluster_features,
    cluster_profiles,
    default_eps_grid,
    eps_sweep,
    shapley_attribution,
    stratified_lum_regression,
)
from .learners import (
    ForestSpec,
    build_traffic_graph,
    fit_ols,
    fit_rf,
    fit_stgcn,
    load_predictor,
    predict,
    save_predictor,
    spatial_cv_folds,
)
from .learners.stgcn import build_windows
from .mgwr import (
    CoefficientSurface,
    KernelSpec,
    fit_gwr,
    fit_mgwr,
    optimize_bandwidth,
    read_surface_csv,
    significance_mask,
    adaptive_bandwidth_to_distance,
)
from .panel_io import load_panel, save_panel
from .tableio import read_csv, write_csv
from .transfer import run_seasonal, run_transfer
from .errors import ConfigError

STAGE_ORDER = ("gen", "features", "mgwr", "train", "evaluate", "insights", "transfer")

MODEL_ORDER = ("OLS", "GWR", "MGWR", "RF", "GNN", "Hybrid")

TABLE_FILES = {
    "gen": ["table3_flow_stats.csv", "fig1_heatmap.csv"],
    "features": [],
    "mgwr": ["table4_mgwr.csv", "fig2_mgwr_surfaces.csv"],
    "train": [],
    "evaluate": ["table5_performance.csv", "table7_morans.csv", "fig3_performance.csv"],
    "insights": [
        "table6_clusters.csv",
        "table8_stratified.csv",
        "fig4_lum_scatter.csv",
        "fig5_clustering.csv",
        "fig6_shap_moran.csv",
    ],
    "transfer": ["table9_seasonal.csv", "fig7_transfer.csv"],
}


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class Pipeline:
    def __init__(self, config: dict, out_dir):
        self.config = config
        self.out = Path(out_dir)
        self.hash = config_hash(config)
        self.seed = RngSeed(int(config["seed"]))
        self.panel: ZonePanel | None = None
        self.weights = None
        self.gen_config: GeneratorConfig | None = None
        self.gen_report: dict | None = None
        self.split: SplitSpec | None = None
        self.features: dict = {}
        self.surfaces: dict = {}
        self.models: dict = {}
        self.predictions: dict = {}
        self.wall_clock: dict = {}
        self.warnings: list[str] = []
        self.stage_files: dict = {}

    # -- bookkeeping ------------------------------------------------------

    def provenance(self, stage: str) -> dict:
        return {
            "config_hash": self.hash,
            "seed": int(self.seed.seed),
            "stage": stage,
            "version": __version__,
        }

    def _status_path(self, stage: str) -> Path:
        return self.out / f".stage_{stage}.json"

    def _stage_done(self, stage: str) -> bool:
        status = self._status_path(stage)
        if not status.exists():
            return False
        with open(status) as fh:
            meta = json.load(fh)
        if meta.get("config_hash") != self.hash:
            return False
        return all((self.out / f).exists() for f in meta.get("files", []))

    def _mark_done(self, stage: str, files: list[str]) -> None:
        self.stage_files[stage] = files
        with open(self._status_path(stage), "w") as fh:
            json.dump({"config_hash": self.hash, "files": files}, fh, indent=1, sort_keys=True)

    def _emit(self, stage: str, name: str, header, rows) -> str:
        write_csv(self.out / name, header, rows, provenance=self.provenance(stage))
        return name

    # -- shared state loaders ---------------------------------------------

    def generator_config(self) -> GeneratorConfig:
        if self.gen_config is None:
            g = self.config["generator"]
            self.gen_config = GeneratorConfig(
                seed=self.seed,
                weeks=int(g["weeks"]),
                morphology_shift=float(g["morphology_shift"]),
                noise_sd=dict(g["noise_sd"]),
                spatial_noise_range=int(g["spatial_noise_range"]),
                knn_k=int(g["knn_k"]),
            )
        return self.gen_config

    def ensure_panel(self):
        if self.panel is None:
            self.panel, self.weights = load_panel(self.out / "panel")
        if self.split is None:
            frac = self.config["split"]
            self.split = split_panel(
                self.panel,
                (frac["train"], frac["validation"], frac["test"]),
                min_range=self.config["learners"]["gnn"]["window"] + 2,
            )
        return self.panel

    def ensure_features(self):
        self.ensure_panel()
        if not self.features:
            for mode in MODES:
                self.features[mode] = assemble_features(
                    self.panel, mode,
                    include_lag=self.config["features"]["include_lag"],
                    weights=self.weights,
                )
        return self.features

    def ensure_surfaces(self):
        if not self.surfaces:
            for mode in MODES:
                data = read_surface_csv(self.out / f"mgwr/surface_{mode}.csv")
                kernel = KernelSpec(self.config["mgwr"]["kernel"], self.config["mgwr"]["adaptive"])
                self.surfaces[mode] = CoefficientSurface(
                    covariates=data["covariates"],
                    beta=data["beta"],
                    bandwidths=data["bandwidths"],
                    pseudo_t=data["pseudo_t"],
                    aicc=float("nan"),
                    effective_df=float("nan"),
                    kernel=kernel,
                    rss=float("nan"),
                )
        return self.surfaces

    def ensure_models(self):
        if not self.models:
            for mode in MODES:
                entry = {}
                for kind in ("ols", "rf", "gnn"):
                    entry[kind] = load_predictor(self.out / f"models/{kind}_{mode}.json")
                for kind in ("gwr", "mgwr"):
                    data = read_surface_csv(self.out / f"models/{kind}_{mode}.csv")
                    kernel = KernelSpec(
                        self.config["mgwr"]["kernel"], self.config["mgwr"]["adaptive"]
                    )
                    entry[kind] = CoefficientSurface(
                        covariates=data["covariates"],
                        beta=data["beta"],
                        bandwidths=data["bandwidths"],
                        pseudo_t=data["pseudo_t"],
                        aicc=float("nan"),
                        effective_df=float("nan"),
                        kernel=kernel,
                        rss=float("nan"),
                    )
                with open(self.out / f"models/hybrid_{mode}.json") as fh:
                    entry["hybrid"] = json.load(fh)
                self.models[mode] = entry
        return self.models

    # -- stage: gen ---------------------------------------------------------

    def stage_gen(self):
        cfg = self.generator_config()
        zones = generate_zones(cfg)
        self.weights = build_knn_weights(zones, cfg.knn_k)
        self.panel, self.gen_report = generate_flows(zones, default_templates(), cfg, self.weights)
        files = []
        manifest_extra = {
            "seed": int(self.seed.seed),
            "config_hash": self.hash,
            "calibration": {
                "pooled_mode_means": self.gen_report["pooled_mode_means"],
                "typology_lum_means": self.gen_report["typology_lum_means"],
                "hourly_stats": self.gen_report["hourly_stats"],
            },
        }
        save_panel(self.panel, self.weights, self.out / "panel", manifest_extra)
        for name in sorted((self.out / "panel").iterdir()):
            files.append(str(name.relative_to(self.out)))

        rows = []
        for r in describe_flows(self.panel):
            rows.append([r["mode"], r["mean"], r["sd"], r["cv"], r["peak_ratio"], r["sv"]])
        files.append(self._emit("gen", "table3_flow_stats.csv",
                                ["mode", "mean", "sd", "cv", "peak_ratio", "sv"], rows))

        rows = []
        for mode in MODES:
            heat = np.asarray(self.gen_report["hourly_heatmap"][mode])
            for day in range(7):
                for hour in range(24):
                    rows.append([mode, day, hour, float(heat[day, hour])])
        files.append(self._emit("gen", "fig1_heatmap.csv",
                                ["mode", "day", "hour", "intensity"], rows))
        self._mark_done("gen", files)

    # -- stage: features ----------------------------------------------------

    def stage_features(self):
        self.ensure_features()
        files = []
        for mode in MODES:
            name = f"features/features_{mode}.csv"
            self.features[mode].to_csv(self.out / name, provenance=self.provenance("features"))
            files.append(name)
        self._mark_done("features", files)

    # -- stage: mgwr --------------------------------------------------------

    def stage_mgwr(self):
        self.ensure_panel()
        mcfg = self.config["mgwr"]
        kernel = KernelSpec(mcfg["kernel"], mcfg["adaptive"])
        covariates = list(mcfg["covariates"])
        attrs = self.panel.attribute_matrix()
        X = np.column_stack([attrs[:, ATTRIBUTE_NAMES.index(c)] for c in covariates])
        cents = self.panel.centroids()
        tc = self.panel.temporal_controls
        peak_mask = tc.peak & ~tc.weekend
        train_hi = self.split.train_range[1]
        peak_mask = peak_mask & (np.arange(self.panel.n_periods) < train_hi)
        files = []
        table4 = {}
        for mode in MODES:
            y = self.panel.mode_flows(mode)[:, peak_mask].mean(axis=1)
            try:
                surface = fit_mgwr(
                    X, y, cents, kernel,
                    tol=mcfg["tol"], max_iter=mcfg["max_iter"], covariates=covariates,
                )
            except NonConvergenceError as exc:
                surface = exc.last_iterate
                self.warnings.append(f"mgwr {mode}: {exc}")
            self.surfaces[mode] = surface
            name = f"mgwr/surface_{mode}.csv"
            surface.to_csv(self.out / name, centroids=cents, alpha=mcfg["alpha"],
                           provenance=self.provenance("mgwr"))
            files.append(name)
            _, prop = significance_mask(surface, mcfg["alpha"])
            iqr = {
                c: float(np.subtract(*np.percentile(surface.beta[:, surface.covariates.index(c)], [75, 25])))
                for c in covariates
            }
            table4[mode] = {"surface": surface, "prop": prop, "iqr": iqr}

        rows = []
        for c in covariates:
            bw_per_mode = [
                float(table4[m]["surface"].bandwidths[table4[m]["surface"].covariates.index(c)])
                for m in MODES
            ]
            h_star = float(np.mean(bw_per_mode))
            h_dist = adaptive_bandwidth_to_distance(cents, h_star) if mcfg["adaptive"] else h_star
            row = [c, h_star, h_dist]
            for m in MODES:
                row += [table4[m]["iqr"][c], table4[m]["prop"][c]]
            rows.append(row)
        mean_row = ["Mean", float(np.mean([r[1] for r in rows])), float(np.mean([r[2] for r in rows]))]
        for j in range(3, len(rows[0])):
            mean_row.append(float(np.mean([r[j] for r in rows])))
        rows.append(mean_row)
        header = ["variable", "h_star_adaptive", "h_star_distance"]
        for m in MODES:
            header += [f"iqr_{m}", f"prop_sig_{m}"]
        files.append(self._emit("mgwr", "table4_mgwr.csv", header, rows))

        rows = []
        for mode in MODES:
            surface = table4[mode]["surface"]
            mask, _ = significance_mask(surface, mcfg["alpha"])
            for j, c in enumerate(surface.covariates):
                for i in range(self.panel.n_zones):
                    rows.append([
                        mode, i, cents[i, 0], cents[i, 1], c,
                        float(surface.bandwidths[j]), float(surface.beta[i, j]),
                        float(surface.pseudo_t[i, j]), int(mask[i, j]),
                    ])
        files.append(self._emit(
            "mgwr", "fig2_mgwr_surfaces.csv",
            ["mode", "zone", "u", "v", "covariate", "bandwidth", "beta", "pseudo_t", "significant"],
            rows,
        ))
        self._mark_done("mgwr", files)

    # -- stage: train ---------------------------------------------------------

    def _rows_for(self, X, periods):
        mask = np.isin(X.period_index, periods)
        return mask

    def _panel_y(self, mode, periods):
        return self.panel.mode_flows(mode)[:, periods].T.ravel()

    def stage_train(self):
        self.ensure_features()
        self.ensure_surfaces() if not self.surfaces else None
        lcfg = self.config["learners"]
        mcfg = self.config["mgwr"]
        kernel = KernelSpec(mcfg["kernel"], mcfg["adaptive"])
        cents = self.panel.centroids()
        graph = build_traffic_graph(self.panel.zones, lcfg["graph"]["radius"], lcfg["graph"]["speed"])
        window = lcfg["gnn"]["window"]
        train_periods = self.split.indices("train")
        train_periods = train_periods[train_periods >= 1]
        val_periods = self.split.indices("validation")
        files = []
        for mode in MODES:
            X = self.features[mode]
            tr_mask = self._rows_for(X, train_periods)
            y_tr = self._panel_y(mode, train_periods)

            ols = fit_ols(X.values[tr_mask], y_tr, columns=X.columns)
            save_predictor(ols, self.out / f"models/ols_{mode}.json")

            bw = optimize_bandwidth(
                X.values[tr_mask], y_tr, cents, kernel,
                zone_index=X.zone_index[tr_mask],
            )
            gwr = fit_gwr(
                X.values[tr_mask], y_tr, cents, bw.bandwidth, kernel,
                zone_index=X.zone_index[tr_mask], covariates=list(X.columns),
            )
            gwr.to_csv(self.out / f"models/gwr_{mode}.csv", centroids=cents,
                       provenance=self.provenance("train"))

            try:
                mgwr_panel = fit_mgwr(
                    X.values[tr_mask], y_tr, cents, kernel,
                    tol=mcfg["panel_tol"], max_iter=mcfg["panel_max_iter"],
                    zone_index=X.zone_index[tr_mask], covariates=list(X.columns),
                )
            except NonConvergenceError as exc:
                mgwr_panel = exc.last_iterate
                self.warnings.append(f"panel mgwr {mode}: {exc}")
            mgwr_panel.to_csv(self.out / f"models/mgwr_{mode}.csv", centroids=cents,
                              provenance=self.provenance("train"))

            X_aug = augment_with_surfaces(
                X, self.surfaces[mode], include_intercept=lcfg["augment_intercept"]
            )
            rf_cfg = dict(lcfg["rf"])
            if lcfg["rf_cv_select"]:
                rf_cfg["min_leaf"] = self._rf_cv_min_leaf(X_aug, tr_mask, y_tr, rf_cfg, mode)
            spec = ForestSpec(
                n_trees=rf_cfg["n_trees"], max_depth=rf_cfg["max_depth"],
                min_leaf=rf_cfg["min_leaf"], features_per_split=rf_cfg["features_per_split"],
                bootstrap=rf_cfg["bootstrap"],
                seed=int(self.seed.derive("rf", mode).integers(2**32)),
            )
            rf = fit_rf(X_aug.values[tr_mask], y_tr, spec, columns=X_aug.columns, track_oob=False)
            save_predictor(rf, self.out / f"models/rf_{mode}.json")

            flows = self.panel.mode_flows(mode)
            gnn = fit_stgcn(
                flows, graph,
                train_targets=np.arange(window, self.split.train_range[1]),
                val_targets=val_periods,
                window=window, hidden=lcfg["gnn"]["hidden"], epochs=lcfg["gnn"]["epochs"],
                lr=lcfg["gnn"]["lr"], momentum=lcfg["gnn"]["momentum"],
                patience=lcfg["gnn"]["patience"],
                seed=int(self.seed.derive("gnn", mode).integers(2**32)),
            )
            save_predictor(gnn, self.out / f"models/gnn_{mode}.json")

            val_mask = self._rows_for(X, val_periods)
            rf_val = predict(rf, X_aug.values[val_mask])
            Xw, _ = build_windows(flows, window, val_periods)
            gnn_val = predict(gnn, (graph, Xw)).ravel()
            y_val = self._panel_y(mode, val_periods)
            hybrid = search_alpha(rf_val, gnn_val, y_val, self.config["ensemble"]["grid_step"])
            with open(self.out / f"models/hybrid_{mode}.json", "w") as fh:
                json.dump(
                    {
                        "alpha": hybrid.alpha,
                        "closed_form_alpha": hybrid.closed_form_alpha,
                        "val_rmse_at_alpha": min(r for _, r in hybrid.trace),
                    },
                    fh,
                )
            name = f"models/alpha_trace_{mode}.csv"
            write_csv(self.out / name, ["alpha", "val_rmse"],
                      [[a, r] for a, r in hybrid.trace], provenance=self.provenance("train"))
            files += [
                f"models/ols_{mode}.json", f"models/gwr_{mode}.csv", f"models/mgwr_{mode}.csv",
                f"models/rf_{mode}.json", f"models/gnn_{mode}.json", f"models/hybrid_{mode}.json",
                name,
            ]
            self.models[mode] = {
                "ols": ols, "gwr": gwr, "mgwr": mgwr_panel, "rf": rf, "gnn": gnn,
                "hybrid": {"alpha": hybrid.alpha, "closed_form_alpha": hybrid.closed_form_alpha},
            }

        # pooled mixing weight across modes, reported alongside per-mode ones
        rf_all, gnn_all, y_all = [], [], []
        for mode in MODES:
            X = self.features[mode]
            X_aug = augment_with_surfaces(X, self.surfaces[mode],
                                          include_intercept=lcfg["augment_intercept"])
            val_mask = self._rows_for(X, val_periods)
            rf_all.append(predict(self.models[mode]["rf"], X_aug.values[val_mask]))
            flows = self.panel.mode_flows(mode)
            Xw, _ = build_windows(flows, window, val_periods)
            gnn_all.append(predict(self.models[mode]["gnn"], (graph, Xw)).ravel())
            y_all.append(self._panel_y(mode, val_periods))
        pooled = search_alpha(np.concatenate(rf_all), np.concatenate(gnn_all),
                              np.concatenate(y_all), self.config["ensemble"]["grid_step"])
        with open(self.out / "models/alpha_pooled.json", "w") as fh:
            json.dump({"alpha": pooled.alpha, "closed_form_alpha": pooled.closed_form_alpha}, fh)
        files.append("models/alpha_pooled.json")
        self._mark_done("train", files)

    def _rf_cv_min_leaf(self, X_aug, tr_mask, y_tr, rf_cfg, mode):
        """Five-fold spatially blocked selection of the leaf size."""
        folds = spatial_cv_folds(self.panel.centroids(), k=5, seed=self.seed)
        zone_fold = folds[X_aug.zone_index[tr_mask]]
        best = (np.inf, rf_cfg["min_leaf"])
        for min_leaf in (2, 5, 10):
            errs = []
            for f in range(5):
                fit_rows = zone_fold != f
                spec = ForestSpec(
                    n_trees=max(20, rf_cfg["n_trees"] // 4), max_depth=rf_cfg["max_depth"],
                    min_leaf=min_leaf, features_per_split=rf_cfg["features_per_split"],
                    bootstrap=rf_cfg["bootstrap"],
                    seed=int(self.seed.derive("rf-cv", mode, min_leaf, f).integers(2**32)),
                )
                model = fit_rf(X_aug.values[tr_mask][fit_rows], y_tr[fit_rows], spec, track_oob=False)
                pred = predict(model, X_aug.values[tr_mask][~fit_rows])
                errs.append(float(np.mean((pred - y_tr[~fit_rows]) ** 2)))
            score = float(np.mean(errs))
            if score < best[0]:
                best = (score, min_leaf)
        return best[1]

    # -- stage: evaluate ------------------------------------------------------

    def _test_predictions(self, mode):
        lcfg = self.config["learners"]
        X = self.features[mode]
        test_periods = self.split.indices("test")
        mask = self._rows_for(X, test_periods)
        models = self.models[mode]
        X_aug = augment_with_surfaces(X, self.surfaces[mode],
                                      include_intercept=lcfg["augment_intercept"])
        graph = build_traffic_graph(self.panel.zones, lcfg["graph"]["radius"], lcfg["graph"]["speed"])
        flows = self.panel.mode_flows(mode)
        window = lcfg["gnn"]["window"]
        names = [c for c in models["gwr"].covariates if c != "Intercept"]
        col_idx = [X.columns.index(c) for c in names]
        preds = {
            "OLS": predict(models["ols"], X.values[mask]),
            "GWR": np.clip(models["gwr"].predict(X.values[mask][:, col_idx], X.zone_index[mask]), 0, 1),
            "MGWR": np.clip(models["mgwr"].predict(X.values[mask][:, col_idx], X.zone_index[mask]), 0, 1),
            "RF": predict(models["rf"], X_aug.values[mask]),
        }
        Xw, _ = build_windows(flows, window, test_periods)
        preds["GNN"] = predict(models["gnn"], (graph, Xw)).ravel()
        alpha = models["hybrid"]["alpha"]
        preds["Hybrid"] = np.clip(alpha * preds["RF"] + (1 - alpha) * preds["GNN"], 0, 1)
        y = self._panel_y(mode, test_periods)
        ts = np.tile(self.panel.timestamps[test_periods], (self.panel.n_zones, 1)).T.ravel()
        zone_ids = X.zone_index[mask]
        period_ids = X.period_index[mask]
        return preds, y, ts, zone_ids, period_ids

    def stage_evaluate(self):
        self.ensure_features()
        self.ensure_surfaces()
        self.ensure_models()
        dcfg = self.config["diagnostics"]
        files = []
        all_results = {}
        for mode in MODES:
            preds, y, ts, zone_ids, period_ids = self._test_predictions(mode)
            test_hash = hashlib.sha256(
                np.ascontiguousarray(np.stack([zone_ids, period_ids])).tobytes()
            ).hexdigest()[:16]
            results = {}
            for model in MODEL_ORDER:
                bundle = compute_metrics(y, preds[model], ts, mode=mode, model=model)
                resid_zone = np.zeros(self.panel.n_zones)
                counts = np.zeros(self.panel.n_zones)
                np.add.at(resid_zone, zone_ids, y - preds[model])
                np.add.at(counts, zone_ids, 1.0)
                resid_zone /= np.maximum(counts, 1.0)
                moran = morans_i(resid_zone, self.weights, permutations=dcfg["permutations"],
                                 seed=self.seed)
                results[model] = {
                    "pred": preds[model], "metrics": bundle, "moran": moran,
                    "resid_zone": resid_zone, "test_hash": test_hash,
                }
            all_results[mode] = {"results": results, "y": y, "ts": ts,
                                 "zone_ids": zone_ids, "period_ids": period_ids}
            name = f"evaluate/predictions_{mode}.csv"
            header = ["zone", "period", "actual"] + list(MODEL_ORDER)
            rows = []
            for r in range(y.size):
                rows.append([int(zone_ids[r]), int(period_ids[r]), float(y[r])]
                            + [float(preds[m][r]) for m in MODEL_ORDER])
            write_csv(self.out / name, header, rows, provenance=self.provenance("evaluate"))
            files.append(name)

        table5_rows, markers = compare_models(
            {m: {k: v for k, v in all_results[m]["results"].items()} for m in MODES},
            {m: all_results[m]["y"] for m in MODES},
            {m: all_results[m]["period_ids"] for m in MODES},
            alpha=dcfg["alpha"],
        )
        files.append(self._emit(
            "evaluate", "table5_performance.csv",
            ["mode", "model", "rmse", "r2", "mape_percent", "best_rmse", "best_r2",
             "best_mape", "dm_marker"],
            table5_rows,
        ))

        rows = []
        for mode in MODES:
            for model in MODEL_ORDER:
                mr = all_results[mode]["results"][model]["moran"]
                rows.append([mode, model, mr.I, mr.p_value, mr.permutations])
        files.append(self._emit("evaluate", "table7_morans.csv",
                                ["mode", "model", "moran_i", "p_value", "permutations"], rows))

        rows = []
        for mode in MODES:
            for model in MODEL_ORDER:
                b = all_results[mode]["results"][model]["metrics"]
                rows.append(["rmse", mode, model, "", b.rmse])
                rows.append(["r2", mode, model, "", b.r_squared])
            for model in ("OLS", "GWR", "RF", "Hybrid"):
                b = all_results[mode]["results"][model]["metrics"]
                for hour, val in sorted(b.hourly_mape.items()):
                    rows.append(["hourly_mape", mode, model, hour, val])
        files.append(self._emit("evaluate", "fig3_performance.csv",
                                ["section", "mode", "model", "x", "value"], rows))

        with open(self.out / "evaluate/metrics.json", "w") as fh:
            payload = {}
            for mode in MODES:
                payload[mode] = {}
                for model in MODEL_ORDER:
                    r = all_results[mode]["results"][model]
                    payload[mode][model] = {
                        "rmse": r["metrics"].rmse,
                        "r2": r["metrics"].r_squared,
                        "mape": r["metrics"].mape_percent,
                        "moran_i": r["moran"].I,
                        "moran_p": r["moran"].p_value,
                        "dm_marker": markers.get((mode, model), ""),
                    }
                payload[mode]["alpha"] = self.models[mode]["hybrid"]["alpha"]
            json.dump(payload, fh, indent=1, sort_keys=True)
        files.append("evaluate/metrics.json")
        self._mark_done("evaluate", files)

    # -- stage: insights --------------------------------------------------------

    def stage_insights(self):
        self.ensure_features()
        self.ensure_surfaces()
        self.ensure_models()
        icfg = self.config["insights"]
        lcfg = self.config["learners"]
        files = []

        # SHAP on the hybrid prediction for a deterministic test subsample.
        shap_rows = []
        for mode in MODES:
            X = self.features[mode]
            X_aug = augment_with_surfaces(X, self.surfaces[mode],
                                          include_intercept=lcfg["augment_intercept"])
            test_periods = self.split.indices("test")
            mask_idx = np.nonzero(self._rows_for(X, test_periods))[0]
            rng = self.seed.derive("shap-sample", mode)
            take = min(icfg["shap_instances"], mask_idx.size)
            chosen = np.sort(rng.choice(mask_idx, size=take, replace=False))
            instances = X_aug.values[chosen]
            background = X_aug.values[self._rows_for(X, self.split.indices("train"))].mean(axis=0)
            rf = self.models[mode]["rf"]
            alpha = self.models[mode]["hybrid"]["alpha"]

            # GNN term is constant w.r.t. the feature vector; the explained
            # function is the hybrid with the graph component at its observed
            # per-instance value, folded into the base value.
            preds, y, ts, zone_ids, period_ids = self._test_predictions(mode)
            row_of = {int(r): i for i, r in enumerate(np.nonzero(self._rows_for(X, test_periods))[0])}
            gnn_part = np.array([preds["GNN"][row_of[int(r)]] for r in chosen])

            frozen = ["SpatialLag"] if "SpatialLag" in X_aug.columns else []
            def hybrid_fn(vecs, _rf=rf, _alpha=alpha):
                return _alpha * predict(_rf, vecs)

            report = shapley_attribution(
                hybrid_fn, instances, background,
                feature_names=X_aug.columns, frozen=frozen,
                max_exact_features=icfg["max_exact_features"],
                samples=icfg["shap_samples"], seed=self.seed,
            )
            for feat, val in sorted(report.mean_abs.items(), key=lambda kv: -kv[1]):
                shap_rows.append(["shap", mode, feat, "", "", val])

        # Moran scatter of hybrid residuals (the fig 6b data).
        for mode in MODES:
            preds, y, ts, zone_ids, period_ids = self._test_predictions(mode)
            resid_zone = np.zeros(self.panel.n_zones)
            counts = np.zeros(self.panel.n_zones)
            np.add.at(resid_zone, zone_ids, y - preds["Hybrid"])
            np.add.at(counts, zone_ids, 1.0)
            resid_zone /= np.maximum(counts, 1.0)
            moran = morans_i(resid_zone, self.weights, permutations=0, seed=self.seed)
            wz = self.weights.row_standardize().lag(moran.z)
            for i in range(self.panel.n_zones):
                shap_rows.append(["moran", mode, i, float(moran.z[i]), float(wz[i]),
                                  moran.quadrant[i]])
        files.append(self._emit("insights", "fig6_shap_moran.csv",
                                ["section", "mode", "key", "z", "z_lag", "value"], shap_rows))

        # Clustering: radius sweep, labels, profiles.
        feat, _ = build_cluster_features(self.panel)
        grid = default_eps_grid(feat, icfg["eps_grid_size"])
        sweep_table, best = eps_sweep(feat, icfg["min_pts"], grid)
        cents = self.panel.centroids()
        rows = []
        for i in range(self.panel.n_zones):
            rows.append(["zones", float(best.eps), i, cents[i, 0], cents[i, 1],
                         int(best.labels[i])])
        for entry in sweep_table:
            rows.append(["sweep", entry["eps"], "", entry["k"], entry["silhouette"], ""])
        profiles = cluster_profiles(self.panel, best.labels)
        for p in profiles:
            for mode in MODES:
                for s in range(4):
                    rows.append(["profile", p["cluster"], mode, s, p[f"slot{s}_{mode}"], ""])
        files.append(self._emit("insights", "fig5_clustering.csv",
                                ["section", "a", "b", "c", "d", "e"], rows))

        header = ["cluster", "n", "LUM", "FAR", "StopDens", "PopDens", "DistCBD"] + [
            f"am_peak_{m}" for m in MODES
        ] + ["silhouette", "eps", "min_pts"]
        rows = []
        for p in profiles:
            rows.append([p["cluster"], p["n"], p["LUM"], p["FAR"], p["StopDens"],
                         p["PopDens"], p["DistCBD"]]
                        + [p[f"am_peak_{m}"] for m in MODES]
                        + [best.silhouette, best.eps, best.min_pts])
        files.append(self._emit("insights", "table6_clusters.csv", header, rows))

        strat = stratified_lum_regression(self.panel)
        rows = [[r["zone_type"], r["mode"], r["lum_coef"], r["hc3_se"], r["p_value"],
                 r["stars"], r["adj_r2"], r["n"]] for r in strat]
        files.append(self._emit("insights", "table8_stratified.csv",
                                ["zone_type", "mode", "lum_coef", "hc3_se", "p_value",
                                 "stars", "adj_r2", "n"], rows))

        attrs = self.panel.attribute_matrix()
        lum = attrs[:, ATTRIBUTE_NAMES.index("LUM")]
        rows = []
        for mode in MODES:
            flows = self.panel.mode_flows(mode).mean(axis=1)
            for i, z in enumerate(self.panel.zones):
                rows.append(["point", mode, z.typology, float(lum[i]), float(flows[i])])
            slope, intercept = np.polyfit(lum, flows, 1)
            r = float(np.corrcoef(lum, flows)[0, 1])
            rows.append(["fit", mode, "all", float(slope), float(intercept), r])
            for typ in TYPOLOGIES:
                sel = np.array([z.typology == typ for z in self.panel.zones])
                if sel.sum() >= 3:
                    s, b = np.polyfit(lum[sel], flows[sel], 1)
                    rt = float(np.corrcoef(lum[sel], flows[sel])[0, 1])
                    rows.append(["fit", mode, typ, float(s), float(b), rt])
        files.append(self._emit("insights", "fig4_lum_scatter.csv",
                                ["section", "mode", "typology", "x", "y", "r"], rows))
        self._mark_done("insights", files)

    # -- stage: transfer ---------------------------------------------------------

    def stage_transfer(self):
        self.ensure_features()
        self.ensure_surfaces()
        self.ensure_models()
        files = []
        matrix = run_transfer(self.panel, self.config, self.seed,
                              generator_config=self.generator_config())
        rows = []
        for mode in list(MODES) + ["mean"]:
            grid = matrix.r2_mean if mode == "mean" else matrix.r2_by_mode[mode]
            for i, src in enumerate(matrix.cities):
                for j, dst in enumerate(matrix.cities):
                    rows.append(["matrix", mode, src, dst, float(grid[i, j])])
        rows.append(["summary", "mean", "within_cluster", "", matrix.within_mean])
        rows.append(["summary", "mean", "cross_cluster", "", matrix.cross_mean])
        rows.append(["summary", "mean", "diagonal", "", matrix.diagonal_mean])

        seasonal = self._seasonal_profile()
        for mode in MODES:
            for w, val in enumerate(seasonal["weekly"][mode]):
                rows.append(["seasonal", mode, w, "", val])
        files.append(self._emit("transfer", "fig7_transfer.csv",
                                ["section", "mode", "a", "b", "value"], rows))

        rows = []
        for mode in MODES:
            q = seasonal["quarterly"][mode]
            rows.append([mode] + [float(v) for v in q] + [seasonal["range"][mode]])
        rows.append(["mean"] + [
            float(np.mean([seasonal["quarterly"][m][qi] for m in MODES])) for qi in range(4)
        ] + [float(np.mean([seasonal["range"][m] for m in MODES]))])
        files.append(self._emit("transfer", "table9_seasonal.csv",
                                ["mode", "q1", "q2", "q3", "q4", "weekly_range"], rows))
        self._mark_done("transfer", files)

    def _seasonal_profile(self):
        lcfg = self.config["learners"]
        window = lcfg["gnn"]["window"]
        graph = build_traffic_graph(self.panel.zones, lcfg["graph"]["radius"], lcfg["graph"]["speed"])
        predictions = {}
        for mode in MODES:
            X = self.features[mode]
            X_aug = augment_with_surfaces(X, self.surfaces[mode],
                                          include_intercept=lcfg["augment_intercept"])
            eval_periods = np.arange(window, self.panel.n_periods)
            mask = self._rows_for(X, eval_periods)
            rf_pred = predict(self.models[mode]["rf"], X_aug.values[mask])
            flows = self.panel.mode_flows(mode)
            Xw, _ = build_windows(flows, window, eval_periods)
            gnn_pred = predict(self.models[mode]["gnn"], (graph, Xw)).ravel()
            alpha = self.models[mode]["hybrid"]["alpha"]
            hybrid = np.clip(alpha * rf_pred + (1 - alpha) * gnn_pred, 0, 1)
            preds = hybrid.reshape(eval_periods.size, self.panel.n_zones).T
            predictions[mode] = (eval_periods, preds)
        return run_seasonal(self.panel, predictions)

    # -- driver -------------------------------------------------------------

    def run(self, stages="all") -> dict:
        if stages in ("all", None):
            selected = list(STAGE_ORDER)
        elif isinstance(stages, str):
            if stages not in STAGE_ORDER:
                raise ConfigError(f"unknown stage {stages!r}")
            selected = list(STAGE_ORDER[: STAGE_ORDER.index(stages) + 1])
        else:
            selected = list(stages)
        self.out.mkdir(parents=True, exist_ok=True)
        incomplete = False
        try:
            for stage in selected:
                start = time.perf_counter()
                if self._stage_done(stage):
                    with open(self._status_path(stage)) as fh:
                        self.stage_files[stage] = json.load(fh)["files"]
                    self.wall_clock[stage] = 0.0
                    continue
                getattr(self, f"stage_{stage}")()
                self.wall_clock[stage] = round(time.perf_counter() - start, 3)
        except GeoflowError:
            incomplete = True
            raise
        finally:
            self._write_manifest(incomplete=incomplete)
        return self.manifest

    def _write_manifest(self, incomplete: bool) -> None:
        import scipy

        inventory = []
        for stage, names in sorted(self.stage_files.items()):
            for name in sorted(names):
                path = self.out / name
                if path.exists():
                    inventory.append(
                        {"path": name, "stage": stage, "sha256": _sha256(path)}
                    )
        self.manifest = {
            "config": self.config,
            "config_hash": self.hash,
            "versions": {
                "geoflow": __version__,
                "numpy": np.__version__,
                "scipy": scipy.__version__,
            },
            "seeds": {stage: int(self.seed.seed) for stage in self.stage_files},
            "wall_clock_seconds": self.wall_clock,
            "warnings": self.warnings,
            "incomplete": incomplete,
            "files": inventory,
        }
        with open(self.out / "manifest.json", "w") as fh:
            json.dump(self.manifest, fh, indent=1, sort_keys=True)


def compare_models(results_by_mode, y_by_mode, period_by_mode, alpha=0.05):
    """Table-5-shaped rows with best-per-cell flags and paired-accuracy
    markers (forest/network vs single-bandwidth local model; hybrid vs
    forest). All models must have been evaluated on one test protocol."""
    rows = []
    markers = {}
    for mode, results in results_by_mode.items():
        hashes = {r["test_hash"] for r in results.values()}
        if len(hashes) != 1:
            raise ProtocolError(f"mode {mode}: models evaluated on different test sets")
        y = y_by_mode[mode]
        periods = period_by_mode[mode]
        uniq = np.unique(periods)

        def tseries(model):
            err = results[model]["pred"] - y
            agg = np.zeros(uniq.size)
            for i, p in enumerate(uniq):
                agg[i] = np.mean(err[periods == p] ** 2)
            return agg

        def dm_sig(model_a, model_b):
            # per-timestamp mean squared-error differential
            try:
                d = diebold_mariano(
                    np.sqrt(tseries(model_a)), np.sqrt(tseries(model_b)), loss="squared"
                )
            except DegenerateTestError:
                return False
            return d.statistic < 0 and d.p_value < alpha

        for model in MODEL_ORDER:
            marker = ""
            if model in ("RF", "GNN") and dm_sig(model, "GWR"):
                marker = "better_than_gwr"
            if model == "Hybrid" and dm_sig(model, "RF"):
                marker = "better_than_rf"
            markers[(mode, model)] = marker

        metric_values = {
            "rmse": {m: results[m]["metrics"].rmse for m in MODEL_ORDER},
            "r2": {m: results[m]["metrics"].r_squared for m in MODEL_ORDER},
            "mape": {m: results[m]["metrics"].mape_percent for m in MODEL_ORDER},
        }
        best = {
            "rmse": min(metric_values["rmse"], key=metric_values["rmse"].get),
            "r2": max(metric_values["r2"], key=metric_values["r2"].get),
            "mape": min(metric_values["mape"], key=metric_values["mape"].get),
        }
        for model in MODEL_ORDER:
            rows.append([
                mode, model,
                metric_values["rmse"][model], metric_values["r2"][model],
                metric_values["mape"][model],
                int(best["rmse"] == model), int(best["r2"] == model),
                int(best["mape"] == model), markers[(mode, model)],
            ])
    return rows, markers
