"""ZonePanel serialization: a directory of CSV files plus a JSON manifest.

Layout: zones.csv (static attributes), flows_<mode>.csv (periods x zones),
timestamps.csv (temporal controls), weights.csv (spatial weights), and
manifest.json recording the seed, config hash, and normalization constants.
Floats are written with shortest round-trip formatting, so save/load is
exact and reruns are byte-identical.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .core import (
    ATTRIBUTE_NAMES,
    MODES,
    SEASONS,
    SpatialWeights,
    TemporalControls,
    Zone,
    ZonePanel,
)
from .errors import ParameterError
from .tableio import fmt_cell, read_csv, write_csv


def save_panel(
    panel: ZonePanel,
    weights: SpatialWeights,
    out_dir,
    manifest_extra: dict | None = None,
) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    header = ["zone", "city", "u", "v", "typology"] + list(ATTRIBUTE_NAMES)
    rows = []
    for z in panel.zones:
        rows.append(
            [z.id, z.city, z.centroid[0], z.centroid[1], z.typology]
            + [float(a) for a in z.attributes]
        )
    write_csv(out / "zones.csv", header, rows)

    for m_idx, mode in enumerate(panel.modes):
        header = ["t"] + [f"z{z.id}" for z in panel.zones]
        rows = [
            [int(panel.timestamps[t])] + [float(v) for v in panel.flows[:, t, m_idx]]
            for t in range(panel.n_periods)
        ]
        write_csv(out / f"flows_{mode}.csv", header, rows)

    tc = panel.temporal_controls
    rows = [
        [int(ts), int(tc.peak[t]), int(tc.weekend[t]), SEASONS[int(tc.season[t])]]
        for t, ts in enumerate(panel.timestamps)
    ]
    write_csv(out / "timestamps.csv", ["hours", "peak", "weekend", "season"], rows)

    rows = [
        [int(i), int(j), float(w)]
        for i, j, w in zip(weights.rows, weights.cols, weights.weights)
    ]
    write_csv(out / "weights.csv", ["i", "j", "weight"], rows)

    manifest = {
        "modes": list(panel.modes),
        "n_zones": panel.n_zones,
        "n_periods": panel.n_periods,
        "row_standardized": weights.row_standardized,
        "normalization": {
            city: {mode: list(pair) for mode, pair in by_mode.items()}
            for city, by_mode in panel.normalization.items()
        },
    }
    if manifest_extra:
        manifest.update(manifest_extra)
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return manifest


def load_panel(in_dir) -> tuple[ZonePanel, SpatialWeights]:
    src = Path(in_dir)
    if not (src / "manifest.json").exists():
        raise ParameterError(f"{src} is not a panel bundle (missing manifest.json)")
    with open(src / "manifest.json") as fh:
        manifest = json.load(fh)

    _, header, rows = read_csv(src / "zones.csv")
    zones = []
    for row in rows:
        zones.append(
            Zone(
                id=int(row[0]),
                city=row[1],
                centroid=(float(row[2]), float(row[3])),
                typology=row[4],
                attributes=np.array([float(x) for x in row[5:]]),
            )
        )

    modes = tuple(manifest["modes"])
    flows = None
    timestamps = None
    for m_idx, mode in enumerate(modes):
        _, header, rows = read_csv(src / f"flows_{mode}.csv")
        data = np.array([[float(x) for x in row] for row in rows])
        if flows is None:
            timestamps = data[:, 0].astype(np.int64)
            flows = np.empty((len(zones), data.shape[0], len(modes)))
        flows[:, :, m_idx] = data[:, 1:].T

    _, _, rows = read_csv(src / "timestamps.csv")
    peak = np.array([bool(int(r[1])) for r in rows])
    weekend = np.array([bool(int(r[2])) for r in rows])
    season = np.array([SEASONS.index(r[3]) for r in rows], dtype=np.int64)

    _, _, rows = read_csv(src / "weights.csv")
    wi = np.array([int(r[0]) for r in rows])
    wj = np.array([int(r[1]) for r in rows])
    wv = np.array([float(r[2]) for r in rows])
    weights = SpatialWeights(
        n=len(zones),
        rows=wi,
        cols=wj,
        weights=wv,
        row_standardized=bool(manifest["row_standardized"]),
    )

    normalization = {
        city: {mode: tuple(pair) for mode, pair in by_mode.items()}
        for city, by_mode in manifest["normalization"].items()
    }
    panel = ZonePanel(
        zones=tuple(zones),
        timestamps=timestamps,
        flows=flows,
        temporal_controls=TemporalControls(peak=peak, weekend=weekend, season=season),
        normalization=normalization,
        modes=modes,
    )
    return panel, weights
