"""Engineered covariates and model-ready feature matrices.

Land use mix averages three normalized components (entropy, accessibility,
compatibility); transit accessibility is a negative-exponential cumulative
opportunity index; the spatiotemporal lag averages neighbors' previous-period
flows over the first-order neighborhood.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .core import ATTRIBUTE_NAMES, SEASONS, SpatialWeights, ZonePanel
from .errors import AlignmentError, DomainError, NoNeighborsError, ParameterError

N_LANDUSE_CATEGORIES = 6

LAG_COLUMN = "SpatialLag"

SEASON_DUMMY_COLUMNS = tuple(f"Season{name}" for name in SEASONS[1:])  # Winter is reference

BASE_COLUMNS = ATTRIBUTE_NAMES + ("PeakHour", "Weekend") + SEASON_DUMMY_COLUMNS


@dataclass(frozen=True)
class LandUseShares:
    """Nonnegative category shares that sum to one."""

    shares: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.shares, dtype=float)
        if arr.ndim != 1 or arr.size < 1:
            raise DomainError("shares must be a nonempty vector")
        if (arr < 0).any():
            raise DomainError("shares must be nonnegative")
        if abs(arr.sum() - 1.0) > 1e-9:
            raise DomainError(f"shares must sum to 1, got {arr.sum()}")
        arr.flags.writeable = False
        object.__setattr__(self, "shares", arr)


@dataclass(frozen=True)
class FeatureMatrix:
    """(zone, period)-indexed design matrix with named columns."""

    values: np.ndarray  # (rows, columns)
    columns: tuple[str, ...]
    zone_index: np.ndarray  # per-row zone position
    period_index: np.ndarray  # per-row period position

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim != 2 or vals.shape[1] != len(self.columns):
            raise ParameterError("values shape must match the column list")
        if len(set(self.columns)) != len(self.columns):
            raise ParameterError("column names must be unique")
        if np.isnan(vals).any():
            raise ParameterError("feature matrix must not contain missing values")
        zi = np.asarray(self.zone_index, dtype=np.int64)
        pi = np.asarray(self.period_index, dtype=np.int64)
        if zi.shape != (vals.shape[0],) or pi.shape != (vals.shape[0],):
            raise ParameterError("row index arrays must match the row count")
        for arr in (vals, zi, pi):
            arr.flags.writeable = False
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "zone_index", zi)
        object.__setattr__(self, "period_index", pi)
        object.__setattr__(self, "columns", tuple(self.columns))

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.columns.index(name)]

    def with_columns(self, names, block: np.ndarray) -> "FeatureMatrix":
        names = tuple(names)
        clash = set(names) & set(self.columns)
        if clash:
            raise ParameterError(f"columns already present: {sorted(clash)}")
        return FeatureMatrix(
            values=np.hstack([self.values, block]),
            columns=self.columns + names,
            zone_index=self.zone_index,
            period_index=self.period_index,
        )

    def to_csv(self, path, provenance: dict | None = None) -> None:
        from .tableio import write_csv

        header = ["zone", "period"] + list(self.columns)
        rows = []
        for r in range(self.n_rows):
            rows.append(
                [int(self.zone_index[r]), int(self.period_index[r])]
                + [float(x) for x in self.values[r]]
            )
        write_csv(path, header, rows, provenance=provenance)


def load_compatibility_table() -> dict:
    """Fixed 6x6 land-use incompatibility table shipped with the package."""
    with resources.files("geoflow.data").joinpath("compatibility.json").open() as fh:
        table = json.load(fh)
    table["incompatibility"] = np.asarray(table["incompatibility"], dtype=float)
    return table


def shannon_entropy(shares: LandUseShares) -> float:
    """Normalized Shannon entropy over K categories, with 0*ln(0) = 0."""
    p = shares.shares
    k = p.size
    if k == 1:
        return 0.0
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum() / np.log(k))


def compatibility_score(shares: LandUseShares, dominance_threshold: float = 0.15) -> float:
    """One minus the mean pairwise incompatibility of the dominant categories.

    Dominant categories are those with share >= dominance_threshold (at least
    the single largest one). A mono-functional zone scores 1.
    """
    table = load_compatibility_table()
    incompat = table["incompatibility"]
    p = shares.shares
    if p.size != incompat.shape[0]:
        raise DomainError(
            f"expected {incompat.shape[0]} land-use categories, got {p.size}"
        )
    dominant = np.nonzero(p >= dominance_threshold)[0]
    if dominant.size == 0:
        dominant = np.array([int(np.argmax(p))])
    if dominant.size < 2:
        return 1.0
    pairs = [
        incompat[i, j]
        for a, i in enumerate(dominant)
        for j in dominant[a + 1 :]
    ]
    return float(1.0 - np.mean(pairs))


def lum_index(H: float, A: float, C: float) -> float:
    """Equal-weight average of entropy, accessibility, compatibility."""
    for name, x in (("H", H), ("A", A), ("C", C)):
        if not (0.0 <= x <= 1.0):
            raise DomainError(f"{name}={x} outside [0, 1]")
    return (H + A + C) / 3.0


def transit_accessibility(opportunities, costs, beta_t: float) -> float:
    """Cumulative opportunities discounted by exp(-beta_t * cost).

    `opportunities` and `costs` exclude the zone itself.
    """
    O = np.asarray(opportunities, dtype=float)
    c = np.asarray(costs, dtype=float)
    if O.shape != c.shape:
        raise DomainError("opportunities and costs must align")
    if (O < 0).any():
        raise DomainError("opportunities must be nonnegative")
    if (c < 0).any():
        raise DomainError("costs must be nonnegative")
    if beta_t <= 0:
        raise DomainError("beta_t must be positive")
    return float((O * np.exp(-beta_t * c)).sum())


def spatial_lag(prev_flows: np.ndarray, weights: SpatialWeights, zone: int) -> float:
    """Unweighted mean of the zone's neighbors' previous-period flows."""
    mask = weights.rows == zone
    if not mask.any():
        raise NoNeighborsError(f"zone {zone} has no neighbors")
    return float(np.mean(np.asarray(prev_flows, dtype=float)[weights.cols[mask]]))


def spatial_lag_matrix(flows: np.ndarray, weights: SpatialWeights) -> np.ndarray:
    """Neighbor-mean lag for all zones and periods t >= 1.

    Returns an (N, T-1) array: column t-1 holds the lag feature for period t.
    """
    counts = weights.neighbor_counts()
    if (counts == 0).any():
        isolated = int(np.nonzero(counts == 0)[0][0])
        raise NoNeighborsError(f"zone {isolated} has no neighbors")
    nbr_sum = np.zeros_like(flows)
    np.add.at(nbr_sum, weights.rows, flows[weights.cols])
    means = nbr_sum / counts[:, None]
    return means[:, :-1]


def assemble_features(
    panel: ZonePanel,
    mode: str,
    include_lag: bool = False,
    weights: SpatialWeights | None = None,
) -> FeatureMatrix:
    """Stack per-(zone, period) rows: static attributes, temporal controls,
    and optionally the neighbor-lag of the given mode's flows.

    Rows are ordered period-major (all zones for period 0, then period 1, ...).
    When the lag is included the first period is dropped.
    """
    if include_lag and weights is None:
        raise ParameterError("lag requested but no spatial weights given")
    n, T = panel.n_zones, panel.n_periods
    attrs = panel.attribute_matrix()
    tc = panel.temporal_controls
    start = 1 if include_lag else 0
    periods = np.arange(start, T)
    n_rows = n * periods.size

    zone_index = np.tile(np.arange(n), periods.size)
    period_index = np.repeat(periods, n)

    blocks = [attrs[zone_index]]
    blocks.append(tc.peak[period_index].astype(float)[:, None])
    blocks.append(tc.weekend[period_index].astype(float)[:, None])
    season = tc.season[period_index]
    dummies = np.zeros((n_rows, len(SEASON_DUMMY_COLUMNS)))
    for s in range(1, len(SEASONS)):
        dummies[:, s - 1] = (season == s).astype(float)
    blocks.append(dummies)
    columns = list(BASE_COLUMNS)

    if include_lag:
        lag = spatial_lag_matrix(panel.mode_flows(mode), weights)
        blocks.append(lag[zone_index, period_index - 1][:, None])
        columns.append(LAG_COLUMN)

    return FeatureMatrix(
        values=np.hstack(blocks),
        columns=tuple(columns),
        zone_index=zone_index,
        period_index=period_index,
    )


def augment_with_surfaces(X: FeatureMatrix, surface, include_intercept: bool = False) -> FeatureMatrix:
    """Append per-zone local-regression coefficient columns by zone lookup."""
    names = []
    cols = []
    for j, name in enumerate(surface.covariates):
        if name == "Intercept" and not include_intercept:
            continue
        names.append(f"beta_{name}")
        cols.append(surface.beta[:, j])
    if surface.beta.shape[0] <= X.zone_index.max():
        raise AlignmentError(
            f"surface covers {surface.beta.shape[0]} zones but feature rows "
            f"reference zone {int(X.zone_index.max())}"
        )
    block = np.column_stack(cols)[X.zone_index]
    try:
        return X.with_columns(names, block)
    except ParameterError as exc:
        raise AlignmentError(str(exc)) from exc
