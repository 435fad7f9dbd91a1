"""Shared domain types: zones, panels, spatial weights, splits, seeded RNG."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    DegenerateGeometryError,
    InsufficientHistoryError,
    ParameterError,
)

MODES = ("motor_vehicle", "public_transit", "active")
MODE_LABELS = {
    "motor_vehicle": "Motor Vehicle",
    "public_transit": "Public Transit",
    "active": "Active Modes",
}

TYPOLOGIES = (
    "CBD Peak",
    "Mixed Commercial",
    "Suburban",
    "Residential",
    "Commercial Periphery",
)

ATTRIBUTE_NAMES = (
    "LUM",
    "Entropy",
    "FAR",
    "EmpAcc",
    "GreenRatio",
    "RoadDens",
    "IntersectD",
    "TransitAcc",
    "StopDens",
    "ParkSupply",
    "PopDens",
    "DistCBD",
    "CarOwn",
    "Income",
)

# Pooled [min, max] bounds the generator clips to, keyed by attribute name.
ATTRIBUTE_BOUNDS = {
    "LUM": (0.031, 0.982),
    "Entropy": (0.010, 1.000),
    "FAR": (0.120, 8.750),
    "EmpAcc": (0.015, 0.915),
    "GreenRatio": (0.000, 0.621),
    "RoadDens": (1.22, 38.60),
    "IntersectD": (2.10, 112.40),
    "TransitAcc": (0.008, 0.887),
    "StopDens": (0.00, 14.80),
    "ParkSupply": (12.0, 601.0),
    "PopDens": (3.2, 348.6),
    "DistCBD": (0.18, 24.70),
    "CarOwn": (0.12, 0.94),
    "Income": (0.041, 0.987),
}

SEASONS = ("Winter", "Spring", "Summer", "Autumn")

# Hours counted as peak, inclusive reading of 07:00-09:00 / 16:00-19:00.
PEAK_HOURS = frozenset({7, 8, 9, 16, 17, 18, 19})

PERIOD_HOURS = 6
PERIODS_PER_DAY = 24 // PERIOD_HOURS


@dataclass(frozen=True)
class RngSeed:
    """64-bit seed from which every stochastic stage derives its stream."""

    seed: int

    def __post_init__(self):
        if not (0 <= int(self.seed) < 2**64):
            raise ParameterError(f"seed must be a 64-bit unsigned integer, got {self.seed}")

    def derive(self, *labels: object) -> np.random.Generator:
        """Deterministic child generator for a labeled purpose.

        Labels are hashed (not Python `hash`, which is salted) so the same
        (seed, labels) pair yields the same stream on every run and platform.
        """
        key = []
        for label in labels:
            digest = hashlib.sha256(str(label).encode("utf-8")).digest()
            key.append(int.from_bytes(digest[:8], "big"))
        ss = np.random.SeedSequence(entropy=int(self.seed), spawn_key=tuple(key))
        return np.random.Generator(np.random.PCG64(ss))


@dataclass(frozen=True)
class Zone:
    """One traffic analysis zone with a point centroid and static attributes."""

    id: int
    city: str
    centroid: tuple[float, float]
    typology: str
    attributes: np.ndarray  # aligned with ATTRIBUTE_NAMES

    def __post_init__(self):
        if self.typology not in TYPOLOGIES:
            raise ParameterError(f"unknown typology {self.typology!r}")
        u, v = self.centroid
        if not (0.0 <= u <= 1.0 and 0.0 <= v <= 1.0):
            raise ParameterError(f"centroid {self.centroid} outside the unit square")
        attrs = np.asarray(self.attributes, dtype=float)
        if attrs.shape != (len(ATTRIBUTE_NAMES),):
            raise ParameterError(
                f"expected {len(ATTRIBUTE_NAMES)} attributes, got shape {attrs.shape}"
            )
        attrs.flags.writeable = False
        object.__setattr__(self, "attributes", attrs)

    def attribute(self, name: str) -> float:
        return float(self.attributes[ATTRIBUTE_NAMES.index(name)])


@dataclass(frozen=True)
class TemporalControls:
    """Per-period flags: peak-hour, weekend, and season index into SEASONS."""

    peak: np.ndarray
    weekend: np.ndarray
    season: np.ndarray

    def __post_init__(self):
        for name in ("peak", "weekend", "season"):
            arr = np.asarray(getattr(self, name))
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)


@dataclass(frozen=True)
class ZonePanel:
    """N zones x T periods x 3 modes of [0,1]-normalized flows."""

    zones: tuple[Zone, ...]
    timestamps: np.ndarray  # hours since panel start, constant step
    flows: np.ndarray  # (N, T, len(MODES))
    temporal_controls: TemporalControls
    normalization: dict  # city -> mode -> (min, max) used for scaling
    modes: tuple[str, ...] = MODES

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=np.int64)
        if ts.ndim != 1 or ts.size < 2:
            raise ParameterError("timestamps must be a 1-D index with >= 2 entries")
        steps = np.diff(ts)
        if not (steps > 0).all() or not (steps == steps[0]).all():
            raise ParameterError("timestamps must be strictly increasing with a constant step")
        flows = np.asarray(self.flows, dtype=float)
        if flows.shape != (len(self.zones), ts.size, len(self.modes)):
            raise ParameterError(
                f"flows shape {flows.shape} does not match (N={len(self.zones)}, "
                f"T={ts.size}, modes={len(self.modes)})"
            )
        if flows.min() < 0.0 or flows.max() > 1.0:
            raise ParameterError("flows must lie in [0, 1]")
        ts.flags.writeable = False
        flows.flags.writeable = False
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "flows", flows)
        object.__setattr__(self, "zones", tuple(self.zones))

    @property
    def n_zones(self) -> int:
        return len(self.zones)

    @property
    def n_periods(self) -> int:
        return int(self.timestamps.size)

    @property
    def cities(self) -> tuple[str, ...]:
        seen: list[str] = []
        for z in self.zones:
            if z.city not in seen:
                seen.append(z.city)
        return tuple(seen)

    def centroids(self) -> np.ndarray:
        return np.array([z.centroid for z in self.zones], dtype=float)

    def attribute_matrix(self) -> np.ndarray:
        return np.vstack([z.attributes for z in self.zones])

    def mode_flows(self, mode: str) -> np.ndarray:
        return self.flows[:, :, self.modes.index(mode)]

    def hour_of_day(self) -> np.ndarray:
        return (self.timestamps % 24).astype(int)

    def zone_indices(self, city: str) -> np.ndarray:
        return np.array([i for i, z in enumerate(self.zones) if z.city == city], dtype=int)


@dataclass(frozen=True)
class SpatialWeights:
    """Sparse zone-zone weights; no self links, optionally row-standardized."""

    n: int
    rows: np.ndarray
    cols: np.ndarray
    weights: np.ndarray
    row_standardized: bool = False

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.int64)
        cols = np.asarray(self.cols, dtype=np.int64)
        weights = np.asarray(self.weights, dtype=float)
        if not (rows.shape == cols.shape == weights.shape):
            raise ParameterError("rows, cols, weights must share one shape")
        if (rows == cols).any():
            raise ParameterError("self-weights are not allowed")
        if (weights <= 0).any():
            raise ParameterError("weights must be strictly positive")
        for arr, name in ((rows, "rows"), (cols, "cols")):
            if arr.size and (arr.min() < 0 or arr.max() >= self.n):
                raise ParameterError(f"{name} reference zones outside 0..{self.n - 1}")
            arr.flags.writeable = False
        weights.flags.writeable = False
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "cols", cols)
        object.__setattr__(self, "weights", weights)

    def dense(self) -> np.ndarray:
        mat = np.zeros((self.n, self.n))
        mat[self.rows, self.cols] = self.weights
        return mat

    def neighbor_counts(self) -> np.ndarray:
        return np.bincount(self.rows, minlength=self.n)

    def row_standardize(self) -> "SpatialWeights":
        """Scale each nonempty row to sum to one. Idempotent."""
        sums = np.bincount(self.rows, weights=self.weights, minlength=self.n)
        scaled = self.weights / sums[self.rows]
        return replace(self, weights=scaled, row_standardized=True)

    def lag(self, values: np.ndarray) -> np.ndarray:
        """Row-weighted neighbor aggregate W @ values (matrix-free)."""
        values = np.asarray(values, dtype=float)
        out = np.zeros(self.n)
        np.add.at(out, self.rows, self.weights * values[self.cols])
        return out


@dataclass(frozen=True)
class SplitSpec:
    """Contiguous, ordered period-index ranges: train < validation < test."""

    train_range: tuple[int, int]
    validation_range: tuple[int, int]
    test_range: tuple[int, int]

    def __post_init__(self):
        tr, va, te = self.train_range, self.validation_range, self.test_range
        for lo, hi in (tr, va, te):
            if hi < lo:
                raise ParameterError(f"range ({lo}, {hi}) is reversed")
        if not (tr[1] == va[0] and va[1] == te[0]):
            raise ParameterError("ranges must be contiguous and ordered train < val < test")

    @property
    def ranges(self):
        return {
            "train": self.train_range,
            "validation": self.validation_range,
            "test": self.test_range,
        }

    def indices(self, part: str) -> np.ndarray:
        lo, hi = self.ranges[part]
        return np.arange(lo, hi)


def build_knn_weights(
    zones, k: int, row_standardize: bool = True
) -> SpatialWeights:
    """Symmetric k-nearest-neighbor weights over zone centroids.

    An edge is kept if it appears in either direction, so every zone ends up
    with between k and N-1 neighbors. Binary weights before standardization.
    """
    n = len(zones)
    if k >= n:
        raise ParameterError(f"k={k} must be smaller than the zone count {n}")
    if k < 1:
        raise ParameterError("k must be positive")
    pts = np.array([z.centroid for z in zones], dtype=float)
    d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
    off_diag = d2 + np.diag(np.full(n, np.inf))
    if np.isclose(off_diag.min(), 0.0):
        i, j = np.unravel_index(np.argmin(off_diag), off_diag.shape)
        raise DegenerateGeometryError(f"zones {i} and {j} share a centroid")
    order = np.argsort(off_diag, axis=1, kind="stable")[:, :k]
    adj = np.zeros((n, n), dtype=bool)
    adj[np.repeat(np.arange(n), k), order.ravel()] = True
    adj |= adj.T
    rows, cols = np.nonzero(adj)
    weights = SpatialWeights(
        n=n, rows=rows, cols=cols, weights=np.ones(rows.size)
    )
    return weights.row_standardize() if row_standardize else weights


def slice_panel(panel: ZonePanel, zone_indices=None, period_range=None) -> ZonePanel:
    """Sub-panel over a zone subset and/or a contiguous period range.

    Zones are renumbered 0..n-1; building the slice first is how callers
    guarantee that downstream code cannot touch excluded periods.
    """
    zone_indices = (
        np.arange(panel.n_zones) if zone_indices is None else np.asarray(zone_indices, dtype=int)
    )
    lo, hi = (0, panel.n_periods) if period_range is None else period_range
    zones = []
    for new_id, idx in enumerate(zone_indices):
        z = panel.zones[int(idx)]
        zones.append(
            Zone(
                id=new_id,
                city=z.city,
                centroid=z.centroid,
                typology=z.typology,
                attributes=z.attributes.copy(),
            )
        )
    tc = panel.temporal_controls
    return ZonePanel(
        zones=tuple(zones),
        timestamps=panel.timestamps[lo:hi].copy(),
        flows=panel.flows[zone_indices, lo:hi, :].copy(),
        temporal_controls=TemporalControls(
            peak=tc.peak[lo:hi].copy(),
            weekend=tc.weekend[lo:hi].copy(),
            season=tc.season[lo:hi].copy(),
        ),
        normalization=panel.normalization,
        modes=panel.modes,
    )


DEFAULT_SPLIT_FRACTIONS = (0.85, 0.077, 0.077)


def split_panel(
    panel_or_T,
    fractions=DEFAULT_SPLIT_FRACTIONS,
    min_range: int = 12,
) -> SplitSpec:
    """Chronological train/validation/test split of the period index.

    Boundaries snap to whole periods: train and validation lengths round
    down, the remainder goes to test. Accepts a ZonePanel or a period count.
    """
    T = panel_or_T.n_periods if isinstance(panel_or_T, ZonePanel) else int(panel_or_T)
    fracs = tuple(float(f) for f in fractions)
    if len(fracs) != 3 or any(f < 0 for f in fracs):
        raise ParameterError("fractions must be three nonnegative values")
    # The canonical 85 / 7.7 / 7.7 split sums to 1.004 because the published
    # percentages are rounded; test takes the remainder, so a small excess
    # is tolerated.
    if abs(sum(fracs) - 1.0) > 5e-3:
        raise ParameterError(f"fractions must sum to 1, got {sum(fracs)}")
    n_train = int(T * fracs[0])
    n_val = int(T * fracs[1])
    n_test = T - n_train - n_val
    for name, length in (("train", n_train), ("validation", n_val), ("test", n_test)):
        if length < min_range:
            raise InsufficientHistoryError(
                f"{name} range has {length} periods, fewer than the "
                f"required window of {min_range}"
            )
    return SplitSpec(
        train_range=(0, n_train),
        validation_range=(n_train, n_train + n_val),
        test_range=(n_train + n_val, T),
    )
