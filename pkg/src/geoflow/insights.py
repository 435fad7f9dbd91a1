"""Explainability and structure discovery: Shapley attribution, density
clustering with a silhouette-scored radius sweep, and stratified land-use
regressions."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .core import ATTRIBUTE_NAMES, MODES, PERIODS_PER_DAY, RngSeed, TYPOLOGIES, ZonePanel
from .errors import (
    InsufficientStratumError,
    ParameterError,
    SelectionError,
    UndefinedScoreError,
)
from .learners.ols import fit_ols

MAX_EXACT_FEATURES = 12

NOISE = -1


@dataclass(frozen=True, eq=False)
class ShapReport:
    phi0: np.ndarray  # per instance
    phi: np.ndarray  # (instances, attributed features)
    feature_names: tuple[str, ...]
    mean_abs: dict
    method: str
    background: np.ndarray
    samples: int = 0


@dataclass(frozen=True, eq=False)
class ClusterResult:
    labels: np.ndarray  # cluster id per point, NOISE for noise
    k: int
    eps: float
    min_pts: int
    silhouette: float
    profiles: dict = field(default_factory=dict)


def _shapley_exact_one(x, background, attributed, batch_eval):
    """Exact Shapley values by coalition enumeration over `attributed`."""
    p = len(attributed)
    n_coal = 1 << p
    vecs = np.tile(x, (n_coal, 1))
    for pos, feat in enumerate(attributed):
        absent = (np.arange(n_coal) >> pos) & 1 == 0
        vecs[absent, feat] = background[feat]
    vals = batch_eval(vecs)
    sizes = np.array([bin(m).count("1") for m in range(n_coal)])
    # weight for adding to a coalition of size s: s!(p-s-1)!/p!
    from math import factorial

    w = np.array(
        [factorial(s) * factorial(p - s - 1) / factorial(p) for s in range(p)]
    )
    phi = np.zeros(p)
    for pos in range(p):
        bit = 1 << pos
        without = np.nonzero((np.arange(n_coal) & bit) == 0)[0]
        gains = vals[without | bit] - vals[without]
        phi[pos] = float((w[sizes[without]] * gains).sum())
    return float(vals[0]), phi


def _shapley_sampled_one(x, background, attributed, batch_eval, samples, rng):
    """Permutation-sampling estimator; efficiency holds exactly because each
    permutation's marginal gains telescope from the background to x."""
    p = len(attributed)
    phi = np.zeros(p)
    base = x.copy()
    base[attributed] = background[attributed]
    for _ in range(samples):
        order = rng.permutation(p)
        vecs = np.tile(base, (p + 1, 1))
        current = base.copy()
        for step, pos in enumerate(order, start=1):
            current[attributed[pos]] = x[attributed[pos]]
            vecs[step] = current
        vals = batch_eval(vecs)
        gains = np.diff(vals)
        phi[order] += gains
    phi /= samples
    base_val = batch_eval(base[None, :])[0]
    return float(base_val), phi


def shapley_attribution(
    predict_fn,
    instances: np.ndarray,
    background: np.ndarray,
    feature_names=None,
    frozen=(),
    max_exact_features: int = MAX_EXACT_FEATURES,
    samples: int = 16,
    seed: RngSeed | int = 0,
) -> ShapReport:
    """Additive per-feature decomposition of each prediction.

    Feature "absence" substitutes the background value. Exact coalition
    enumeration when the attributed feature count is at most
    `max_exact_features`, otherwise a permutation-sampling estimator.
    Features listed in `frozen` stay at their observed values and receive
    no attribution (their effect lives in the per-instance base value).
    """
    X = np.atleast_2d(np.asarray(instances, dtype=float))
    background = np.asarray(background, dtype=float).ravel()
    n, p_total = X.shape
    if background.size != p_total:
        raise ParameterError("background must match the feature dimension")
    names = tuple(feature_names) if feature_names is not None else tuple(
        f"x{j}" for j in range(p_total)
    )
    frozen_idx = {names.index(f) if isinstance(f, str) else int(f) for f in frozen}
    attributed = np.array([j for j in range(p_total) if j not in frozen_idx])
    p = attributed.size
    if p < 1:
        raise ParameterError("at least one attributed feature required")
    exact = p <= max_exact_features
    if not exact and samples < p:
        raise ParameterError(
            f"sampled mode needs samples >= {p} attributed features, got {samples}"
        )

    rng_master = seed if isinstance(seed, RngSeed) else RngSeed(seed)
    phi0 = np.empty(n)
    phi = np.empty((n, p))
    for i in range(n):
        if exact:
            phi0[i], phi[i] = _shapley_exact_one(
                X[i], background, attributed, predict_fn
            )
        else:
            rng = rng_master.derive("shapley", i)
            phi0[i], phi[i] = _shapley_sampled_one(
                X[i], background, attributed, predict_fn, samples, rng
            )
    attributed_names = tuple(names[j] for j in attributed)
    mean_abs = {
        name: float(np.abs(phi[:, j]).mean()) for j, name in enumerate(attributed_names)
    }
    return ShapReport(
        phi0=phi0,
        phi=phi,
        feature_names=attributed_names,
        mean_abs=mean_abs,
        method="exact" if exact else "sampled",
        background=background,
        samples=0 if exact else samples,
    )


def dbscan(points: np.ndarray, eps: float, min_pts: int) -> ClusterResult:
    """Density-based clustering: core points have >= min_pts neighbors
    within eps (self included); clusters are maximal density-connected sets;
    border points attach to the first core cluster that reaches them."""
    if eps <= 0:
        raise ParameterError("eps must be positive")
    if min_pts < 2:
        raise ParameterError("min_pts must be >= 2")
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    n = pts.shape[0]
    d = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2))
    within = d <= eps
    counts = within.sum(axis=1)
    core = counts >= min_pts
    labels = np.full(n, NOISE, dtype=int)
    cluster = 0
    for start in range(n):
        if not core[start] or labels[start] != NOISE:
            continue
        queue = [start]
        labels[start] = cluster
        while queue:
            point = queue.pop(0)
            if not core[point]:
                continue
            for nbr in np.nonzero(within[point])[0]:
                if labels[nbr] == NOISE:
                    labels[nbr] = cluster
                    queue.append(nbr)
        cluster += 1
    return ClusterResult(
        labels=labels,
        k=cluster,
        eps=float(eps),
        min_pts=int(min_pts),
        silhouette=float("nan"),
    )


def silhouette(points: np.ndarray, labels: np.ndarray) -> float:
    """Mean silhouette over non-noise points; singleton clusters score 0;
    degenerate zero distances score 0."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    labels = np.asarray(labels, dtype=int)
    keep = labels != NOISE
    ids = sorted(set(labels[keep].tolist()))
    if len(ids) < 2:
        raise UndefinedScoreError("silhouette needs at least two clusters")
    d = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2))
    scores = []
    for i in np.nonzero(keep)[0]:
        own = labels[i]
        same = (labels == own) & (np.arange(len(labels)) != i)
        if not same.any():
            scores.append(0.0)
            continue
        a = float(d[i][same].mean())
        b = min(
            float(d[i][labels == other].mean()) for other in ids if other != own
        )
        denom = max(a, b)
        scores.append((b - a) / denom if denom > 0 else 0.0)
    return float(np.mean(scores))


def eps_sweep(points: np.ndarray, min_pts: int, eps_grid) -> tuple[list, ClusterResult]:
    """Run DBSCAN per eps; record realized k and silhouette; select the
    radius maximizing silhouette among runs with k >= 2 (ties: smaller k,
    then smaller eps)."""
    eps_grid = list(eps_grid)
    if not eps_grid:
        raise ParameterError("eps grid must be nonempty")
    table = []
    best = None
    for eps in eps_grid:
        result = dbscan(points, eps, min_pts)
        if result.k >= 2:
            score = silhouette(points, result.labels)
        else:
            score = float("nan")
        table.append({"eps": float(eps), "k": result.k, "silhouette": score})
        if result.k >= 2:
            key = (-score, result.k, eps)
            if best is None or key < best[0]:
                best = (key, ClusterResult(
                    labels=result.labels, k=result.k, eps=result.eps,
                    min_pts=result.min_pts, silhouette=score,
                ))
    if best is None:
        raise SelectionError("no radius in the grid produced >= 2 clusters")
    return table, best[1]


def default_eps_grid(points: np.ndarray, size: int = 30) -> np.ndarray:
    """Log-spaced radii between the 2nd and 98th percentile of pairwise
    distances."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    d = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2))
    upper = d[np.triu_indices_from(d, k=1)]
    lo, hi = np.percentile(upper, [2.0, 98.0])
    return np.geomspace(max(lo, 1e-9), hi, size)


def build_cluster_features(panel: ZonePanel) -> tuple[np.ndarray, tuple[str, ...]]:
    """Per-zone clustering vector: the relative diurnal profile (mean flow
    per 6-hour slot per mode, divided by the zone's own mode mean) plus the
    five cluster-profile attributes, each column standardized. Dividing out
    the zone level keeps the profile block about the *shape* of demand, so
    the typology signal is not drowned by within-type level variation."""
    n = panel.n_zones
    T = panel.n_periods
    days = T // PERIODS_PER_DAY
    prof = panel.flows[:, : days * PERIODS_PER_DAY, :].reshape(
        n, days, PERIODS_PER_DAY, len(panel.modes)
    ).mean(axis=1)
    prof = prof / np.maximum(prof.mean(axis=1, keepdims=True), 1e-9)
    prof = prof.reshape(n, PERIODS_PER_DAY * len(panel.modes))
    attr_names = ("LUM", "FAR", "StopDens", "PopDens", "DistCBD")
    attrs = panel.attribute_matrix()
    att = np.column_stack([attrs[:, ATTRIBUTE_NAMES.index(a)] for a in attr_names])
    feat = np.hstack([prof, att])
    sd = feat.std(axis=0)
    sd[sd == 0] = 1.0
    feat = (feat - feat.mean(axis=0)) / sd
    names = tuple(
        f"slot{s}_{m}" for s in range(PERIODS_PER_DAY) for m in panel.modes
    ) + attr_names
    return feat, names


def cluster_profiles(panel: ZonePanel, labels: np.ndarray) -> list[dict]:
    """Per-cluster attribute means, zone count, slot profiles, and the mean
    morning-peak flow (the panel's peak bins)."""
    attrs = panel.attribute_matrix()
    tc = panel.temporal_controls
    peak_cols = tc.peak & ~tc.weekend
    rows = []
    for cid in sorted(set(labels.tolist())):
        mask = labels == cid
        row = {
            "cluster": int(cid),
            "n": int(mask.sum()),
        }
        for a in ("LUM", "FAR", "StopDens", "PopDens", "DistCBD"):
            row[a] = float(attrs[mask, ATTRIBUTE_NAMES.index(a)].mean())
        for m_idx, mode in enumerate(panel.modes):
            row[f"am_peak_{mode}"] = float(
                panel.flows[mask][:, peak_cols, m_idx].mean()
            )
            slot_means = panel.flows[mask][:, :, m_idx].reshape(
                mask.sum(), -1, PERIODS_PER_DAY
            ).mean(axis=(0, 1))
            for s, v in enumerate(slot_means):
                row[f"slot{s}_{mode}"] = float(v)
        rows.append(row)
    return rows


STRATA = {
    "CBD Peak": "Commercial Core",
    "Mixed Commercial": "Mixed-Use",
    "Residential": "Residential",
}

STRATUM_CONTROLS = ("PopDens", "EmpAcc", "DistCBD")


def significance_stars(p: float) -> str:
    if p < 0.001:
        return "***"
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    return ""


def stratified_lum_regression(panel: ZonePanel, typologies=None) -> list[dict]:
    """Per zone-type, per mode: OLS of period-mean flow on LUM with density,
    employment-access, and CBD-distance controls; HC3 errors and stars."""
    if typologies is None:
        typologies = [z.typology for z in panel.zones]
    typologies = np.asarray(typologies)
    attrs = panel.attribute_matrix()
    cols = ["LUM"] + list(STRATUM_CONTROLS)
    X_all = np.column_stack([attrs[:, ATTRIBUTE_NAMES.index(c)] for c in cols])
    rows = []
    for typ, stratum_name in STRATA.items():
        mask = typologies == typ
        n_s = int(mask.sum())
        if n_s < X_all.shape[1] + 2:
            raise InsufficientStratumError(
                f"stratum {stratum_name} has {n_s} zones, needs at least "
                f"{X_all.shape[1] + 2}"
            )
        for m_idx, mode in enumerate(panel.modes):
            y = panel.flows[mask, :, m_idx].mean(axis=1)
            ols = fit_ols(X_all[mask], y, columns=cols)
            df = n_s - X_all.shape[1] - 1
            j = ols.columns.index("LUM") + 1  # intercept first
            t_val = ols.coef[j] / ols.hc3_se[j] if ols.hc3_se[j] > 0 else 0.0
            p_val = float(2 * stats.t.sf(abs(t_val), df))
            resid = y - ols.predict_raw(X_all[mask])
            ss_tot = float(((y - y.mean()) ** 2).sum())
            r2 = 1.0 - float((resid**2).sum()) / ss_tot if ss_tot > 0 else float("nan")
            adj_r2 = 1.0 - (1.0 - r2) * (n_s - 1) / df if df > 0 else float("nan")
            rows.append(
                {
                    "zone_type": stratum_name,
                    "mode": mode,
                    "lum_coef": float(ols.coef[j]),
                    "hc3_se": float(ols.hc3_se[j]),
                    "p_value": p_val,
                    "stars": significance_stars(p_val),
                    "adj_r2": adj_r2,
                    "n": n_s,
                }
            )
    return rows
