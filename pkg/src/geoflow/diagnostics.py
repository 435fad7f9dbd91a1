"""Evaluation metrics, residual spatial autocorrelation, and forecast tests."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .core import RngSeed, SpatialWeights
from .errors import (
    AlignmentError,
    DegenerateTestError,
    DegenerateVarianceError,
    ParameterError,
)

MAPE_FLOOR = 1e-3  # actuals below this are excluded from the MAPE sum


@dataclass(frozen=True)
class MetricBundle:
    rmse: float
    mape_percent: float
    r_squared: float
    mode: str = ""
    model: str = ""
    hourly_mape: dict = field(default_factory=dict)  # hour -> MAPE percent
    mape_excluded: int = 0

    def hourly_profile(self) -> list:
        """24-value profile; 6-hour bins are spread over their hours."""
        return [self.hourly_mape.get(h, float("nan")) for h in range(24)]


@dataclass(frozen=True)
class MoranResult:
    I: float
    expected_I: float
    p_value: float
    permutations: int
    local_i: np.ndarray
    quadrant: tuple[str, ...]  # per-zone HH/LL/HL/LH
    z: np.ndarray
    z_lag: np.ndarray


@dataclass(frozen=True)
class DMResult:
    statistic: float
    p_value: float
    loss: str
    hac_lags: int


def compute_metrics(actual, predicted, timestamps=None, mode: str = "", model: str = "") -> MetricBundle:
    """RMSE, MAPE (percent), pooled R-squared, and an hour-of-day MAPE profile.

    `timestamps` are hours since panel start (one per observation); when
    omitted the hourly profile is empty.
    """
    a = np.asarray(actual, dtype=float).ravel()
    p = np.asarray(predicted, dtype=float).ravel()
    if a.shape != p.shape:
        raise AlignmentError(f"actual {a.shape} and predicted {p.shape} differ")
    if a.size < 2:
        raise ParameterError("need at least two observations")
    err = a - p
    rmse = float(np.sqrt(np.mean(err**2)))
    ss_tot = float(((a - a.mean()) ** 2).sum())
    r2 = 1.0 - float((err**2).sum()) / ss_tot if ss_tot > 0 else float("nan")

    ok = np.abs(a) >= MAPE_FLOOR
    excluded = int((~ok).sum())
    ape = np.abs(err[ok] / a[ok]) * 100.0
    mape = float(ape.mean()) if ape.size else float("nan")

    hourly: dict[int, float] = {}
    if timestamps is not None:
        ts = np.asarray(timestamps).ravel()
        if ts.shape != a.shape:
            raise AlignmentError("timestamps must align with the observations")
        hours = (ts % 24).astype(int)
        bin_starts = np.unique(hours)
        from .core import PERIOD_HOURS

        for h0 in bin_starts:
            sel = (hours == h0) & ok
            if sel.any():
                val = float((np.abs(err[sel] / a[sel]) * 100.0).mean())
                for h in range(int(h0), int(h0) + PERIOD_HOURS):
                    hourly[h % 24] = val
    return MetricBundle(
        rmse=rmse,
        mape_percent=mape,
        r_squared=r2,
        mode=mode,
        model=model,
        hourly_mape=hourly,
        mape_excluded=excluded,
    )


QUADRANTS = ("HH", "LL", "HL", "LH")


def morans_i(
    values,
    weights: SpatialWeights,
    permutations: int = 999,
    seed: RngSeed | int = 0,
) -> MoranResult:
    """Global Moran's I with a permutation p-value and LISA quadrants.

    I = (n / S0) * (sum_ij w_ij z_i z_j) / (sum_i z_i^2) on centered values;
    the permutation test shuffles all values jointly.
    """
    x = np.asarray(values, dtype=float).ravel()
    n = x.size
    if n < 3:
        raise ParameterError("need at least 3 zones")
    if weights.n != n:
        raise AlignmentError(f"weights cover {weights.n} zones, values {n}")
    z = x - x.mean()
    denom = float((z**2).sum())
    if denom == 0.0:
        raise DegenerateVarianceError("values are constant")
    W = weights.dense()
    s0 = float(W.sum())
    z_lag = W @ z
    I = (n / s0) * float(z @ z_lag) / denom

    rng = (seed if isinstance(seed, RngSeed) else RngSeed(seed)).derive("morans-i")
    if permutations > 0:
        perm_cols = np.empty((n, permutations))
        for r in range(permutations):
            perm_cols[:, r] = rng.permutation(z)
        lagged = W @ perm_cols
        perm_I = (n / s0) * np.einsum("ir,ir->r", perm_cols, lagged) / denom
        extreme = int((perm_I >= I).sum()) if I >= 0 else int((perm_I <= I).sum())
        p_value = (extreme + 1) / (permutations + 1)
    else:
        p_value = float("nan")

    m2 = denom / n
    local = (z / m2) * z_lag
    quadrant = tuple(
        ("HH" if zl >= 0 else "HL") if zi >= 0 else ("LH" if zl >= 0 else "LL")
        for zi, zl in zip(z, z_lag)
    )
    return MoranResult(
        I=float(I),
        expected_I=-1.0 / (n - 1),
        p_value=float(p_value),
        permutations=permutations,
        local_i=local,
        quadrant=quadrant,
        z=z,
        z_lag=z_lag,
    )


def diebold_mariano(errors_a, errors_b, loss: str = "squared", hac_lags: int | None = None) -> DMResult:
    """Equal-predictive-accuracy test with a Bartlett-kernel HAC variance.

    The statistic is mean(d) / sqrt(hac_var / n) for the loss differential
    d_t = L(e_a,t) - L(e_b,t); two-sided p from the standard normal.
    """
    ea = np.asarray(errors_a, dtype=float).ravel()
    eb = np.asarray(errors_b, dtype=float).ravel()
    if ea.shape != eb.shape:
        raise AlignmentError("error series must align")
    n = ea.size
    if loss == "squared":
        d = ea**2 - eb**2
    elif loss == "absolute":
        d = np.abs(ea) - np.abs(eb)
    else:
        raise ParameterError(f"unknown loss {loss!r}")
    if hac_lags is None:
        hac_lags = int(np.floor(n ** (1.0 / 3.0)))
    if n <= hac_lags + 2:
        raise ParameterError(f"series length {n} too short for hac_lags={hac_lags}")
    dc = d - d.mean()
    gamma0 = float((dc @ dc) / n)
    var = gamma0
    for lag in range(1, hac_lags + 1):
        cov = float((dc[lag:] @ dc[:-lag]) / n)
        var += 2.0 * (1.0 - lag / (hac_lags + 1)) * cov
    if var <= 0 or gamma0 == 0.0:
        raise DegenerateTestError("zero loss-differential variance; forecasts identical")
    stat = float(d.mean() / np.sqrt(var / n))
    p = 2.0 * float(stats.norm.sf(abs(stat)))
    return DMResult(statistic=stat, p_value=p, loss=loss, hac_lags=hac_lags)
