"""Geographically weighted regression and its multiscale extension.

Local weighted least squares runs on per-zone sufficient statistics
(zone-level Gram matrices), so designs whose rows repeat zones (panel data)
cost the same linear algebra as one-row-per-zone designs. Bandwidths are
selected by golden-section search on the corrected Akaike criterion; the
multiscale fit backfits one covariate at a time, each with its own bandwidth.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats

from .errors import NonConvergenceError, ParameterError, RankDeficiencyError
from .tableio import read_csv, write_csv

INTERCEPT = "Intercept"

# Exact backfitting hat-matrix chains are kept up to this many observations.
HAT_CHAIN_LIMIT = 2000


@dataclass(frozen=True)
class KernelSpec:
    """Spatial kernel: bisquare or gaussian, adaptive (neighbor-count
    bandwidth) or fixed (distance bandwidth)."""

    kind: str = "bisquare"
    adaptive: bool = True

    def __post_init__(self):
        if self.kind not in ("bisquare", "gaussian"):
            raise ParameterError(f"unknown kernel kind {self.kind!r}")

    def weights(self, dist: np.ndarray, bandwidth) -> np.ndarray:
        """Weight matrix over (target zone, source zone) distances."""
        if self.adaptive:
            nn = int(round(bandwidth))
            if nn < 2:
                raise ParameterError("adaptive bandwidth must be >= 2 neighbors")
            nn = min(nn, dist.shape[1])
            h = np.sort(dist, axis=1)[:, nn - 1][:, None]
            h = np.maximum(h, 1e-12)
        else:
            if bandwidth <= 0:
                raise ParameterError("fixed bandwidth must be positive")
            h = float(bandwidth)
        ratio = dist / h
        if self.kind == "bisquare":
            w = np.where(ratio < 1.0, (1.0 - ratio**2) ** 2, 0.0)
        else:
            w = np.exp(-0.5 * ratio**2)
        return w


@dataclass(frozen=True)
class CoefficientSurface:
    """Per-zone local coefficients with bandwidths and pseudo-t values."""

    covariates: tuple[str, ...]
    beta: np.ndarray  # (N, P)
    bandwidths: np.ndarray  # (P,) one per covariate (equal for plain GWR)
    pseudo_t: np.ndarray  # (N, P)
    aicc: float
    effective_df: float
    kernel: KernelSpec
    rss: float
    aicc_approximate: bool = False
    rss_trace: tuple = ()
    bandwidth_warning: bool = False

    def predict(self, X: np.ndarray, zone_index: np.ndarray) -> np.ndarray:
        """Row-wise sum of local coefficients times covariate values.

        X columns must align with `covariates` (the intercept column, when
        present in `covariates`, is supplied automatically).
        """
        X = np.asarray(X, dtype=float)
        zone_index = np.asarray(zone_index, dtype=int)
        names = [c for c in self.covariates if c != INTERCEPT]
        if X.shape[1] != len(names):
            raise ParameterError(
                f"X has {X.shape[1]} columns, surface expects {len(names)}"
            )
        design = _with_intercept(X, self.covariates)
        return np.einsum("rp,rp->r", self.beta[zone_index], design)

    def to_csv(self, path, centroids=None, alpha: float = 0.05, provenance=None, extra=None):
        mask, _ = significance_mask(self, alpha)
        header = ["zone", "u", "v", "covariate", "bandwidth", "beta", "pseudo_t", "significant"]
        if extra:
            header = list(extra.keys()) + header
        rows = []
        n = self.beta.shape[0]
        for j, name in enumerate(self.covariates):
            for i in range(n):
                u, v = (centroids[i] if centroids is not None else (float("nan"),) * 2)
                row = [
                    i, float(u), float(v), name, float(self.bandwidths[j]),
                    float(self.beta[i, j]), float(self.pseudo_t[i, j]), int(mask[i, j]),
                ]
                if extra:
                    row = list(extra.values()) + row
                rows.append(row)
        write_csv(path, header, rows, provenance=provenance)


def read_surface_csv(path) -> dict:
    """Round-trip reader for CoefficientSurface.to_csv output.

    Returns covariate names, the beta/pseudo-t matrices, and bandwidths.
    """
    _, header, rows = read_csv(path)
    col = {name: idx for idx, name in enumerate(header)}
    covariates: list[str] = []
    for row in rows:
        name = row[col["covariate"]]
        if name not in covariates:
            covariates.append(name)
    n = 1 + max(int(row[col["zone"]]) for row in rows)
    beta = np.zeros((n, len(covariates)))
    pseudo_t = np.zeros((n, len(covariates)))
    bandwidths = np.zeros(len(covariates))
    for row in rows:
        i = int(row[col["zone"]])
        j = covariates.index(row[col["covariate"]])
        beta[i, j] = float(row[col["beta"]])
        pseudo_t[i, j] = float(row[col["pseudo_t"]])
        bandwidths[j] = float(row[col["bandwidth"]])
    return {
        "covariates": tuple(covariates),
        "beta": beta,
        "pseudo_t": pseudo_t,
        "bandwidths": bandwidths,
    }


@dataclass(frozen=True)
class BandwidthResult:
    bandwidth: float
    aicc: float
    trace: tuple  # (bandwidth, aicc) pairs in evaluation order
    non_unimodal: bool = False


def _with_intercept(X: np.ndarray, covariates) -> np.ndarray:
    if INTERCEPT in covariates:
        return np.column_stack([np.ones(X.shape[0]), X])
    return X


def _zone_stats(X: np.ndarray, y: np.ndarray, zone_index: np.ndarray, n_zones: int):
    """Per-zone Gram matrices and moment vectors, accumulated pairwise so
    panel-sized designs never materialize row-wise outer products."""
    P = X.shape[1]
    gram = np.empty((n_zones, P, P))
    moment = np.empty((n_zones, P))
    for p in range(P):
        moment[:, p] = np.bincount(zone_index, weights=X[:, p] * y, minlength=n_zones)
        for q in range(p, P):
            acc = np.bincount(zone_index, weights=X[:, p] * X[:, q], minlength=n_zones)
            gram[:, p, q] = acc
            gram[:, q, p] = acc
    return gram, moment


class _LocalDesign:
    """Shared geometry and sufficient statistics for one (X, y) problem."""

    def __init__(self, X, y, centroids, zone_index, covariates, kernel, dist=None):
        self.X = np.asarray(X, dtype=float)
        self.y = np.asarray(y, dtype=float).ravel()
        self.centroids = np.asarray(centroids, dtype=float)
        self.kernel = kernel
        self.covariates = tuple(covariates)
        self.n_zones = self.centroids.shape[0]
        if zone_index is None:
            if self.X.shape[0] != self.n_zones:
                raise ParameterError("zone_index required when rows != zones")
            zone_index = np.arange(self.n_zones)
        self.zone_index = np.asarray(zone_index, dtype=int)
        if self.X.shape[0] != self.y.size or self.X.shape[0] != self.zone_index.size:
            raise ParameterError("X, y, zone_index must share the row count")
        if dist is None:
            diff = self.centroids[:, None, :] - self.centroids[None, :, :]
            dist = np.sqrt((diff**2).sum(axis=2))
        self.dist = dist
        self.gram, self.moment = _zone_stats(self.X, self.y, self.zone_index, self.n_zones)
        # bandwidth-keyed caches of response-independent quantities
        self._dsort = None
        self.weight_cache: dict = {}
        self._stat_cache: dict = {}

    def _bw_key(self, bandwidth):
        return int(round(bandwidth)) if self.kernel.adaptive else float(bandwidth)

    def kernel_matrix(self, bandwidth) -> np.ndarray:
        key = self._bw_key(bandwidth)
        Wk = self.weight_cache.get(key)
        if Wk is None:
            if self.kernel.adaptive:
                if self._dsort is None:
                    self._dsort = np.sort(self.dist, axis=1)
                nn = min(max(int(round(bandwidth)), 2), self.dist.shape[1])
                h = np.maximum(self._dsort[:, nn - 1][:, None], 1e-12)
                ratio = self.dist / h
                if self.kernel.kind == "bisquare":
                    Wk = np.where(ratio < 1.0, (1.0 - ratio**2) ** 2, 0.0)
                else:
                    Wk = np.exp(-0.5 * ratio**2)
            else:
                Wk = self.kernel.weights(self.dist, bandwidth)
            self.weight_cache[key] = Wk
        return Wk

    def _solve_stats(self, bandwidth):
        """A_i^{-1}, self-weights, and tr(S): independent of the response."""
        key = self._bw_key(bandwidth)
        st = self._stat_cache.get(key)
        if st is None:
            Wk = self.kernel_matrix(bandwidth)
            support = (Wk > 0).sum(axis=1)
            if (support < self.P).any():
                zone = int(np.argmin(support))
                raise RankDeficiencyError(
                    f"local design at zone {zone} has weight support "
                    f"{int(support[zone])} < {self.P} covariates"
                )
            A = np.tensordot(Wk, self.gram, axes=(1, 0))
            try:
                Ainv = np.linalg.inv(A)
            except np.linalg.LinAlgError:
                zone = _first_singular(A)
                raise RankDeficiencyError(f"singular local design at zone {zone}") from None
            w_self = np.diagonal(Wk).copy()
            tr_s = float((w_self * np.einsum("npq,nqp->n", Ainv, self.gram)).sum())
            st = {"Ainv": Ainv, "w_self": w_self, "tr_s": tr_s}
            self._stat_cache[key] = st
        return st

    def set_response(self, y: np.ndarray) -> None:
        """Swap the response, refreshing the response-dependent statistics."""
        self.y = np.asarray(y, dtype=float).ravel()
        _, self.moment = _zone_stats(self.X, self.y, self.zone_index, self.n_zones)

    def bandwidth_range(self):
        if self.kernel.adaptive:
            return (self.P + 2, self.n_zones)
        pos = self.dist[self.dist > 0]
        return (float(pos.min()), float(self.dist.max()) * 1.5)

    @property
    def n_obs(self):
        return self.X.shape[0]

    @property
    def P(self):
        return self.X.shape[1]

    def fit(self, bandwidth, need_hat: bool = False, need_se: bool = True):
        """Weighted local solves at every zone for one shared bandwidth."""
        Wk = self.kernel_matrix(bandwidth)
        st = self._solve_stats(bandwidth)
        Ainv, w_self, tr_s = st["Ainv"], st["w_self"], st["tr_s"]
        b = Wk @ self.moment  # (N, P)
        beta = np.einsum("npq,nq->np", Ainv, b)
        if not np.isfinite(beta).all():
            zone = int(np.nonzero(~np.isfinite(beta).all(axis=1))[0][0])
            raise RankDeficiencyError(f"non-finite local solution at zone {zone}")

        fitted = np.einsum("rp,rp->r", beta[self.zone_index], self.X)
        resid = self.y - fitted
        rss = float(resid @ resid)
        out = {
            "beta": beta,
            "fitted": fitted,
            "resid": resid,
            "rss": rss,
            "tr_s": tr_s,
            "Wk": Wk,
        }
        if need_se:
            C = np.tensordot(Wk**2, self.gram, axes=(1, 0))
            cov_core = np.einsum("npq,nqr,nrs->nps", Ainv, C, Ainv)
            df = max(self.n_obs - tr_s, 1.0)
            sigma2 = rss / df
            se = np.sqrt(np.clip(np.einsum("npp->np", cov_core), 0.0, None) * sigma2)
            out["se"] = se
        if need_hat:
            # Per-row hat entries; only available when rows == zones.
            if self.n_obs != self.n_zones:
                raise ParameterError("hat matrix only available for one-row-per-zone designs")
            XA = np.einsum("np,npq->nq", self.X, Ainv)  # x_i^T A_i^{-1}
            out["hat"] = np.einsum("nq,mq,nm->nm", XA, self.X, Wk)
        return out

    def aicc(self, bandwidth) -> float:
        fit = self.fit(bandwidth, need_se=False)
        return gwr_aicc(self.n_obs, fit["rss"], fit["tr_s"])


def _first_singular(A):
    for i in range(A.shape[0]):
        if abs(np.linalg.det(A[i])) < 1e-300:
            return i
    return -1


def gwr_aicc(n: int, rss: float, tr_s: float) -> float:
    """Corrected AIC with the hat-matrix trace as the model complexity."""
    if tr_s >= n - 2:
        return float("inf")
    sigma_hat = np.sqrt(max(rss, 1e-300) / n)
    return float(2 * n * np.log(sigma_hat) + n * np.log(2 * np.pi) + n * (n + tr_s) / (n - 2 - tr_s))


def fit_gwr(
    X,
    y,
    centroids,
    bandwidth,
    kernel: KernelSpec = KernelSpec(),
    zone_index=None,
    covariates=None,
    add_intercept: bool = True,
) -> CoefficientSurface:
    """Local weighted least squares at every zone for one shared bandwidth."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    names = list(covariates) if covariates is not None else [f"x{j}" for j in range(X.shape[1])]
    if add_intercept:
        X = np.column_stack([np.ones(X.shape[0]), X])
        names = [INTERCEPT] + names
    n_zones = np.asarray(centroids).shape[0]
    if n_zones <= X.shape[1] + 1:
        raise RankDeficiencyError(
            f"{n_zones} zones cannot support {X.shape[1]} local covariates"
        )
    design = _LocalDesign(X, y, centroids, zone_index, names, kernel)
    fit = design.fit(bandwidth)
    with np.errstate(divide="ignore", invalid="ignore"):
        pseudo_t = np.where(fit["se"] > 0, fit["beta"] / fit["se"], 0.0)
    return CoefficientSurface(
        covariates=tuple(names),
        beta=fit["beta"],
        bandwidths=np.full(len(names), float(bandwidth)),
        pseudo_t=pseudo_t,
        aicc=gwr_aicc(design.n_obs, fit["rss"], fit["tr_s"]),
        effective_df=fit["tr_s"],
        kernel=kernel,
        rss=fit["rss"],
    )


GOLDEN = 0.5 * (np.sqrt(5) - 1)


def _golden_section(objective, lo, hi, integer: bool, rel_tol: float = 1e-2):
    """Deterministic golden-section minimization with memoized evaluations."""
    cache: dict[float, float] = {}
    trace: list[tuple[float, float]] = []

    def score(x):
        if integer:
            x = int(round(x))
        if x not in cache:
            cache[x] = objective(x)
            trace.append((x, cache[x]))
        return cache[x]

    if hi <= lo:
        return lo, score(lo), trace
    width0 = hi - lo
    a, c = float(lo), float(hi)
    b = c - GOLDEN * (c - a)
    d = a + GOLDEN * (c - a)
    while (c - a) > (1.0 if integer else rel_tol * width0):
        if score(b) <= score(d):
            c, d = d, b
            b = c - GOLDEN * (c - a)
        else:
            a, b = b, d
            d = a + GOLDEN * (c - a)
        if integer and round(b) == round(d):
            break
    candidates = [lo, hi] + [x for x, _ in trace]
    best = min(candidates, key=lambda x: score(x))
    return (int(round(best)) if integer else best), score(best), trace


def _detect_non_unimodal(trace) -> bool:
    pts = sorted(trace)
    vals = [v for _, v in pts]
    minima = 0
    for i in range(len(vals)):
        left = vals[i - 1] if i > 0 else np.inf
        right = vals[i + 1] if i < len(vals) - 1 else np.inf
        if vals[i] < left and vals[i] < right:
            minima += 1
    return minima > 1


def optimize_bandwidth(
    X,
    y,
    centroids,
    kernel: KernelSpec = KernelSpec(),
    search_range=None,
    zone_index=None,
    add_intercept: bool = True,
) -> BandwidthResult:
    """Golden-section AICc minimization over the bandwidth."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if add_intercept:
        X = np.column_stack([np.ones(X.shape[0]), X])
    names = [f"x{j}" for j in range(X.shape[1])]
    design = _LocalDesign(X, y, centroids, zone_index, names, kernel)
    if search_range is None:
        if kernel.adaptive:
            search_range = (design.P + 2, design.n_zones)
        else:
            pos = design.dist[design.dist > 0]
            search_range = (float(pos.min()), float(design.dist.max()) * 1.5)
    lo, hi = search_range
    if hi < lo:
        raise ParameterError(f"invalid search range ({lo}, {hi})")
    if hi == lo:
        return BandwidthResult(bandwidth=lo, aicc=design.aicc(lo), trace=((lo, design.aicc(lo)),))
    bw, best, trace = _golden_section(design.aicc, lo, hi, integer=kernel.adaptive)
    return BandwidthResult(
        bandwidth=bw,
        aicc=best,
        trace=tuple(trace),
        non_unimodal=_detect_non_unimodal(trace),
    )


def fit_mgwr(
    X,
    y,
    centroids,
    kernel: KernelSpec = KernelSpec(),
    tol: float = 1e-5,
    max_iter: int = 50,
    zone_index=None,
    covariates=None,
    add_intercept: bool = True,
    search_range=None,
    bw_stable_sweeps: int = 3,
) -> CoefficientSurface:
    """Backfitting multiscale GWR: one bandwidth per covariate.

    Starts from plain GWR at its optimal shared bandwidth, then cycles
    through covariates fitting a single-term local regression to the partial
    residual with a freshly optimized bandwidth. Once a covariate's bandwidth
    has not moved for `bw_stable_sweeps` consecutive sweeps it is frozen, so
    the tail of the iteration is plain fixed-smoother backfitting.
    Convergence is the largest coefficient change across a sweep, normalized
    by the response SD.
    """
    if tol <= 0:
        raise ParameterError("tol must be positive")
    X = np.atleast_2d(np.asarray(X, dtype=float))
    names = list(covariates) if covariates is not None else [f"x{j}" for j in range(X.shape[1])]
    if add_intercept:
        X = np.column_stack([np.ones(X.shape[0]), X])
        names = [INTERCEPT] + names
    y = np.asarray(y, dtype=float).ravel()
    centroids = np.asarray(centroids, dtype=float)
    n_zones = centroids.shape[0]
    n_obs, P = X.shape

    init_bw = optimize_bandwidth(
        X, y, centroids, kernel, zone_index=zone_index, add_intercept=False,
        search_range=search_range,
    )
    base = fit_gwr(
        X, y, centroids, init_bw.bandwidth, kernel,
        zone_index=zone_index, covariates=names, add_intercept=False,
    )
    zi = np.arange(n_zones) if zone_index is None else np.asarray(zone_index, dtype=int)

    track_hat = n_obs <= HAT_CHAIN_LIMIT and n_obs == n_zones
    if track_hat:
        shared = _LocalDesign(X, y, centroids, zone_index, names, kernel)
        full = shared.fit(init_bw.bandwidth, need_hat=True, need_se=False)
        S = full["hat"]
        # R[:, :, k]: contribution of term k to each fitted value.
        Wk = full["Wk"]
        A = np.tensordot(Wk, shared.gram, axes=(1, 0))
        Ainv = np.linalg.inv(A)
        R = np.zeros((P, n_obs, n_obs))
        for k in range(P):
            # row i of term-k hat: X[i,k] * (A_i^{-1} X^T W_i)[k, :]
            PK = np.einsum("nq,mq,nm->nm", Ainv[:, k, :], X, Wk)
            R[k] = X[:, k][:, None] * PK

    beta = base.beta.copy()
    bandwidths = np.full(P, float(init_bw.bandwidth))
    terms = beta[zi] * X  # per-row fitted contribution of each covariate
    resid = y - terms.sum(axis=1)
    y_sd = float(np.std(y)) or 1.0

    dist_shared = (
        shared.dist
        if track_hat
        else np.sqrt(((centroids[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2))
    )
    sub_designs = [
        _LocalDesign(
            X[:, [k]], np.zeros(n_obs), centroids, zone_index, (names[k],), kernel,
            dist=dist_shared,
        )
        for k in range(P)
    ]
    shared_cache: dict = {}
    for dk in sub_designs:
        dk.weight_cache = shared_cache
    rss_trace = [float(resid @ resid)]
    warning = init_bw.non_unimodal
    converged = False
    stable_count = np.zeros(P, dtype=int)
    for _ in range(max_iter):
        max_change = 0.0
        for k in range(P):
            partial = resid + terms[:, k]
            dk = sub_designs[k]
            dk.set_response(partial)
            if stable_count[k] >= bw_stable_sweeps:
                bw_k = bandwidths[k]
            else:
                lo_k, hi_k = dk.bandwidth_range()
                bw_k, _, _ = _golden_section(dk.aicc, lo_k, hi_k, integer=kernel.adaptive)
                if abs(bw_k - bandwidths[k]) <= max(1.0, 0.02 * abs(bandwidths[k])):
                    stable_count[k] += 1
                    bw_k = bandwidths[k]  # keep the settled value
                else:
                    stable_count[k] = 0
            fit_k = dk.fit(bw_k, need_se=False, need_hat=track_hat)
            new_beta_k = fit_k["beta"][:, 0]
            change = float(np.max(np.abs(new_beta_k - beta[:, k]))) / y_sd
            max_change = max(max_change, change)
            beta[:, k] = new_beta_k
            bandwidths[k] = bw_k
            new_term = new_beta_k[zi] * X[:, k]
            resid = partial - new_term
            terms[:, k] = new_term
            if track_hat:
                Ak = fit_k["hat"]
                new_Rk = Ak - Ak @ S + Ak @ R[k]
                S = S - R[k] + new_Rk
                R[k] = new_Rk
        rss_trace.append(float(resid @ resid))
        if max_change < tol:
            converged = True
            break

    rss = float(resid @ resid)
    if track_hat:
        tr_s = float(np.trace(S))
        aicc_approx = False
    else:
        tr_s = 0.0
        for k in range(P):
            dk = sub_designs[k]
            fit_k = dk.fit(bandwidths[k], need_se=False)
            tr_s += fit_k["tr_s"]
        aicc_approx = True

    # Per-term standard errors from the final single-term fits.
    pseudo_t = np.zeros_like(beta)
    df = max(n_obs - tr_s, 1.0)
    sigma2 = rss / df
    for k in range(P):
        dk = sub_designs[k]
        Wk = dk.kernel_matrix(bandwidths[k])
        a = np.einsum("nm,m->n", Wk, dk.gram[:, 0, 0])
        c = np.einsum("nm,m->n", Wk**2, dk.gram[:, 0, 0])
        with np.errstate(divide="ignore", invalid="ignore"):
            se = np.sqrt(np.where(a > 0, c / a**2, np.inf) * sigma2)
            pseudo_t[:, k] = np.where(se > 0, beta[:, k] / se, 0.0)

    surface = CoefficientSurface(
        covariates=tuple(names),
        beta=beta,
        bandwidths=bandwidths,
        pseudo_t=pseudo_t,
        aicc=gwr_aicc(n_obs, rss, tr_s),
        effective_df=tr_s,
        kernel=kernel,
        rss=rss,
        aicc_approximate=aicc_approx,
        rss_trace=tuple(rss_trace),
        bandwidth_warning=warning,
    )
    if not converged:
        raise NonConvergenceError(
            f"backfitting did not converge in {max_iter} sweeps", last_iterate=surface
        )
    return surface


def significance_mask(surface: CoefficientSurface, alpha: float):
    """Two-sided pseudo-t mask and per-covariate significant proportions."""
    if not (0.0 < alpha <= 1.0):
        raise ParameterError("alpha must be in (0, 1]")
    n = surface.beta.shape[0]
    df = max(n - surface.effective_df, 1.0)
    critical = float(stats.t.ppf(1.0 - alpha / 2.0, df))
    mask = np.abs(surface.pseudo_t) > critical
    prop = mask.mean(axis=0)
    return mask, {name: float(p) for name, p in zip(surface.covariates, prop)}


def adaptive_bandwidth_to_distance(
    centroids: np.ndarray, neighbor_count: int
) -> float:
    """Median distance to the nn-th nearest zone: maps adaptive bandwidths to
    normalized spatial units for reporting."""
    pts = np.asarray(centroids, dtype=float)
    diff = pts[:, None, :] - pts[None, :, :]
    dist = np.sqrt((diff**2).sum(axis=2))
    nn = int(round(neighbor_count))
    nn = min(max(nn, 1), pts.shape[0])
    h = np.sort(dist, axis=1)[:, nn - 1]
    return float(np.median(h))
