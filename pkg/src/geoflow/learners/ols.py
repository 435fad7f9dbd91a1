"""Global least-squares baseline with HC3 robust standard errors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from ..errors import RankDeficiencyError


@dataclass(frozen=True, eq=False)
class OLSPredictor:
    kind = "OLS"
    coef: np.ndarray  # intercept first
    columns: tuple[str, ...]
    hc3_se: np.ndarray
    rss: float
    loss_trace: tuple

    def predict_raw(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return self.coef[0] + X @ self.coef[1:]

    def t_values(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.hc3_se > 0, self.coef / self.hc3_se, 0.0)

    def p_values(self, df: int) -> np.ndarray:
        return 2.0 * stats.t.sf(np.abs(self.t_values()), df)

    def to_dict(self) -> dict:
        return {
            "coef": self.coef.tolist(),
            "columns": list(self.columns),
            "hc3_se": self.hc3_se.tolist(),
            "rss": self.rss,
            "loss_trace": list(self.loss_trace),
        }

    @classmethod
    def from_dict(cls, state: dict) -> "OLSPredictor":
        return cls(
            coef=np.asarray(state["coef"], dtype=float),
            columns=tuple(state["columns"]),
            hc3_se=np.asarray(state["hc3_se"], dtype=float),
            rss=float(state["rss"]),
            loss_trace=tuple(state["loss_trace"]),
        )


def _collinear_columns(design: np.ndarray, names) -> list[str]:
    """Columns whose removal restores full rank."""
    full_rank = np.linalg.matrix_rank(design)
    bad = []
    for j in range(design.shape[1]):
        reduced = np.delete(design, j, axis=1)
        if np.linalg.matrix_rank(reduced) == full_rank:
            bad.append(names[j])
    return bad


def fit_ols(X, y, columns=None) -> OLSPredictor:
    """Closed-form least squares with an intercept.

    Raises a rank-deficiency error naming the collinear columns when the
    design (with intercept) is not full rank.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    n, p = X.shape
    names = tuple(columns) if columns is not None else tuple(f"x{j}" for j in range(p))
    design = np.column_stack([np.ones(n), X])
    all_names = ("Intercept",) + names
    rank = np.linalg.matrix_rank(design)
    if rank < design.shape[1]:
        bad = _collinear_columns(design, all_names)
        raise RankDeficiencyError(f"design is rank deficient; collinear columns: {bad}")
    gram = design.T @ design
    gram_inv = np.linalg.inv(gram)
    coef = gram_inv @ (design.T @ y)
    resid = y - design @ coef
    rss = float(resid @ resid)

    # HC3: leverage-adjusted sandwich variance.
    leverage = np.einsum("ij,jk,ik->i", design, gram_inv, design)
    adj = resid / np.clip(1.0 - leverage, 1e-12, None)
    meat = design.T @ (design * (adj**2)[:, None])
    cov = gram_inv @ meat @ gram_inv
    hc3_se = np.sqrt(np.clip(np.diag(cov), 0.0, None))

    return OLSPredictor(
        coef=coef,
        columns=names,
        hc3_se=hc3_se,
        rss=rss,
        loss_trace=(rss,),
    )
