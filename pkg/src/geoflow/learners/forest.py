"""Regression random forest: bootstrap-sampled variance-reduction trees.

Split search runs on per-feature threshold bins. Features with few distinct
values keep every midpoint as a candidate (exhaustive CART behavior); dense
features are quantile-binned at 64 candidates, which keeps the default
200-tree forest inside the desk-scale runtime budget.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..core import RngSeed
from ..errors import ParameterError

MAX_BINS = 64


@dataclass(frozen=True)
class ForestSpec:
    n_trees: int = 200
    max_depth: int | None = None
    min_leaf: int = 5
    features_per_split: int | None = None  # default ceil(P / 3)
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ParameterError("n_trees must be >= 1")
        if self.min_leaf < 1:
            raise ParameterError("min_leaf must be >= 1")


@dataclass(frozen=True, eq=False)
class _Tree:
    feature: np.ndarray  # -1 at leaves
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def predict(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=np.int64)
        active = self.feature[node] >= 0
        while active.any():
            rows = np.nonzero(active)[0]
            nd = node[rows]
            go_left = X[rows, self.feature[nd]] <= self.threshold[nd]
            node[rows] = np.where(go_left, self.left[nd], self.right[nd])
            active = self.feature[node] >= 0
        return self.value[node]

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
        }

    @classmethod
    def from_dict(cls, state: dict) -> "_Tree":
        return cls(
            feature=np.asarray(state["feature"], dtype=np.int64),
            threshold=np.asarray(state["threshold"], dtype=float),
            left=np.asarray(state["left"], dtype=np.int64),
            right=np.asarray(state["right"], dtype=np.int64),
            value=np.asarray(state["value"], dtype=float),
        )


@dataclass(frozen=True, eq=False)
class RandomForestPredictor:
    kind = "RF"
    trees: tuple
    spec: ForestSpec
    columns: tuple[str, ...]
    oob_mse_curve: tuple = ()  # cumulative OOB MSE at each ensemble size

    def predict_raw(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        total = np.zeros(X.shape[0])
        for tree in self.trees:
            total += tree.predict(X)
        return total / len(self.trees)

    def to_dict(self) -> dict:
        return {
            "spec": {
                "n_trees": self.spec.n_trees,
                "max_depth": self.spec.max_depth,
                "min_leaf": self.spec.min_leaf,
                "features_per_split": self.spec.features_per_split,
                "bootstrap": self.spec.bootstrap,
                "seed": self.spec.seed,
            },
            "columns": list(self.columns),
            "oob_mse_curve": list(self.oob_mse_curve),
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, state: dict) -> "RandomForestPredictor":
        return cls(
            trees=tuple(_Tree.from_dict(t) for t in state["trees"]),
            spec=ForestSpec(**state["spec"]),
            columns=tuple(state["columns"]),
            oob_mse_curve=tuple(state["oob_mse_curve"]),
        )


def _bin_features(X: np.ndarray):
    """Per-feature candidate thresholds and integer codes.

    codes[r, f] = number of thresholds <= X[r, f]; splitting at threshold
    index c sends codes <= c to the left child.
    """
    n, p = X.shape
    thresholds = []
    codes = np.empty((n, p), dtype=np.int32)
    for f in range(p):
        col = X[:, f]
        uniq = np.unique(col)
        if uniq.size <= MAX_BINS:
            thr = (uniq[:-1] + uniq[1:]) / 2.0 if uniq.size > 1 else np.empty(0)
        else:
            qs = np.quantile(col, np.linspace(0, 1, MAX_BINS + 1)[1:-1])
            thr = np.unique(qs)
        thresholds.append(thr)
        codes[:, f] = np.searchsorted(thr, col, side="left")
    return thresholds, codes


class _TreeBuilder:
    """Level-synchronous tree growth: every feature's split search across all
    open nodes of a level runs as one grouped bincount."""

    def __init__(self, codes, thresholds, y, spec: ForestSpec, n_features_split: int, rng):
        self.codes = codes
        self.thresholds = thresholds
        self.y = y
        self.spec = spec
        self.k = n_features_split
        self.rng = rng
        self.feature = None
        self.threshold = None
        self.left = None
        self.right = None
        self.value = None

    def build(self, idx: np.ndarray) -> int:
        min_leaf = self.spec.min_leaf
        p = self.codes.shape[1]
        k = min(self.k, p)
        # Growing node arrays; level `slot` positions map into these via ids.
        feat_arr = [np.full(1, -1, dtype=np.int64)]
        thr_arr = [np.zeros(1)]
        left_arr = [np.full(1, -1, dtype=np.int64)]
        right_arr = [np.full(1, -1, dtype=np.int64)]
        value_arr = [np.zeros(1)]
        n_nodes = 1

        rows = idx
        node_slot = np.zeros(rows.size, dtype=np.int64)
        level_ids = np.zeros(1, dtype=np.int64)
        depth = 0
        level_values = [np.zeros(1)]
        while level_ids.size:
            m_level = level_ids.size
            y_rows = self.y[rows]
            counts = np.bincount(node_slot, minlength=m_level)
            sums = np.bincount(node_slot, weights=y_rows, minlength=m_level)
            sq = np.bincount(node_slot, weights=y_rows**2, minlength=m_level)
            means = sums / np.maximum(counts, 1)
            level_values[-1] = means
            sse = sq - sums**2 / np.maximum(counts, 1)
            splittable = (counts >= 2 * min_leaf) & (sse > 1e-12)
            if self.spec.max_depth is not None and depth >= self.spec.max_depth:
                splittable[:] = False
            if not splittable.any():
                break

            # Per-node feature subsets: k smallest of a random row (slot order).
            draws = self.rng.random((m_level, p))
            subset_idx = np.argpartition(draws, k - 1, axis=1)[:, :k]
            use = np.zeros((m_level, p), dtype=bool)
            use[np.repeat(np.arange(m_level), k), subset_idx.ravel()] = True
            use &= splittable[:, None]

            best_score = np.full(m_level, -np.inf)
            best_feature = np.full(m_level, -1, dtype=np.int64)
            best_cut = np.zeros(m_level, dtype=np.int64)
            codes_rows = self.codes[rows]
            for f in range(p):
                thr = self.thresholds[f]
                use_f = use[:, f]
                if thr.size == 0 or not use_f.any():
                    continue
                slots = np.nonzero(use_f)[0]
                compact = np.full(m_level, -1, dtype=np.int64)
                compact[slots] = np.arange(slots.size)
                mask = use_f[node_slot]
                sub_slot = compact[node_slot[mask]]
                nb = thr.size + 1
                comb = sub_slot * nb + codes_rows[mask, f]
                c_mat = np.bincount(comb, minlength=slots.size * nb).reshape(slots.size, nb)
                s_mat = np.bincount(
                    comb, weights=y_rows[mask], minlength=slots.size * nb
                ).reshape(slots.size, nb)
                cl = np.cumsum(c_mat, axis=1)[:, :-1]
                sl = np.cumsum(s_mat, axis=1)[:, :-1]
                cr = counts[slots][:, None] - cl
                sr = sums[slots][:, None] - sl
                valid = (cl >= min_leaf) & (cr >= min_leaf)
                with np.errstate(divide="ignore", invalid="ignore"):
                    score = np.where(
                        valid, sl**2 / np.maximum(cl, 1) + sr**2 / np.maximum(cr, 1), -np.inf
                    )
                cut = np.argmax(score, axis=1)
                sc = score[np.arange(slots.size), cut]
                better = sc > best_score[slots] + 1e-12
                upd = slots[better]
                best_score[upd] = sc[better]
                best_feature[upd] = f
                best_cut[upd] = cut[better]

            split_mask = best_feature >= 0
            n_split = int(split_mask.sum())
            if n_split == 0:
                break
            split_slots = np.nonzero(split_mask)[0]
            child_base = n_nodes + 2 * np.arange(n_split)
            # Record split parameters for this level's nodes.
            feature_level = best_feature.copy()
            thr_level = np.zeros(m_level)
            thr_vals = np.array(
                [self.thresholds[best_feature[s]][best_cut[s]] for s in split_slots]
            )
            thr_level[split_slots] = thr_vals
            left_level = np.full(m_level, -1, dtype=np.int64)
            right_level = np.full(m_level, -1, dtype=np.int64)
            left_level[split_slots] = child_base
            right_level[split_slots] = child_base + 1
            feat_arr[-1] = feature_level
            thr_arr[-1] = thr_level
            left_arr[-1] = left_level
            right_arr[-1] = right_level

            # Open next level.
            feat_arr.append(np.full(2 * n_split, -1, dtype=np.int64))
            thr_arr.append(np.zeros(2 * n_split))
            left_arr.append(np.full(2 * n_split, -1, dtype=np.int64))
            right_arr.append(np.full(2 * n_split, -1, dtype=np.int64))
            level_values.append(np.zeros(2 * n_split))
            n_nodes += 2 * n_split

            child_slot = np.full((m_level, 2), -1, dtype=np.int64)
            child_slot[split_slots, 0] = 2 * np.arange(n_split)
            child_slot[split_slots, 1] = 2 * np.arange(n_split) + 1
            keep = split_mask[node_slot]
            rows = rows[keep]
            parent = node_slot[keep]
            f_of_row = best_feature[parent]
            go_left = codes_rows[keep, f_of_row] <= best_cut[parent]
            node_slot = child_slot[parent, np.where(go_left, 0, 1)]
            level_ids = np.arange(2 * n_split)
            depth += 1

        # Levels are laid out consecutively, so the recorded child ids
        # (allocated as n_nodes + offset at split time) are already global.
        self.feature = np.concatenate(feat_arr)
        self.threshold = np.concatenate(thr_arr)
        self.value = np.concatenate(level_values)
        self.left = np.concatenate(left_arr)
        self.right = np.concatenate(right_arr)
        return 0

    def tree(self) -> _Tree:
        return _Tree(
            feature=np.asarray(self.feature, dtype=np.int64),
            threshold=np.asarray(self.threshold, dtype=float),
            left=np.asarray(self.left, dtype=np.int64),
            right=np.asarray(self.right, dtype=np.int64),
            value=np.asarray(self.value, dtype=float),
        )


def fit_rf(X, y, spec: ForestSpec, columns=None, track_oob: bool = True) -> RandomForestPredictor:
    """Bootstrap forest of variance-reduction trees; deterministic per seed."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    n, p = X.shape
    if y.size != n:
        raise ParameterError("X and y must align")
    names = tuple(columns) if columns is not None else tuple(f"x{j}" for j in range(p))
    k = spec.features_per_split or int(np.ceil(p / 3))
    thresholds, codes = _bin_features(X)
    master = RngSeed(spec.seed)
    trees = []
    oob_sum = np.zeros(n)
    oob_count = np.zeros(n, dtype=np.int64)
    oob_curve = []
    for t in range(spec.n_trees):
        rng = master.derive("tree", t)
        if spec.bootstrap:
            sample = rng.integers(0, n, size=n)
        else:
            sample = np.arange(n)
        builder = _TreeBuilder(codes, thresholds, y, spec, k, rng)
        builder.build(np.sort(sample))
        tree = builder.tree()
        trees.append(tree)
        if track_oob and spec.bootstrap:
            mask = np.ones(n, dtype=bool)
            mask[np.unique(sample)] = False
            if mask.any():
                oob_sum[mask] += tree.predict(X[mask])
                oob_count[mask] += 1
            seen = oob_count > 0
            if seen.any():
                mse = float(np.mean((oob_sum[seen] / oob_count[seen] - y[seen]) ** 2))
            else:
                mse = float("nan")
            oob_curve.append(mse)
    return RandomForestPredictor(
        trees=tuple(trees),
        spec=spec,
        columns=names,
        oob_mse_curve=tuple(oob_curve),
    )
