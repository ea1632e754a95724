"""Gradient-boosted regression trees with per-observation weights.

Squared-error boosting over depth-limited trees.  Split search is exact:
every feature is binned on its sorted unique values, so a histogram over
the bins is lossless.  Numeric features split on a threshold halfway
between adjacent occupied values; categorical features split one category
against the rest.

Weights enter every statistic (split gain, leaf value, minimum leaf
weight), and only rows with positive weight can create a candidate
threshold.  Appending rows of weight 0 therefore leaves the fitted model,
and hence its predictions, unchanged.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from numba import njit

MODEL_FORMAT_VERSION = 1

LEAF = -1


@dataclass(frozen=True)
class Hyperparams:
    nrounds: int = 200
    max_depth: int = 14
    eta: float = 0.6
    # Minimum total weight on each side of a split (XGBoost's min_child_weight).
    min_samples_leaf: float = 1.0
    seed: int = 0
    subsample: float = 1.0

    def __post_init__(self):
        if self.nrounds < 1:
            raise ValueError("nrounds must be >= 1")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if not 0.0 < self.eta <= 1.0:
            raise ValueError("eta must lie in (0, 1]")
        if self.min_samples_leaf < 0:
            raise ValueError("min_samples_leaf must be >= 0")
        if not 0.0 < self.subsample <= 1.0:
            raise ValueError("subsample must lie in (0, 1]")

    def label(self) -> str:
        return f"nrounds={self.nrounds},max_depth={self.max_depth},eta={self.eta}"


@dataclass
class WeightedDataset:
    """Rows of features with targets, weights and per-row bounds.

    ``categorical`` holds, per feature column, the number of categories for
    categorical columns (codes ``0..n-1``) or ``None`` for numeric columns.
    """

    features: np.ndarray
    targets: np.ndarray
    weights: np.ndarray
    categorical: Sequence[int | None]
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-D array")
        n = self.features.shape[0]
        self.targets = np.asarray(self.targets, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.targets.shape != (n,) or self.weights.shape != (n,):
            raise ValueError("features, targets and weights must be row-aligned")
        if len(self.categorical) != self.features.shape[1]:
            raise ValueError("one categorical entry is required per feature column")
        if np.any((self.weights < 0) | (self.weights > 1)) or not np.all(np.isfinite(self.weights)):
            raise ValueError("weights must lie in [0, 1]")
        if self.lower is None:
            self.lower = np.full(n, -np.inf)
        if self.upper is None:
            self.upper = np.full(n, np.inf)
        self.lower = np.asarray(self.lower, dtype=np.float64)
        self.upper = np.asarray(self.upper, dtype=np.float64)
        if self.lower.shape != (n,) or self.upper.shape != (n,):
            raise ValueError("bounds must be row-aligned")

    def __len__(self) -> int:
        return self.features.shape[0]


@njit(cache=True)
def _grow_tree(codes, bin_values, n_bins, is_cat, residual, weight, rows,
               max_depth, min_weight):
    n_rows = rows.shape[0]
    n_feat = codes.shape[1]
    cap = 2 * n_rows + 1
    feat = np.full(cap, -1, dtype=np.int64)
    thresh = np.zeros(cap)
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    value = np.zeros(cap)
    row_value = np.zeros(codes.shape[0])

    max_bins = bin_values.shape[1]
    hg = np.zeros(max_bins)
    hh = np.zeros(max_bins)
    hc = np.zeros(max_bins, dtype=np.int64)

    stack_node = np.zeros(cap, dtype=np.int64)
    stack_start = np.zeros(cap, dtype=np.int64)
    stack_end = np.zeros(cap, dtype=np.int64)
    stack_depth = np.zeros(cap, dtype=np.int64)
    top = 0
    stack_node[0] = 0
    stack_start[0] = 0
    stack_end[0] = n_rows
    stack_depth[0] = 0
    top = 1
    n_nodes = 1
    scratch = np.empty(n_rows, dtype=np.int64)

    while top > 0:
        top -= 1
        node = stack_node[top]
        start = stack_start[top]
        end = stack_end[top]
        depth = stack_depth[top]

        g_tot = 0.0
        h_tot = 0.0
        c_tot = 0
        for j in range(start, end):
            r = rows[j]
            w = weight[r]
            if w > 0.0:
                g_tot += w * residual[r]
                h_tot += w
                c_tot += 1
        node_value = g_tot / h_tot if h_tot > 0.0 else 0.0
        value[node] = node_value

        best_gain = 1e-13
        best_feat = -1
        best_thresh = 0.0
        if depth < max_depth and c_tot >= 2:
            parent = g_tot * g_tot / h_tot
            for f in range(n_feat):
                nb = n_bins[f]
                for b in range(nb):
                    hg[b] = 0.0
                    hh[b] = 0.0
                    hc[b] = 0
                for j in range(start, end):
                    r = rows[j]
                    w = weight[r]
                    if w > 0.0:
                        b = codes[r, f]
                        hg[b] += w * residual[r]
                        hh[b] += w
                        hc[b] += 1
                if is_cat[f]:
                    for b in range(nb):
                        if hc[b] == 0 or hc[b] == c_tot:
                            continue
                        gl = hg[b]
                        hl = hh[b]
                        gr = g_tot - gl
                        hr = h_tot - hl
                        if hl < min_weight or hr < min_weight or hl <= 0.0 or hr <= 0.0:
                            continue
                        gain = gl * gl / hl + gr * gr / hr - parent
                        if gain > best_gain:
                            best_gain = gain
                            best_feat = f
                            best_thresh = bin_values[f, b]
                else:
                    gl = 0.0
                    hl = 0.0
                    cl = 0
                    prev = -1
                    for b in range(nb):
                        if hc[b] == 0:
                            continue
                        if prev >= 0 and cl < c_tot:
                            gr = g_tot - gl
                            hr = h_tot - hl
                            if hl >= min_weight and hr >= min_weight and hl > 0.0 and hr > 0.0:
                                gain = gl * gl / hl + gr * gr / hr - parent
                                if gain > best_gain:
                                    best_gain = gain
                                    best_feat = f
                                    best_thresh = 0.5 * (bin_values[f, prev] + bin_values[f, b])
                        gl += hg[b]
                        hl += hh[b]
                        cl += hc[b]
                        prev = b

        if best_feat < 0:
            for j in range(start, end):
                row_value[rows[j]] = node_value
            continue

        # stable partition: left rows first, original relative order kept
        n_left = 0
        n_right = 0
        for j in range(start, end):
            r = rows[j]
            x = bin_values[best_feat, codes[r, best_feat]]
            if is_cat[best_feat]:
                go_left = x == best_thresh
            else:
                go_left = x <= best_thresh
            if go_left:
                rows[start + n_left] = r
                n_left += 1
            else:
                scratch[n_right] = r
                n_right += 1
        for j in range(n_right):
            rows[start + n_left + j] = scratch[j]

        feat[node] = best_feat
        thresh[node] = best_thresh
        lnode = n_nodes
        rnode = n_nodes + 1
        n_nodes += 2
        left[node] = lnode
        right[node] = rnode
        stack_node[top] = rnode
        stack_start[top] = start + n_left
        stack_end[top] = end
        stack_depth[top] = depth + 1
        top += 1
        stack_node[top] = lnode
        stack_start[top] = start
        stack_end[top] = start + n_left
        stack_depth[top] = depth + 1
        top += 1

    return (feat[:n_nodes].copy(), thresh[:n_nodes].copy(), left[:n_nodes].copy(),
            right[:n_nodes].copy(), value[:n_nodes].copy(), row_value)


@njit(cache=True)
def _predict_trees(x, is_cat, offsets, feat, thresh, left, right, value, base, eta):
    n = x.shape[0]
    out = np.full(n, base)
    n_trees = offsets.shape[0] - 1
    for t in range(n_trees):
        off = offsets[t]
        for i in range(n):
            node = 0
            while feat[off + node] != -1:
                f = feat[off + node]
                v = x[i, f]
                if is_cat[f]:
                    go_left = v == thresh[off + node]
                else:
                    go_left = v <= thresh[off + node]
                node = left[off + node] if go_left else right[off + node]
            out[i] += eta * value[off + node]
    return out


def _bin_features(features: np.ndarray):
    n_feat = features.shape[1]
    uniques = [np.unique(features[:, f]) for f in range(n_feat)]
    n_bins = np.array([len(u) for u in uniques], dtype=np.int64)
    bin_values = np.zeros((n_feat, max(1, int(n_bins.max(initial=1)))))
    codes = np.empty(features.shape, dtype=np.int64)
    for f, u in enumerate(uniques):
        bin_values[f, : len(u)] = u
        codes[:, f] = np.searchsorted(u, features[:, f])
    return codes, bin_values, n_bins


@dataclass
class Model:
    """An immutable fitted ensemble."""

    base_score: float
    eta: float
    categorical: tuple
    offsets: np.ndarray
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    params: Hyperparams = field(default_factory=Hyperparams)

    @property
    def n_trees(self) -> int:
        return len(self.offsets) - 1

    def predict(self, features) -> np.ndarray:
        x = np.asarray(features, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != len(self.categorical):
            raise ValueError(f"expected {len(self.categorical)} feature columns")
        for f, n_cat in enumerate(self.categorical):
            if n_cat is None:
                continue
            col = x[:, f]
            bad = (col < 0) | (col >= n_cat) | (col != np.floor(col))
            if np.any(bad):
                raise ValueError(f"unknown categorical code {col[bad][0]!r} in feature {f}")
        is_cat = np.array([c is not None for c in self.categorical])
        return _predict_trees(x, is_cat, self.offsets, self.feature, self.threshold,
                              self.left, self.right, self.value, self.base_score, self.eta)

    def to_dict(self) -> dict:
        trees = []
        for t in range(self.n_trees):
            a, b = self.offsets[t], self.offsets[t + 1]
            trees.append({
                "feature": self.feature[a:b].tolist(),
                "threshold": self.threshold[a:b].tolist(),
                "left": self.left[a:b].tolist(),
                "right": self.right[a:b].tolist(),
                "value": self.value[a:b].tolist(),
            })
        return {
            "format_version": MODEL_FORMAT_VERSION,
            "base_score": self.base_score,
            "eta": self.eta,
            "categorical": list(self.categorical),
            "params": asdict(self.params),
            "trees": trees,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Model":
        if d.get("format_version") != MODEL_FORMAT_VERSION:
            raise ValueError(f"unsupported model format {d.get('format_version')!r}")
        sizes = [len(t["feature"]) for t in d["trees"]]
        offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)

        def cat(key, dtype):
            parts = [np.asarray(t[key], dtype=dtype) for t in d["trees"]]
            return np.concatenate(parts) if parts else np.zeros(0, dtype=dtype)

        return cls(
            base_score=float(d["base_score"]),
            eta=float(d["eta"]),
            categorical=tuple(d["categorical"]),
            offsets=offsets,
            feature=cat("feature", np.int64),
            threshold=cat("threshold", np.float64),
            left=cat("left", np.int64),
            right=cat("right", np.int64),
            value=cat("value", np.float64),
            params=Hyperparams(**d["params"]),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def loads(cls, text: str) -> "Model":
        return cls.from_dict(json.loads(text))


def fit(data: WeightedDataset, params: Hyperparams) -> Model:
    """Fit a boosted ensemble minimizing weighted squared error."""
    w = data.weights
    y = data.targets
    if not np.all(np.isfinite(y)):
        raise ValueError("targets must be finite")
    w_sum = w.sum()
    if w_sum <= 0:
        raise ValueError("at least one row must carry positive weight")
    pos = w > 0
    base = float(np.sum(w[pos] * y[pos]) / np.sum(w[pos]))

    codes, bin_values, n_bins = _bin_features(data.features)
    is_cat = np.array([c is not None for c in data.categorical])
    rng = np.random.default_rng(params.seed)

    pred = np.full(len(y), base)
    feats, threshs, lefts, rights, values, sizes = [], [], [], [], [], []
    for _ in range(params.nrounds):
        if params.subsample < 1.0:
            keep = rng.random(len(y)) < params.subsample
            w_round = np.where(keep, w, 0.0)
        else:
            w_round = w
        residual = y - pred
        rows = np.arange(len(y), dtype=np.int64)
        f, t, l, r, v, row_value = _grow_tree(
            codes, bin_values, n_bins, is_cat, residual, w_round, rows,
            params.max_depth, float(params.min_samples_leaf))
        if params.subsample < 1.0:
            # rows left out of the round still need routing
            row_value = _predict_trees(
                data.features, is_cat, np.array([0, len(f)], dtype=np.int64),
                f, t, l, r, v, 0.0, 1.0)
        pred = pred + params.eta * row_value
        feats.append(f)
        threshs.append(t)
        lefts.append(l)
        rights.append(r)
        values.append(v)
        sizes.append(len(f))

    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
    return Model(
        base_score=base,
        eta=params.eta,
        categorical=tuple(data.categorical),
        offsets=offsets,
        feature=np.concatenate(feats),
        threshold=np.concatenate(threshs),
        left=np.concatenate(lefts),
        right=np.concatenate(rights),
        value=np.concatenate(values),
        params=params,
    )


def predict(model: Model, features) -> np.ndarray:
    """Raw ensemble outputs; bounding is left to the caller."""
    return model.predict(features)
