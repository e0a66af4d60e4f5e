"""Multi-label precision/recall/F1 and a multi-output Gini random forest used as
the raw-feature and embedding baselines."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .corpus import CHAPTERS, N_LABELS
from .errors import ConfigError, ShapeError, ValidationError


def binarize(probabilities, threshold: float = 0.5) -> np.ndarray:
    if not 0.0 < threshold < 1.0:
        raise ConfigError(f"threshold must be in (0, 1), got {threshold}")
    return (np.asarray(probabilities) >= threshold).astype(np.int64)


@dataclass
class MetricsReport:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    presence: np.ndarray
    labels: tuple = CHAPTERS

    @property
    def macro_precision(self) -> float:
        return float(np.mean(self.precision))

    @property
    def macro_recall(self) -> float:
        return float(np.mean(self.recall))

    @property
    def macro_f1(self) -> float:
        return float(np.mean(self.f1))

    def to_csv(self) -> str:
        lines = ["label,precision,recall,f1,presence"]
        for i, name in enumerate(self.labels):
            lines.append(
                f"\"{name}\",{self.precision[i]:.6f},{self.recall[i]:.6f},{self.f1[i]:.6f},{self.presence[i]:.6f}"
            )
        lines.append(f"macro,{self.macro_precision:.6f},{self.macro_recall:.6f},{self.macro_f1:.6f},")
        return "\n".join(lines) + "\n"


def _safe_ratio(num, den):
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


def score(predictions, labels, label_names: Sequence[str] = CHAPTERS) -> MetricsReport:
    pred = np.asarray(predictions).astype(bool)
    true = np.asarray(labels).astype(bool)
    if pred.shape != true.shape:
        raise ShapeError(f"predictions {pred.shape} and labels {true.shape} differ in shape")
    if pred.ndim != 2 or pred.shape[0] == 0:
        raise ValidationError("cannot score an empty evaluation set")
    tp = np.sum(pred & true, axis=0)
    fp = np.sum(pred & ~true, axis=0)
    fn = np.sum(~pred & true, axis=0)
    precision = _safe_ratio(tp, tp + fp)
    recall = _safe_ratio(tp, tp + fn)
    f1 = _safe_ratio(2 * precision * recall, precision + recall)
    presence = true.mean(axis=0)
    names = tuple(label_names) if len(label_names) == pred.shape[1] else tuple(str(i) for i in range(pred.shape[1]))
    return MetricsReport(tp, fp, fn, precision, recall, f1, presence, names)


def format_table(reports: Mapping[str, MetricsReport], width: int = 28) -> str:
    """Aligned table: precision, recall and F1 groups with one column per model, then presence."""
    models = list(reports)
    first = reports[models[0]]
    head1 = " " * width + "".join(f"{g:^{8 * len(models)}}" for g in ("Precision", "Recall", "F1")) + "Presence"
    head2 = " " * width + "".join(f"{m:>8}" for _ in range(3) for m in models)
    lines = [head1, head2]
    for i, name in enumerate(first.labels):
        short = name if len(name) <= width - 1 else name[: width - 4] + "..."
        row = f"{short:<{width}}"
        for attr in ("precision", "recall", "f1"):
            row += "".join(f"{getattr(reports[m], attr)[i]:8.3f}" for m in models)
        row += f"{first.presence[i]:8.3f}"
        lines.append(row)
    row = f"{'Total average':<{width}}"
    for attr in ("macro_precision", "macro_recall", "macro_f1"):
        row += "".join(f"{getattr(reports[m], attr):8.3f}" for m in models)
    lines.append(row + f"{'-':>8}")
    return "\n".join(lines) + "\n"


# -- random forest -----------------------------------------------------------


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 100
    max_depth: int | None = None
    min_samples_leaf: int = 1
    features_per_split: int | None = None  # None -> ceil(sqrt(d))
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ConfigError("n_trees must be >= 1")
        if self.max_depth is not None and self.max_depth < 1:
            raise ConfigError("max_depth must be positive when set")
        if self.min_samples_leaf < 1:
            raise ConfigError("min_samples_leaf must be positive")
        if self.features_per_split is not None and self.features_per_split < 1:
            raise ConfigError("features_per_split must be positive when set")

    def k_features(self, d: int) -> int:
        k = math.ceil(math.sqrt(d)) if self.features_per_split is None else self.features_per_split
        return max(1, min(k, d))


@dataclass
class Tree:
    feature: np.ndarray  # -1 marks a leaf
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray  # (n_nodes, n_outputs) positive fraction

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def apply(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        node = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        while True:
            f = self.feature[node]
            inner = f >= 0
            if not inner.any():
                return node
            r = rows[inner]
            n = node[inner]
            go_left = X[r, f[inner]] <= self.threshold[n]
            node[inner] = np.where(go_left, self.left[n], self.right[n])

    def predict(self, X) -> np.ndarray:
        return self.value[self.apply(X)]


def best_split(X, Y, idx, features, min_samples_leaf=1, total=None):
    """Lowest weighted-Gini split of rows ``idx`` over ``features``.

    Returns ``(feature, threshold, cost)`` or None. Equal costs resolve to the
    smallest feature index, then the smallest threshold.
    """
    n = len(idx)
    if n < 2:
        return None
    feats = np.sort(np.asarray(features))
    V = X[idx][:, feats]
    order = np.argsort(V, axis=0, kind="stable")
    Vs = V[order, np.arange(len(feats))]
    Yn = Y[idx]
    if total is None:
        total = Yn.sum(axis=0)
    left_counts = np.cumsum(Yn[order[:-1]], axis=0)  # (n-1, k, outputs): split after sorted row i
    n_left = np.arange(1.0, n)[:, None]
    n_right = n - n_left
    valid = Vs[:-1] < Vs[1:]
    if min_samples_leaf > 1:
        valid &= (n_left >= min_samples_leaf) & (n_right >= min_samples_leaf)
    if not valid.any():
        return None
    # sum_j 2 c (m - c) / m = 2 (sum c - sum c^2 / m), for both children
    sq_left = np.einsum("ikj,ikj->ik", left_counts, left_counts)
    right_counts = total - left_counts
    sq_right = np.einsum("ikj,ikj->ik", right_counts, right_counts)
    cost = 2.0 * (total.sum() - sq_left / n_left - sq_right / n_right) / Y.shape[1]
    cost = np.where(valid, cost, np.inf)
    best = cost.min()
    tol = 1e-9 * max(1.0, abs(best))
    cand_pos, cand_f = np.nonzero(cost <= best + tol)
    thresholds = (Vs[cand_pos, cand_f] + Vs[cand_pos + 1, cand_f]) / 2.0
    pick = np.lexsort((thresholds, feats[cand_f]))[0]
    return int(feats[cand_f[pick]]), float(thresholds[pick]), float(cost[cand_pos[pick], cand_f[pick]])


def _first_nonconstant(X, idx, order, k):
    # the first k features of ``order`` that vary over rows ``idx``, scanning in chunks
    found, start, step = [], 0, 2 * k
    while len(found) < k and start < len(order):
        cols = order[start : start + step]
        V = X[idx][:, cols] if len(idx) < 64 else X[np.ix_(idx, cols)]
        found.extend(cols[V.max(axis=0) > V.min(axis=0)])
        start += step
        step *= 2
    return np.array(found[:k], dtype=np.int64)


def build_tree(X, Y, rng, k_features, max_depth=None, min_samples_leaf=1, sample=None) -> Tree:
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    d = X.shape[1]
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node(idx):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        counts = Y[idx].sum(axis=0)
        value.append(counts / len(idx))
        return len(feature) - 1, counts

    root_idx = np.arange(len(X)) if sample is None else np.asarray(sample)
    stack = [(*new_node(root_idx), root_idx, 0)]
    while stack:
        node, counts, idx, depth = stack.pop()
        n = len(idx)
        pure = np.all((counts == 0) | (counts == n))
        if pure or n < 2 * min_samples_leaf or (max_depth is not None and depth >= max_depth):
            continue
        perm = rng.permutation(d)
        chosen = _first_nonconstant(X, idx, perm, k_features)
        if len(chosen) == 0:
            continue
        split = best_split(X, Y, idx, chosen, min_samples_leaf, counts)
        if split is None:
            continue
        f, thr, _ = split
        go_left = X[idx, f] <= thr
        li, ri = idx[go_left], idx[~go_left]
        feature[node], threshold[node] = f, thr
        left[node], lc = new_node(li)
        right[node], rc = new_node(ri)
        # right pushed first so the left subtree is expanded first
        stack.append((right[node], rc, ri, depth + 1))
        stack.append((left[node], lc, li, depth + 1))
    return Tree(
        np.array(feature, dtype=np.int64),
        np.array(threshold),
        np.array(left, dtype=np.int64),
        np.array(right, dtype=np.int64),
        np.array(value).reshape(len(feature), Y.shape[1]),
    )


@dataclass
class Forest:
    trees: list
    n_features: int
    config: ForestConfig = field(default_factory=ForestConfig)


def forest_fit(features, labels, config: ForestConfig = ForestConfig()) -> Forest:
    X = np.asarray(features, dtype=np.float64)
    Y = np.asarray(labels, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValidationError("forest_fit needs at least one sample")
    if Y.shape[0] != X.shape[0]:
        raise ShapeError("features and labels differ in sample count")
    k = config.k_features(X.shape[1])
    trees = []
    for child in np.random.SeedSequence(config.seed).spawn(config.n_trees):
        rng = np.random.default_rng(child)
        sample = rng.integers(0, len(X), size=len(X)) if config.bootstrap else None
        trees.append(build_tree(X, Y, rng, k, config.max_depth, config.min_samples_leaf, sample))
    return Forest(trees, X.shape[1], config)


def forest_predict(forest: Forest, features) -> np.ndarray:
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != forest.n_features:
        raise ShapeError(f"expected {forest.n_features} features, got shape {X.shape}")
    return np.mean([t.predict(X) for t in forest.trees], axis=0)


# -- the three-way comparison ------------------------------------------------


def three_way_protocol(dataset, splits, preprocessing, params, model_config, forest_config=ForestConfig(),
                       threshold: float = 0.5, embeddings: Mapping | None = None) -> dict[str, MetricsReport]:
    """rf on selected raw structured features, the network itself, and rf on
    embeddings; forests fit on train+validation, everything scored on test.

    ``embeddings`` maps stay_id to a precomputed vector; when omitted the
    vectors are extracted from ``params``.
    """
    from . import hybridnet as hn
    from .featurize import structured_matrix

    fit_stays = splits.stays(dataset, "train", "validation")
    test_stays = splits.stays(dataset, "test")
    if not test_stays:
        raise ValidationError("test split is empty")
    y_fit = np.array([s.labels for s in fit_stays]).reshape(-1, N_LABELS)
    y_test = np.array([s.labels for s in test_stays]).reshape(-1, N_LABELS)
    names = preprocessing.selector.names

    rf = forest_fit(structured_matrix(fit_stays, names), y_fit, forest_config)
    rf_pred = binarize(forest_predict(rf, structured_matrix(test_stays, names)), threshold)

    enc_test = preprocessing.encode_all(test_stays)
    deep_pred = binarize(hn.predict_proba(params, model_config, enc_test), threshold)

    if embeddings is None:
        e_fit = hn.embed_encoded(params, model_config, preprocessing.encode_all(fit_stays))
        e_test = hn.embed_encoded(params, model_config, enc_test)
    else:
        e_fit = np.array([embeddings[s.stay_id] for s in fit_stays])
        e_test = np.array([embeddings[s.stay_id] for s in test_stays])
    emb_rf = forest_fit(e_fit, y_fit, forest_config)
    emb_pred = binarize(forest_predict(emb_rf, e_test), threshold)

    return {
        "rf": score(rf_pred, y_test),
        "deep": score(deep_pred, y_test),
        "emb+rf": score(emb_pred, y_test),
    }
