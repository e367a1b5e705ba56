"""Lookahead labeling, a Gini random forest over phenotype expressions, and AUC."""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from ._seeding import derive_rng, derive_seed
from .ehr_ingest import RecordSpan

DEFAULT_TARGET_CODES = frozenset({"155.0", "155.1", "155.2"})
DAYS_PER_YEAR = 365.25


@dataclass(frozen=True, eq=False)
class LabeledInstances:
    """Instances for the prediction task; ``features`` is k x l (may be empty until projected)."""

    record_ids: tuple
    times: np.ndarray
    labels: np.ndarray
    features: np.ndarray | None = None

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "times", np.asarray(self.times, dtype=np.float64))
        if not (len(self.record_ids) == len(self.times) == len(labels)):
            raise ValueError("record_ids, times and labels differ in length")
        if np.any((labels != 0) & (labels != 1)):
            raise ValueError("labels must be 0 or 1")
        if self.features is not None:
            feats = np.asarray(self.features, dtype=np.float64)
            if feats.ndim != 2 or feats.shape[1] != len(labels):
                raise ValueError("features must be k x l with l = number of labels")
            object.__setattr__(self, "features", feats)

    def __len__(self):
        return len(self.labels)

    def with_features(self, features) -> "LabeledInstances":
        return LabeledInstances(self.record_ids, self.times, self.labels, features)

    def subset(self, mask) -> "LabeledInstances":
        mask = np.asarray(mask)
        rids = tuple(np.asarray(self.record_ids, dtype=object)[mask])
        feats = None if self.features is None else self.features[:, mask]
        return LabeledInstances(rids, self.times[mask], self.labels[mask], feats)

    def sample_times(self) -> dict[str, np.ndarray]:
        out: dict[str, list] = {}
        for rid, t in zip(self.record_ids, self.times):
            out.setdefault(rid, []).append(t)
        return {rid: np.array(ts) for rid, ts in out.items()}

    def label_map(self) -> dict[str, np.ndarray]:
        out: dict[str, list] = {}
        for rid, lab in zip(self.record_ids, self.labels):
            out.setdefault(rid, []).append(lab)
        return {rid: np.array(ls) for rid, ls in out.items()}


def build_hcc_cohort(spans: Mapping[str, RecordSpan], first_target: Mapping[str, float],
                     n_observations: Mapping[str, int], sample_times: Mapping[str, np.ndarray],
                     horizon: float = 10.0, min_data: int = 10,
                     window: float = 30.0 / DAYS_PER_YEAR,
                     one_per_record: bool = False) -> LabeledInstances:
    """Instances for predicting the first target code exactly ``horizon`` years ahead.

    Positives: one instance per record whose earliest target code falls at
    least ``horizon`` years after the record start (``window`` slack), placed at
    ``first_target - horizon`` clamped into the span. Negatives: records at
    least ``horizon`` long with no target code, at each sampled time leaving
    ``horizon`` years of record (only the first such time if
    ``one_per_record``). Records with fewer than ``min_data`` observations are
    dropped.
    """
    rids, times, labels = [], [], []
    for rid in sorted(spans):
        span = spans[rid]
        if n_observations.get(rid, 0) < min_data:
            continue
        if rid in first_target:
            mark = first_target[rid] - horizon
            if span.start <= mark + window:
                rids.append(rid)
                times.append(max(mark, span.start))
                labels.append(1)
            continue
        if span.length < horizon:
            continue
        t = np.sort(np.asarray(sample_times.get(rid, ()), dtype=np.float64))
        t = t[t <= span.end - horizon]
        if one_per_record:
            t = t[:1]
        rids.extend([rid] * len(t))
        times.extend(t.tolist())
        labels.extend([0] * len(t))
    if 1 not in labels:
        raise ValueError("no positive instances: the prediction task is undefined")
    return LabeledInstances(tuple(rids), np.array(times), np.array(labels))


def split_by_record(data: LabeledInstances, test_fraction: float = 0.2, seed: int = 0):
    """Boolean train mask; whole records go to one side, stratified on record label."""
    rids = np.asarray(data.record_ids, dtype=object)
    positive_records = sorted(set(rids[data.labels == 1]))
    negative_records = sorted(set(rids) - set(positive_records))
    rng = derive_rng(seed, "holdout")
    test = set()
    for group in (positive_records, negative_records):
        n_test = int(round(test_fraction * len(group)))
        picked = rng.permutation(len(group))[:n_test]
        test.update(group[i] for i in picked)
    return np.array([r not in test for r in rids], dtype=bool)


@dataclass(frozen=True)
class ForestParams:
    """Forest hyperparameters; ``mtry=None`` means ceil(sqrt(k)).

    ``class_weight="balanced"`` reweights classes to equal total weight in
    split search and leaf fractions. Fully grown trees (``min_leaf=1``) end in
    pure leaves, so the reweighting only moves scores noticeably when
    ``min_leaf > 1`` or ``max_depth`` is set.
    """

    n_trees: int = 300
    mtry: int | None = None
    max_depth: int | None = None
    min_leaf: int = 1
    class_weight: str | None = None

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.mtry is not None and self.mtry < 1:
            raise ValueError("mtry must be >= 1")
        if self.min_leaf < 1:
            raise ValueError("min_leaf must be >= 1")
        if self.class_weight not in (None, "balanced"):
            raise ValueError("class_weight must be None or 'balanced'")


@dataclass(eq=False)
class Tree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray        # weighted positive fraction at each node
    importance: np.ndarray   # per-feature impurity decrease, weighted by node fraction

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index for each row of ``X`` (l x k)."""
        node = np.zeros(len(X), dtype=np.int64)
        active = np.flatnonzero(self.feature[node] >= 0)
        while active.size:
            cur = node[active]
            go_left = X[active, self.feature[cur]] <= self.threshold[cur]
            node[active] = np.where(go_left, self.left[cur], self.right[cur])
            active = active[self.feature[node[active]] >= 0]
        return node

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    @property
    def n_nodes(self) -> int:
        return len(self.feature)


def _best_split(x, w, w1, total, total1, min_leaf):
    """Best threshold on one feature: (decrease, threshold) or None."""
    order = np.argsort(x, kind="stable")
    xs = x[order]
    distinct = xs[:-1] < xs[1:]
    if min_leaf > 1:
        pos = np.arange(1, len(xs))
        distinct &= (pos >= min_leaf) & (len(xs) - pos >= min_leaf)
    if not distinct.any():
        return None
    wl = np.cumsum(w[order])[:-1]
    wl1 = np.cumsum(w1[order])[:-1]
    wr = total - wl
    wr1 = total1 - wl1
    with np.errstate(divide="ignore", invalid="ignore"):
        child = 2.0 * (wl1 * (wl - wl1) / wl + wr1 * (wr - wr1) / wr)
    child = np.where(distinct, child, np.inf)
    i = int(np.argmin(child))
    parent = 2.0 * total1 * (total - total1) / total
    thr = 0.5 * (xs[i] + xs[i + 1])
    if not thr < xs[i + 1]:
        thr = xs[i]
    return parent - child[i], thr


def grow_tree(X, y, weights, params: ForestParams, mtry: int, rng) -> Tree:
    """CART tree on rows with positive ``weights`` (bootstrap counts times class weights)."""
    k = X.shape[1]
    rows = np.flatnonzero(weights > 0)
    w_all = weights
    w1_all = weights * (y == 1)
    root_weight = w_all[rows].sum()

    feature, threshold, left, right, value = [], [], [], [], []
    importance = np.zeros(k)

    def new_node(idx):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        wsum = w_all[idx].sum()
        value.append(w1_all[idx].sum() / wsum)
        return len(feature) - 1

    stack = [(new_node(rows), rows, 0)]
    while stack:
        node, idx, depth = stack.pop()
        w, w1 = w_all[idx], w1_all[idx]
        total, total1 = w.sum(), w1.sum()
        if total1 <= 0 or total1 >= total or len(idx) < 2 * params.min_leaf:
            continue
        if params.max_depth is not None and depth >= params.max_depth:
            continue
        best = None
        visited = 0
        for f in rng.permutation(k):
            if visited >= mtry:
                break
            x = X[idx, f]
            if x.min() == x.max():
                continue
            visited += 1
            found = _best_split(x, w, w1, total, total1, params.min_leaf)
            if found is not None and (best is None or found[0] > best[0]):
                best = (found[0], found[1], f)
        if best is None or not best[0] > 1e-12 * total:
            continue
        decrease, thr, f = best
        importance[f] += decrease / root_weight
        go_left = X[idx, f] <= thr
        li, ri = idx[go_left], idx[~go_left]
        feature[node], threshold[node] = int(f), float(thr)
        left[node] = new_node(li)
        right[node] = new_node(ri)
        stack.append((right[node], ri, depth + 1))
        stack.append((left[node], li, depth + 1))

    return Tree(np.array(feature, dtype=np.int64), np.array(threshold), np.array(left, dtype=np.int64),
                np.array(right, dtype=np.int64), np.array(value), importance)


@dataclass(eq=False)
class ForestModel:
    trees: list
    tree_seeds: list
    in_bag: np.ndarray          # n_trees x l bootstrap counts
    importances: np.ndarray     # k, sums to 1
    params: ForestParams
    n_features: int
    oob_scores: np.ndarray = field(default=None, repr=False)


def _thread_count() -> int:
    try:
        return max(1, int(os.environ.get("PHENOFLOW_THREADS", "1")))
    except ValueError:
        return 1


def train_forest(data: LabeledInstances, params: ForestParams = ForestParams(),
                 seed: int = 0) -> ForestModel:
    """Bootstrap-aggregated CART trees with ``mtry`` candidate features per node.

    Tree t uses its own generator derived from ``(seed, t)``, so results do
    not depend on how trees are scheduled across threads.
    """
    if data.features is None:
        raise ValueError("instances carry no features; project them first")
    k, l = data.features.shape
    if k == 0:
        raise ValueError("no features")
    y = data.labels
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == l:
        raise ValueError("training data must contain both classes")
    X = np.ascontiguousarray(data.features.T)
    mtry = params.mtry if params.mtry is not None else math.ceil(math.sqrt(k))
    mtry = min(mtry, k)
    if params.class_weight == "balanced":
        class_w = np.where(y == 1, l / (2.0 * n_pos), l / (2.0 * (l - n_pos)))
    else:
        class_w = np.ones(l)

    seeds = [derive_seed(seed, "tree", t) for t in range(params.n_trees)]

    def one_tree(t):
        rng = derive_rng(seeds[t])
        counts = np.bincount(rng.integers(0, l, size=l), minlength=l)
        return grow_tree(X, y, counts * class_w, params, mtry, rng), counts

    threads = _thread_count()
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(one_tree, range(params.n_trees)))
    else:
        results = [one_tree(t) for t in range(params.n_trees)]
    trees = [r[0] for r in results]
    in_bag = np.vstack([r[1] for r in results])

    imp = np.mean([tr.importance for tr in trees], axis=0)
    if imp.sum() > 0:
        imp = imp / imp.sum()

    oob_sum = np.zeros(l)
    oob_n = np.zeros(l)
    for tr, counts in zip(trees, in_bag):
        out = counts == 0
        if out.any():
            oob_sum[out] += tr.predict(X[out])
            oob_n[out] += 1
    with np.errstate(invalid="ignore"):
        oob = np.where(oob_n > 0, oob_sum / np.maximum(oob_n, 1), np.nan)
    return ForestModel(trees, seeds, in_bag, imp, params, k, oob)


def predict_proba(model: ForestModel, features) -> np.ndarray:
    """Mean over trees of the positive fraction in the reached leaf; ``features`` is k x l."""
    F = np.asarray(features, dtype=np.float64)
    if F.ndim != 2 or F.shape[0] != model.n_features:
        raise ValueError(f"expected {model.n_features} feature rows, got shape {F.shape}")
    X = np.ascontiguousarray(F.T)
    total = np.zeros(X.shape[0])
    for tr in model.trees:
        total += tr.predict(X)
    return total / len(model.trees)


def oob_auc(model: ForestModel, labels) -> float:
    labels = np.asarray(labels)
    ok = np.isfinite(model.oob_scores)
    return auc(model.oob_scores[ok], labels[ok])


def auc(scores, labels) -> float:
    """Mann-Whitney U / (n_pos * n_neg), ties counted as one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be 1-D of equal length")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes")
    _, inverse, counts = np.unique(scores, return_inverse=True, return_counts=True)
    below = np.cumsum(counts) - counts
    midrank = below + (counts + 1) / 2.0
    u = midrank[inverse][pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def importance_ranking(model: ForestModel) -> list[tuple[int, float]]:
    order = np.argsort(-model.importances, kind="stable")
    return [(int(j), float(model.importances[j])) for j in order]


def write_importances(path, model: ForestModel) -> None:
    """``component_id<TAB>importance`` sorted by descending importance."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for j, imp in importance_ranking(model):
            fh.write(f"{j}\t{imp!r}\n")


def write_metrics(path, metrics: dict) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for key, val in metrics.items():
            fh.write(f"{key}\t{val!r}\n" if isinstance(val, float) else f"{key}\t{val}\n")
