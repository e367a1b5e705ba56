from fractions import Fraction

import numpy as np
import pytest

from phenoflow.ehr_ingest import RecordSpan
from phenoflow.forest import (DAYS_PER_YEAR, ForestModel, ForestParams, LabeledInstances, Tree, auc,
                              build_hcc_cohort, importance_ranking, oob_auc, predict_proba,
                              split_by_record, train_forest, write_importances, write_metrics)


def instances(F, y, rids=None):
    y = np.asarray(y)
    rids = rids if rids is not None else tuple(f"r{i}" for i in range(len(y)))
    return LabeledInstances(rids, np.zeros(len(y)), y, np.asarray(F, dtype=float))


def pairwise_auc(scores, labels):
    pos = [s for s, lab in zip(scores, labels) if lab == 1]
    neg = [s for s, lab in zip(scores, labels) if lab == 0]
    wins = sum(Fraction(1) if p > n else Fraction(1, 2) if p == n else Fraction(0)
               for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


# --- labeling ---------------------------------------------------------------------

def cohort_inputs():
    spans = {
        "pos": RecordSpan("pos", 2004.9, 2016.0),      # first target 2015.0
        "late": RecordSpan("late", 2008.0, 2016.0),    # target without 10 years of history
        "short": RecordSpan("short", 2000.0, 2009.0),  # 9 years, no target
        "neg": RecordSpan("neg", 1990.0, 2012.0),
        "sparse": RecordSpan("sparse", 1990.0, 2012.0),
    }
    first = {"pos": 2015.0, "late": 2015.5}
    n_obs = {"pos": 50, "late": 50, "short": 50, "neg": 50, "sparse": 8}
    times = {"pos": np.array([2006.0]), "late": np.array([2009.0]), "short": np.array([2001.0]),
             "neg": np.array([1995.0, 2001.9, 2002.0, 2003.0]), "sparse": np.array([1995.0])}
    return spans, first, n_obs, times


def test_hcc_cohort_rules():
    spans, first, n_obs, times = cohort_inputs()
    data = build_hcc_cohort(spans, first, n_obs, times)
    rows = list(zip(data.record_ids, data.times.tolist(), data.labels.tolist()))
    assert ("pos", 2005.0, 1) in rows
    assert [r for r in rows if r[0] == "neg"] == [("neg", 1995.0, 0), ("neg", 2001.9, 0),
                                                  ("neg", 2002.0, 0)]
    assert not {"late", "short", "sparse"} & set(data.record_ids)


def test_hcc_cohort_window_and_clamp():
    spans = {"p": RecordSpan("p", 2005.05, 2016.0)}
    data = build_hcc_cohort(spans, {"p": 2015.0}, {"p": 20}, {"p": np.array([2006.0])})
    assert data.times.tolist() == [2005.05]  # inside the 30-day window, clamped to the record
    spans = {"p": RecordSpan("p", 2005.0 + 31 / DAYS_PER_YEAR, 2016.0)}
    with pytest.raises(ValueError, match="no positive"):
        build_hcc_cohort(spans, {"p": 2015.0}, {"p": 20}, {"p": np.array([2006.0])})


def test_hcc_cohort_one_per_record():
    spans, first, n_obs, times = cohort_inputs()
    data = build_hcc_cohort(spans, first, n_obs, times, one_per_record=True)
    assert list(data.record_ids).count("neg") == 1


def test_labeled_instances_validation():
    with pytest.raises(ValueError):
        LabeledInstances(("a",), np.zeros(1), np.array([2]))
    with pytest.raises(ValueError):
        LabeledInstances(("a", "b"), np.zeros(2), np.array([0, 1]), np.zeros((3, 3)))


def test_split_by_record_keeps_records_whole_and_stratifies():
    rng = np.random.default_rng(0)
    rids = tuple(f"n{i // 3}" for i in range(300)) + tuple(f"p{i}" for i in range(20))
    y = np.r_[np.zeros(300, dtype=int), np.ones(20, dtype=int)]
    data = instances(rng.normal(size=(2, 320)), y, rids)
    train = split_by_record(data, 0.2, seed=1)
    arr = np.asarray(rids)
    assert not set(arr[train]) & set(arr[~train])
    assert int(y[~train].sum()) == 4
    assert len(set(arr[~train & (y == 0)])) == 20
    assert np.array_equal(train, split_by_record(data, 0.2, seed=1))


# --- training and prediction --------------------------------------------------------

def test_separable_one_feature():
    x = np.linspace(-1, 1, 41)
    y = (x > 0).astype(int)
    data = instances(x[None, :], y)
    model = train_forest(data, ForestParams(n_trees=50), seed=0)
    assert np.all((predict_proba(model, x[None, :]) >= 0.5) == y)


def test_noise_labels_give_chance_oob_auc():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        y = rng.permutation(np.r_[np.ones(1000, dtype=int), np.zeros(1000, dtype=int)])
        model = train_forest(instances(rng.normal(size=(5, 2000)), y), ForestParams(n_trees=30), seed)
        assert abs(oob_auc(model, y) - 0.5) <= 0.05


def test_informative_features_dominate_importance():
    rng = np.random.default_rng(3)
    F = rng.normal(size=(10, 800))
    y = (F[2] + F[7] + 0.3 * rng.normal(size=800) > 0).astype(int)
    model = train_forest(instances(F, y), ForestParams(n_trees=100), seed=3)
    assert model.importances[2] + model.importances[7] > 0.6
    assert {j for j, _ in importance_ranking(model)[:2]} == {2, 7}


def test_importances_non_negative_and_normalized():
    rng = np.random.default_rng(4)
    F = rng.normal(size=(4, 300))
    F[3] = 1.0  # constant: never split on
    y = (F[0] > 0.2).astype(int)
    model = train_forest(instances(F, y), ForestParams(n_trees=40), seed=4)
    assert np.all(model.importances >= 0)
    assert abs(model.importances.sum() - 1) <= 1e-9
    assert model.importances[3] == 0.0


def test_bootstrap_and_determinism(monkeypatch):
    rng = np.random.default_rng(5)
    F = rng.normal(size=(3, 200))
    y = (F[0] + rng.normal(size=200) > 0).astype(int)
    data = instances(F, y)
    a = train_forest(data, ForestParams(n_trees=20), seed=11)
    assert np.all(a.in_bag.sum(axis=1) == 200)
    monkeypatch.setenv("PHENOFLOW_THREADS", "4")
    b = train_forest(data, ForestParams(n_trees=20), seed=11)
    assert predict_proba(a, F).tobytes() == predict_proba(b, F).tobytes()
    assert a.importances.tobytes() == b.importances.tobytes()
    assert np.array_equal(a.oob_scores, b.oob_scores, equal_nan=True)


def test_training_errors():
    with pytest.raises(ValueError, match="both classes"):
        train_forest(instances(np.ones((2, 5)), np.zeros(5, dtype=int)))
    with pytest.raises(ValueError):
        train_forest(instances(np.zeros((0, 4)), [0, 1, 0, 1]))
    with pytest.raises(ValueError):
        ForestParams(class_weight="inverse")


def stump(value_left, value_right):
    return Tree(np.array([0, -1, -1]), np.array([0.0, 0.0, 0.0]), np.array([1, -1, -1]),
                np.array([2, -1, -1]), np.array([0.5, value_left, value_right]), np.zeros(1))


def hand_model(trees):
    return ForestModel(trees, list(range(len(trees))), np.ones((len(trees), 1)), np.ones(1),
                       ForestParams(n_trees=len(trees)), 1)


def test_predict_vote_fractions():
    X = np.array([[-1.0, 1.0]])
    assert predict_proba(hand_model([stump(1.0, 1.0)] * 10), X).tolist() == [1.0, 1.0]
    half = hand_model([stump(1.0, 1.0)] * 150 + [stump(0.0, 0.0)] * 150)
    assert predict_proba(half, X).tolist() == [0.5, 0.5]
    one = hand_model([stump(0.25, 0.8)])
    assert predict_proba(one, X).tolist() == [0.25, 0.8]
    with pytest.raises(ValueError):
        predict_proba(one, np.zeros((2, 3)))


def test_single_tree_matches_manual_walk():
    rng = np.random.default_rng(6)
    F = rng.normal(size=(3, 150))
    y = (F[1] - F[2] + 0.5 * rng.normal(size=150) > 0).astype(int)
    model = train_forest(instances(F, y), ForestParams(n_trees=1), seed=6)
    tree = model.trees[0]
    Xq = rng.normal(size=(3, 40))
    for col, got in zip(Xq.T, predict_proba(model, Xq)):
        node = 0
        while tree.feature[node] >= 0:
            node = tree.left[node] if col[tree.feature[node]] <= tree.threshold[node] else tree.right[node]
        assert got == tree.value[node]


def test_balanced_weights_raise_minority_recall():
    recalls = []
    for s in range(5):
        rng = np.random.default_rng(50 + s)
        y = (rng.random(1500) < 0.04).astype(int)
        F = rng.normal(size=(4, 1500))
        F[0] += 1.5 * y
        F[1] += 1.0 * y
        train = np.arange(1500) < 1000
        data = instances(F, y)
        pair = []
        for cw in (None, "balanced"):
            model = train_forest(data.subset(train), ForestParams(n_trees=100, min_leaf=5,
                                                                  class_weight=cw), s)
            scores = predict_proba(model, F[:, ~train])
            pair.append(np.mean(scores[y[~train] == 1] >= 0.5))
        recalls.append(pair)
    recalls = np.array(recalls)
    assert np.all(recalls[:, 1] > recalls[:, 0])


# --- AUC ----------------------------------------------------------------------------

def test_auc_examples():
    assert auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auc([0.5] * 6, [0, 1, 0, 1, 1, 0]) == 0.5
    assert auc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 0.0
    with pytest.raises(ValueError):
        auc([0.1, 0.2], [1, 1])


def test_auc_matches_pairwise_oracle(rng):
    scores = np.round(rng.random(20), 1)
    labels = np.r_[np.ones(8, dtype=int), np.zeros(12, dtype=int)]
    rng.shuffle(labels)
    assert auc(scores, labels) == float(pairwise_auc(scores, labels))


def test_auc_invariant_to_monotone_transform(rng):
    scores = rng.normal(size=200)
    labels = (scores + rng.normal(size=200) > 0).astype(int)
    assert auc(scores, labels) == auc(np.exp(3 * scores) + 7, labels)


def test_output_files(tmp_path):
    model = hand_model([stump(0.0, 1.0)])
    model.importances = np.array([1.0])
    write_importances(tmp_path / "imp.tsv", model)
    assert (tmp_path / "imp.tsv").read_text() == "0\t1.0\n"
    write_metrics(tmp_path / "m.txt", {"heldout_auc": 0.75, "test_positive": 3})
    assert (tmp_path / "m.txt").read_text() == "heldout_auc\t0.75\ntest_positive\t3\n"
