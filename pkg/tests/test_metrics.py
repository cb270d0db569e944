"""Metric definitions versus brute-force enumeration."""

import numpy as np
import pytest

from actionkd.metrics import (
    PredictionRecord,
    acc_at_1,
    class_mean_recall,
    load_predictions,
    many_shot_recall_at_k,
    metric_rows,
    records_from_probs,
    top_k_accuracy,
    write_predictions,
)

import reference as ref


def _rec(i, topk_ids, target):
    n = len(topk_ids)
    probs = np.linspace(0.9, 0.1, n)
    return PredictionRecord(f"r{i}", [(c, float(p)) for c, p in zip(topk_ids, probs)], target)


def _random_records(rng, n_records, n_classes, depth=5):
    records = []
    for i in range(n_records):
        probs = rng.dirichlet(np.ones(n_classes))
        order = np.argsort(-probs, kind="stable")[: min(depth, n_classes)]
        records.append(
            PredictionRecord(
                f"r{i}",
                [(int(c), float(probs[c])) for c in order],
                int(rng.integers(0, n_classes)),
            )
        )
    return records


# -- acc@1 -------------------------------------------------------------------


def test_acc_all_correct():
    records = [_rec(i, [1, 2, 3], 1) for i in range(4)]
    assert acc_at_1(records) == 1.0


def test_acc_none_correct():
    records = [_rec(i, [1, 2, 3], 0) for i in range(4)]
    assert acc_at_1(records) == 0.0


def test_acc_hand_count():
    records = [_rec(0, [1], 1), _rec(1, [2], 2), _rec(2, [3], 0)]
    assert acc_at_1(records) == pytest.approx(2 / 3)
    assert acc_at_1(records) == pytest.approx(ref.acc_at_1_ref(records))


def test_acc_empty_rejected():
    with pytest.raises(ValueError):
        acc_at_1([])


# -- class-mean recall ------------------------------------------------------------


def test_recall_hand_enumeration():
    # targets [0,0,1]; top-1 preds [0,1,1] -> recall_0=0.5, recall_1=1.0
    records = [_rec(0, [0], 0), _rec(1, [1], 0), _rec(2, [1], 1)]
    assert class_mean_recall(records, 1) == pytest.approx(0.75)
    assert class_mean_recall(records, 1) == pytest.approx(ref.class_mean_recall_ref(records, 1))


def test_recall_perfect_regardless_of_balance():
    records = [_rec(i, [7], 7) for i in range(9)] + [_rec(9, [2], 2)]
    assert class_mean_recall(records, 1) == 1.0


def test_recall_single_class_equals_acc():
    rng = np.random.default_rng(0)
    records = [_rec(i, [int(rng.integers(0, 3))], 1) for i in range(10)]
    assert class_mean_recall(records, 1) == pytest.approx(acc_at_1(records))


def test_recall_monotone_in_k():
    rng = np.random.default_rng(1)
    records = _random_records(rng, 40, 6)
    values = [class_mean_recall(records, k) for k in (1, 2, 3, 4, 5)]
    assert all(a <= b + 1e-12 for a, b in zip(values, values[1:]))


def test_metrics_invariant_under_reordering():
    rng = np.random.default_rng(2)
    records = _random_records(rng, 30, 5)
    shuffled = list(records)
    rng.shuffle(shuffled)
    assert acc_at_1(records) == acc_at_1(shuffled)
    assert class_mean_recall(records, 3) == class_mean_recall(shuffled, 3)
    assert top_k_accuracy(records, 5) == top_k_accuracy(shuffled, 5)


# -- many-shot recall --------------------------------------------------------------


def test_many_shot_all_classes_reduces_to_recall():
    rng = np.random.default_rng(3)
    records = _random_records(rng, 50, 6)
    everything = set(range(6))
    assert many_shot_recall_at_k(records, everything, 5) == pytest.approx(
        class_mean_recall(records, 5)
    )
    assert many_shot_recall_at_k(records, everything, 1) == pytest.approx(
        class_mean_recall(records, 1)
    )


def test_many_shot_ignores_rare_classes():
    # class 0 many-shot with 2 records, one hit in top-5; class 1 ignored
    records = [
        _rec(0, [0, 2, 3, 4, 5], 0),
        _rec(1, [2, 3, 4, 5, 6], 0),
        _rec(2, [1], 1),
    ]
    assert many_shot_recall_at_k(records, {0}, 5) == pytest.approx(0.5)
    assert many_shot_recall_at_k(records, {0}, 5) == pytest.approx(
        ref.many_shot_recall_ref(records, {0}, 5)
    )


def test_many_shot_empty_intersection_rejected():
    records = [_rec(0, [0], 0)]
    with pytest.raises(ValueError, match="no many-shot targets"):
        many_shot_recall_at_k(records, {5}, 5)


# -- oracle equivalence ------------------------------------------------------------


def test_brute_force_equivalence_100_trials():
    rng = np.random.default_rng(4)
    for _ in range(100):
        n_classes = int(rng.integers(2, 7))
        n_records = int(rng.integers(1, 51))
        records = _random_records(rng, n_records, n_classes, depth=n_classes)
        assert acc_at_1(records) == pytest.approx(ref.acc_at_1_ref(records), abs=1e-12)
        for k in (1, min(5, n_classes)):
            assert class_mean_recall(records, k) == pytest.approx(
                ref.class_mean_recall_ref(records, k), abs=1e-12
            )
        present = {r.target for r in records}
        many = set(rng.choice(sorted(present), size=max(1, len(present) // 2), replace=False))
        assert many_shot_recall_at_k(records, many, 5) == pytest.approx(
            ref.many_shot_recall_ref(records, many, 5), abs=1e-12
        )


# -- records and dumps ----------------------------------------------------------------


def test_records_from_probs_ties_to_lowest_id():
    probs = np.array([[0.25, 0.25, 0.25, 0.25]])
    records = records_from_probs(["a"], probs, [2], k=2)
    assert [i for i, _ in records[0].topk] == [0, 1]


def test_record_validation():
    with pytest.raises(ValueError, match="duplicate"):
        PredictionRecord("x", [(1, 0.6), (1, 0.4)], 1)
    with pytest.raises(ValueError, match="non-increasing"):
        PredictionRecord("x", [(1, 0.4), (2, 0.6)], 1)


def test_prediction_dump_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    records = _random_records(rng, 20, 5)
    path = tmp_path / "preds.jsonl"
    write_predictions(records, path)
    loaded = load_predictions(path)
    assert loaded == records


def test_metric_rows_report(tmp_path):
    rng = np.random.default_rng(6)
    records = _random_records(rng, 25, 5)
    rows = metric_rows(records, many_shot={0, 1, 2}, recall_k=5)
    names = [r["metric"] for r in rows]
    assert names == ["Acc@1", "Rec@1", "Rec@5", "MS-Rec@5"]
    assert all(r["n_records"] == 25 for r in rows)
