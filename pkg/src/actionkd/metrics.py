"""Evaluation metrics over dumped prediction records.

Metrics consume PredictionRecords (not live models) so every reported
number can be recomputed from the persisted dumps alone.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


@dataclass
class PredictionRecord:
    instance_id: str
    topk: list[tuple[int, float]]  # (action_id, prob), descending prob
    target: int

    def __post_init__(self):
        ids = [i for i, _ in self.topk]
        if len(set(ids)) != len(ids):
            raise ValueError(f"record {self.instance_id}: duplicate ids in topk")
        probs = [p for _, p in self.topk]
        if any(a < b for a, b in zip(probs, probs[1:])):
            raise ValueError(f"record {self.instance_id}: probs must be non-increasing")


def records_from_probs(
    instance_ids: Sequence[str], probs: np.ndarray, targets: Sequence[int], k: int
) -> list[PredictionRecord]:
    """Top-k records from a (N, C) probability matrix; ties to lowest id."""
    probs = np.asarray(probs)
    k = min(k, probs.shape[1])
    order = np.argsort(-probs, axis=1, kind="stable")[:, :k]
    records = []
    for i, inst_id in enumerate(instance_ids):
        picks = [(int(c), float(probs[i, c])) for c in order[i]]
        records.append(PredictionRecord(str(inst_id), picks, int(targets[i])))
    return records


def _check_nonempty(records) -> list[PredictionRecord]:
    records = list(records)
    if not records:
        raise ValueError("no prediction records")
    return records


def acc_at_1(records: Iterable[PredictionRecord]) -> float:
    records = _check_nonempty(records)
    hits = sum(1 for r in records if r.topk[0][0] == r.target)
    return hits / len(records)


def top_k_accuracy(records: Iterable[PredictionRecord], k: int) -> float:
    records = _check_nonempty(records)
    if k < 1:
        raise ValueError("k must be >= 1")
    hits = sum(1 for r in records if r.target in [i for i, _ in r.topk[:k]])
    return hits / len(records)


def class_mean_recall(records: Iterable[PredictionRecord], k: int = 1) -> float:
    """Unweighted mean over classes present in the targets of top-k recall.

    Per-class recalls are exact integer ratios and classes are summed in id
    order, so the value is bit-identical under record reordering.
    """
    records = _check_nonempty(records)
    if k < 1:
        raise ValueError("k must be >= 1")
    per_class: dict[int, list[int]] = {}
    for r in records:
        hit = int(r.target in [i for i, _ in r.topk[:k]])
        per_class.setdefault(r.target, []).append(hit)
    recalls = [sum(per_class[c]) / len(per_class[c]) for c in sorted(per_class)]
    return sum(recalls) / len(recalls)


def many_shot_recall_at_k(
    records: Iterable[PredictionRecord], many_shot: set[int], k: int = 5
) -> float:
    """class_mean_recall restricted to the many-shot classes."""
    records = _check_nonempty(records)
    kept = [r for r in records if r.target in many_shot]
    if not kept:
        raise ValueError("no many-shot targets in split")
    return class_mean_recall(kept, k)


# ---------------------------------------------------------------------------
# Dumps and reports
# ---------------------------------------------------------------------------


def write_predictions(records: Iterable[PredictionRecord], path: str | Path) -> None:
    lines = []
    for r in records:
        lines.append(
            json.dumps(
                {"id": r.instance_id, "topk": [[i, p] for i, p in r.topk], "target": r.target},
                separators=(",", ":"),
            )
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_predictions(path: str | Path) -> list[PredictionRecord]:
    records = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        doc = json.loads(line)
        records.append(
            PredictionRecord(
                instance_id=str(doc["id"]),
                topk=[(int(i), float(p)) for i, p in doc["topk"]],
                target=int(doc["target"]),
            )
        )
    if not records:
        raise ValueError("no prediction records")
    return records


def metric_rows(
    records: list[PredictionRecord], many_shot: set[int] | None = None, recall_k: int = 5
) -> list[dict]:
    """The standard metric set as report rows."""
    n_classes = len({r.target for r in records})
    rows = [
        {"metric": "Acc@1", "value": acc_at_1(records), "k": 1},
        {"metric": "Rec@1", "value": class_mean_recall(records, 1), "k": 1},
        {"metric": f"Rec@{recall_k}", "value": class_mean_recall(records, recall_k), "k": recall_k},
    ]
    if many_shot is not None:
        try:
            ms = many_shot_recall_at_k(records, many_shot, recall_k)
        except ValueError:
            ms = float("nan")
        rows.append({"metric": f"MS-Rec@{recall_k}", "value": ms, "k": recall_k})
    for row in rows:
        row["n_records"] = len(records)
        row["n_classes"] = n_classes
    return rows


def write_metric_report(rows: list[dict], path: str | Path) -> None:
    lines = ["metric\tvalue\tk\tn_records\tn_classes"]
    for row in rows:
        lines.append(
            f"{row['metric']}\t{row['value']:.6f}\t{row['k']}"
            f"\t{row['n_records']}\t{row['n_classes']}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
