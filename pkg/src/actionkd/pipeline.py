"""Experiment orchestration: full training pipeline, sweeps, reports.

A run executes, per seed: build data -> (optional) encoder pretraining ->
teacher fine-tuning -> student training with and without distillation ->
frames-only evaluation -> prediction dumps and metric reports. Everything
is a pure function of (config, seeds, input files); re-running a config
reproduces every artifact byte for byte.
"""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .corpus import (
    Dataset,
    extract_corpus,
    gen_synthetic,
    gen_synthetic_corpus,
    load_dataset,
)
from .ensemble import TeacherBundle, train_ensemble_student
from .metrics import (
    PredictionRecord,
    metric_rows,
    records_from_probs,
    write_metric_report,
    write_predictions,
)
from .nn import save_checkpoint
from .student import StudentModel, student_eval_probs, train_student
from .teacher import TeacherModel, encode_dataset, finetune_teacher, pretrain_mlm, teacher_eval_logits
from .vocab import Vocabulary, build_vocab, compute_class_stats
from . import nn

logger = logging.getLogger(__name__)

MODEL_ORDER = [
    "teacher",
    "rcp_teacher",
    "baseline_student",
    "distilled_student",
    "rcp_distilled_student",
]
METRIC_ORDER = ["Acc@1", "Rec@1", "Rec@5", "MS-Rec@5"]

SWEEPABLE = ("lambda_s", "gamma", "top_k", "ensemble_heads", "strategy")


@dataclass
class RunReport:
    rows: dict[str, dict[str, dict]]  # model -> metric -> {per_seed, mean, std}
    seeds: list[int]
    config: dict
    wall_clock: float = 0.0
    failures: dict[int, str] = field(default_factory=dict)

    def mean(self, model: str, metric: str) -> float:
        return self.rows[model][metric]["mean"]

    def per_seed(self, model: str, metric: str) -> dict[int, float]:
        return self.rows[model][metric]["per_seed"]


# ---------------------------------------------------------------------------
# Per-seed pipeline
# ---------------------------------------------------------------------------


def collect_student_records(
    model: StudentModel, dataset: Dataset, vocab: Vocabulary, k: int
) -> list[PredictionRecord]:
    """Evaluate from frames only; the segment labels never enter this path."""
    probs = student_eval_probs(model, dataset)
    ids = [inst.id for inst in dataset.instances]
    targets = [vocab.label(i.target.verb, i.target.object).action_id for i in dataset.instances]
    return records_from_probs(ids, probs, targets, k)


def collect_teacher_records(
    model: TeacherModel, dataset: Dataset, vocab: Vocabulary, k: int
) -> list[PredictionRecord]:
    tokens, action_ids, _, _ = encode_dataset(dataset, vocab, model.cfg.context_len)
    logits, _ = teacher_eval_logits(model, tokens)
    probs = nn.softmax_temp(logits).data
    ids = [inst.id for inst in dataset.instances]
    return records_from_probs(ids, probs, action_ids, k)


def build_data(cfg: ExperimentConfig, seed: int):
    """(train, test, pretraining corpus or None) for one seed."""
    if cfg.dataset_train is not None:
        if cfg.dataset_test is None:
            raise ValueError("dataset_test is required when dataset_train is given")
        train = load_dataset(cfg.dataset_train, tau=cfg.tau)
        test = load_dataset(cfg.dataset_test, tau=cfg.tau)
    else:
        train, test = gen_synthetic(cfg.synth, seed)
    corpus = None
    if cfg.pretrain:
        if cfg.corpus_path is not None:
            corpus, _ = extract_corpus(cfg.corpus_path)
        else:
            corpus = gen_synthetic_corpus(
                cfg.synth, cfg.pretrain_corpus_seed, cfg.pretrain_corpus_sequences
            )
    return train, test, corpus


def run_seed(cfg: ExperimentConfig, seed: int) -> dict:
    """One seed's full pipeline; persists checkpoints, dumps, and metrics."""
    out = Path(cfg.out_dir) / f"seed_{seed}"
    out.mkdir(parents=True, exist_ok=True)
    scfg = cfg.with_seed(seed)
    results: dict = {}
    stage = "data"
    try:
        train, test, corpus = build_data(cfg, seed)
        sources = [train, test] + ([corpus] if corpus else [])
        vocab = build_vocab(*sources)
        stats = compute_class_stats(train, vocab, cfg.many_shot_threshold)
        vocab.save(out / "vocab.json")
        (out / "class_stats.json").write_text(stats.to_json() + "\n", encoding="utf-8")

        def evaluate(name: str, records: list[PredictionRecord]) -> None:
            write_predictions(records, out / f"preds_{name}.jsonl")
            rows = metric_rows(records, stats.many_shot, recall_k=5)
            write_metric_report(rows, out / f"metrics_{name}.tsv")
            results[name] = {r["metric"]: r["value"] for r in rows}

        need_teacher = cfg.with_teacher or cfg.with_distilled or cfg.pretrain
        teachers = []
        teacher = None
        if need_teacher:
            stage = "teacher"
            for i in range(cfg.n_teachers):
                tcfg = replace(scfg.teacher, seed=seed + 1000 * i)
                teachers.append(
                    finetune_teacher(train, vocab, tcfg, class_weight_vector=stats.weights)
                )
            teacher = teachers[0]
            save_checkpoint(out / "ckpt_teacher.json", teacher.to_checkpoint())
            evaluate("teacher", collect_teacher_records(teacher, test, vocab, cfg.eval_topk))

        if cfg.with_baseline:
            stage = "baseline_student"
            baseline = train_student(train, vocab, scfg.student)
            save_checkpoint(out / "ckpt_baseline_student.json", baseline.to_checkpoint(vocab))
            evaluate(
                "baseline_student",
                collect_student_records(baseline, test, vocab, cfg.eval_topk),
            )

        if cfg.with_distilled:
            stage = "distilled_student"
            if len(teachers) > 1:
                distilled, _ = train_ensemble_student(
                    train, vocab, TeacherBundle(teachers), scfg.student, scfg.distill,
                    cfg.ensemble,
                )
            else:
                distilled = train_student(
                    train, vocab, scfg.student, distill_cfg=scfg.distill, teacher=teacher
                )
            save_checkpoint(out / "ckpt_distilled_student.json", distilled.to_checkpoint(vocab))
            evaluate(
                "distilled_student",
                collect_student_records(distilled, test, vocab, cfg.eval_topk),
            )

        if cfg.pretrain:
            stage = "rcp_teacher"
            mlm_ckpt = pretrain_mlm(corpus, vocab, scfg.teacher)
            save_checkpoint(out / "ckpt_pretrained_encoder.json", mlm_ckpt)
            rcp_teacher = finetune_teacher(
                train, vocab, scfg.teacher, init=mlm_ckpt, class_weight_vector=stats.weights
            )
            save_checkpoint(out / "ckpt_rcp_teacher.json", rcp_teacher.to_checkpoint())
            evaluate(
                "rcp_teacher", collect_teacher_records(rcp_teacher, test, vocab, cfg.eval_topk)
            )
            stage = "rcp_distilled_student"
            rcp_distilled = train_student(
                train, vocab, scfg.student, distill_cfg=scfg.distill, teacher=rcp_teacher
            )
            save_checkpoint(
                out / "ckpt_rcp_distilled_student.json", rcp_distilled.to_checkpoint(vocab)
            )
            evaluate(
                "rcp_distilled_student",
                collect_student_records(rcp_distilled, test, vocab, cfg.eval_topk),
            )
    except Exception as exc:  # partial results, failed stage named
        logger.exception("seed %d failed at stage %s", seed, stage)
        results["_failed_stage"] = stage
        results["_error"] = f"{type(exc).__name__}: {exc}"
    return results


def _run_seed_job(args) -> tuple[int, dict]:
    cfg, seed = args
    return seed, run_seed(cfg, seed)


# ---------------------------------------------------------------------------
# Aggregation and reports
# ---------------------------------------------------------------------------


def run_experiment(cfg: ExperimentConfig) -> RunReport:
    started = time.perf_counter()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(
        json.dumps(cfg.to_flat(), sort_keys=True, indent=2, default=str) + "\n",
        encoding="utf-8",
    )
    seeds = list(cfg.seeds)
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            pairs = list(pool.map(_run_seed_job, [(cfg, s) for s in seeds]))
        per_seed = dict(pairs)
    else:
        per_seed = {s: run_seed(cfg, s) for s in seeds}

    failures = {
        s: f"{r['_failed_stage']}: {r['_error']}"
        for s, r in per_seed.items()
        if "_failed_stage" in r
    }
    rows: dict[str, dict[str, dict]] = {}
    for model in MODEL_ORDER:
        metrics: dict[str, dict] = {}
        for metric in METRIC_ORDER:
            values = {
                s: per_seed[s][model][metric]
                for s in seeds
                if model in per_seed[s] and metric in per_seed[s][model]
            }
            if values:
                arr = np.asarray(list(values.values()), dtype=np.float64)
                metrics[metric] = {
                    "per_seed": values,
                    "mean": float(arr.mean()),
                    "std": float(arr.std(ddof=1)) if len(arr) > 1 else 0.0,
                }
        if metrics:
            rows[model] = metrics

    report = RunReport(
        rows=rows,
        seeds=seeds,
        config=cfg.to_flat(),
        wall_clock=time.perf_counter() - started,
        failures=failures,
    )
    write_report(report, out)
    logger.info("experiment finished in %.1f s", report.wall_clock)
    return report


def write_report(report: RunReport, out_dir: str | Path) -> None:
    """TSV (machine) and Markdown (human) report forms."""
    out = Path(out_dir)
    lines = ["model\tmetric\tmean\tstd\t" + "\t".join(f"seed_{s}" for s in report.seeds)]
    for model in MODEL_ORDER:
        if model not in report.rows:
            continue
        for metric in METRIC_ORDER:
            if metric not in report.rows[model]:
                continue
            cell = report.rows[model][metric]
            per_seed = "\t".join(
                f"{cell['per_seed'][s]:.6f}" if s in cell["per_seed"] else "-"
                for s in report.seeds
            )
            lines.append(
                f"{model}\t{metric}\t{cell['mean']:.6f}\t{cell['std']:.6f}\t{per_seed}"
            )
    if report.failures:
        for seed, msg in sorted(report.failures.items()):
            lines.append(f"FAILED\tseed_{seed}\t{msg}\t\t")
    (out / "report.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")

    md = ["# Run report", ""]
    metrics_present = [
        m for m in METRIC_ORDER if any(m in report.rows.get(model, {}) for model in MODEL_ORDER)
    ]
    md.append("| model | " + " | ".join(metrics_present) + " |")
    md.append("|" + "---|" * (len(metrics_present) + 1))
    for model in MODEL_ORDER:
        if model not in report.rows:
            continue
        cells = []
        for metric in metrics_present:
            if metric in report.rows[model]:
                cell = report.rows[model][metric]
                cells.append(f"{cell['mean']:.4f} ± {cell['std']:.4f}")
            else:
                cells.append("-")
        md.append(f"| {model} | " + " | ".join(cells) + " |")
    md.append("")
    md.append(f"Seeds: {', '.join(str(s) for s in report.seeds)}.")
    if report.failures:
        md.append("")
        md.append("## Failures")
        for seed, msg in sorted(report.failures.items()):
            md.append(f"- seed {seed}: {msg}")
    md.append("")
    (out / "report.md").write_text("\n".join(md), encoding="utf-8")


# ---------------------------------------------------------------------------
# Qualitative dumps
# ---------------------------------------------------------------------------


def _topk_from_probs(probs: np.ndarray, k: int) -> list[int]:
    return [int(i) for i in np.argsort(-probs, kind="stable")[:k]]


def dump_qualitative(
    baseline: StudentModel,
    teacher: TeacherModel,
    distilled: StudentModel,
    dataset: Dataset,
    vocab: Vocabulary,
    n: int,
    seed: int,
    out_path: str | Path,
    k: int = 5,
) -> dict:
    """Side-by-side top-5 comparison on sampled instances.

    Each instance is categorized by which models rank the target inside
    their top-5 ("correct"), mirroring a baseline/teacher/distilled triple.
    """
    if n > len(dataset.instances):
        logger.warning(
            "requested %d instances but dataset has %d; clamping", n, len(dataset.instances)
        )
        n = len(dataset.instances)
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(dataset.instances), size=n, replace=False)

    b_probs = student_eval_probs(baseline, dataset)
    d_probs = student_eval_probs(distilled, dataset)
    tokens, targets, _, _ = encode_dataset(dataset, vocab, teacher.cfg.context_len)
    t_logits, _ = teacher_eval_logits(teacher, tokens)
    t_probs = nn.softmax_temp(t_logits).data

    def fmt_preds(probs_row: np.ndarray, target: int) -> str:
        parts = []
        for c in _topk_from_probs(probs_row, k):
            name = vocab.action_string(c)
            parts.append(f"[{name}]" if c == target else name)
        return "|".join(parts)

    rows = []
    counts: dict[str, int] = {}
    for idx in sorted(int(i) for i in picks):
        inst = dataset.instances[idx]
        target = int(targets[idx])
        flags = {
            "baseline": target in _topk_from_probs(b_probs[idx], k),
            "teacher": target in _topk_from_probs(t_probs[idx], k),
            "distilled": target in _topk_from_probs(d_probs[idx], k),
        }
        category = "_".join(
            f"{name}-{'correct' if ok else 'wrong'}" for name, ok in flags.items()
        )
        counts[category] = counts.get(category, 0) + 1
        rows.append(
            {
                "id": inst.id,
                "segments": "|".join(f"{s.verb}_{s.object}" for s in inst.segments),
                "target": vocab.action_string(target),
                "baseline_top5": fmt_preds(b_probs[idx], target),
                "teacher_top5": fmt_preds(t_probs[idx], target),
                "distilled_top5": fmt_preds(d_probs[idx], target),
                "category": category,
            }
        )

    header = ["id", "segments", "target", "baseline_top5", "teacher_top5", "distilled_top5", "category"]
    lines = ["\t".join(header)]
    lines += ["\t".join(str(r[h]) for h in header) for r in rows]
    lines.append("")
    lines.append("category\tcount")
    lines += [f"{cat}\t{cnt}" for cat, cnt in sorted(counts.items())]
    Path(out_path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return {"rows": rows, "category_counts": counts}


# ---------------------------------------------------------------------------
# Parameter sweeps
# ---------------------------------------------------------------------------


def _apply_sweep_value(cfg: ExperimentConfig, param: str, value) -> ExperimentConfig:
    if param == "lambda_s":
        return replace(cfg, distill=replace(cfg.distill, lambda_s=float(value)))
    if param == "gamma":
        return replace(cfg, distill=replace(cfg.distill, gamma=float(value)))
    if param == "top_k":
        top_k = None if value in (None, "all", "ALL") else int(value)
        return replace(cfg, distill=replace(cfg.distill, top_k=top_k))
    if param == "ensemble_heads":
        return replace(cfg, ensemble=replace(cfg.ensemble, heads=int(value)))
    if param == "strategy":
        return replace(cfg, ensemble=replace(cfg.ensemble, strategy=str(value)))
    raise ValueError(f"unknown sweep parameter {param!r}; valid: {SWEEPABLE}")


def sweep(cfg: ExperimentConfig, param: str, values: list) -> list[dict]:
    """run_experiment per value; rows of (value, Acc@1, Rec@1, MS-Rec@5)."""
    if param not in SWEEPABLE:
        raise ValueError(f"unknown sweep parameter {param!r}; valid: {SWEEPABLE}")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for value in values:
        sub = _apply_sweep_value(cfg, param, value)
        sub = replace(sub, out_dir=str(out / f"{param}={value}"))
        report = run_experiment(sub)
        row = {"value": value}
        source = "distilled_student" if "distilled_student" in report.rows else "baseline_student"
        for metric in ("Acc@1", "Rec@1", "MS-Rec@5"):
            row[metric] = report.mean(source, metric) if metric in report.rows[source] else float("nan")
        rows.append(row)
    lines = ["value\tAcc@1\tRec@1\tMS-Rec@5"]
    for row in rows:
        lines.append(
            f"{row['value']}\t{row['Acc@1']:.6f}\t{row['Rec@1']:.6f}\t{row['MS-Rec@5']:.6f}"
        )
    (out / "sweep.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return rows
