"""Command-line interface.

Every subcommand accepts --config (flat JSON), --seed, and --out; command
flags override config-file keys. `run` executes the full pipeline described
by the config; the other subcommands expose the individual stages.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .config import ExperimentConfig, load_config
from .corpus import extract_corpus, gen_synthetic, load_action_sequences, load_dataset, write_action_sequences, write_dataset, write_skip_report
from .ensemble import TeacherBundle, train_ensemble_student
from .metrics import load_predictions, metric_rows, write_metric_report
from .nn import load_checkpoint, save_checkpoint
from .pipeline import (
    collect_student_records,
    collect_teacher_records,
    dump_qualitative,
    run_experiment,
    sweep,
)
from .student import StudentModel, train_student
from .teacher import TeacherModel, finetune_teacher, pretrain_mlm
from .vocab import ClassStats, build_vocab, compute_class_stats
from .metrics import write_predictions

logger = logging.getLogger(__name__)


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat JSON config file")
    parser.add_argument("--seed", type=int, help="seed override")
    parser.add_argument("--out", help="output directory")


def _experiment_config(args, extra: dict | None = None) -> ExperimentConfig:
    overrides = dict(extra or {})
    if args.out is not None:
        overrides["out_dir"] = args.out
    cfg = load_config(args.config, overrides)
    if args.seed is not None:
        cfg = replace(cfg, seeds=[args.seed]).with_seed(args.seed)
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out) if args.out else Path(".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_synth(args) -> int:
    cfg = _experiment_config(args)
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    out = _out_dir(args)
    train, test = gen_synthetic(cfg.synth, seed)
    write_dataset(train, out / "train.jsonl")
    write_dataset(test, out / "test.jsonl")
    print(f"wrote {len(train)} train / {len(test)} test instances to {out}")
    return 0


def cmd_extract_corpus(args) -> int:
    out = _out_dir(args)
    seqs, skips = extract_corpus(args.input)
    write_action_sequences(seqs, out / "sequences.jsonl")
    write_skip_report(skips, out / "skip_report.tsv")
    print(f"extracted {len(seqs)} sequences ({len(skips)} skipped clauses/sentences)")
    return 0


def cmd_pretrain_teacher(args) -> int:
    cfg = _experiment_config(args)
    out = _out_dir(args)
    corpus = load_action_sequences(args.corpus)
    sources = [corpus]
    for path in (args.train, args.test):
        if path:
            sources.append(load_dataset(path, tau=cfg.tau))
    vocab = build_vocab(*sources)
    ckpt = pretrain_mlm(corpus, vocab, cfg.teacher)
    save_checkpoint(out / "pretrained_encoder.json", ckpt)
    print(f"wrote pretrained encoder checkpoint to {out / 'pretrained_encoder.json'}")
    return 0


def cmd_train_teacher(args) -> int:
    cfg = _experiment_config(args)
    out = _out_dir(args)
    train = load_dataset(args.train, tau=cfg.tau)
    test = load_dataset(args.test, tau=cfg.tau)
    vocab = build_vocab(train, test)
    stats = compute_class_stats(train, vocab, cfg.many_shot_threshold)
    init = load_checkpoint(args.init) if args.init else None
    model = finetune_teacher(train, vocab, cfg.teacher, init=init, class_weight_vector=stats.weights)
    save_checkpoint(out / "teacher.json", model.to_checkpoint())
    records = collect_teacher_records(model, test, vocab, cfg.eval_topk)
    write_predictions(records, out / "preds_teacher.jsonl")
    rows = metric_rows(records, stats.many_shot)
    write_metric_report(rows, out / "metrics_teacher.tsv")
    for row in rows:
        print(f"{row['metric']}\t{row['value']:.4f}")
    return 0


def cmd_train_student(args) -> int:
    cfg = _experiment_config(args)
    out = _out_dir(args)
    train = load_dataset(args.train, tau=cfg.tau)
    test = load_dataset(args.test, tau=cfg.tau)
    vocab = build_vocab(train, test)
    stats = compute_class_stats(train, vocab, cfg.many_shot_threshold)
    teachers = [TeacherModel.from_checkpoint(load_checkpoint(p)) for p in args.teacher or []]
    if len(teachers) > 1:
        model, _ = train_ensemble_student(
            train, vocab, TeacherBundle(teachers), cfg.student, cfg.distill, cfg.ensemble
        )
    elif teachers:
        model = train_student(train, vocab, cfg.student, distill_cfg=cfg.distill, teacher=teachers[0])
    else:
        model = train_student(train, vocab, cfg.student)
    save_checkpoint(out / "student.json", model.to_checkpoint(vocab))
    records = collect_student_records(model, test, vocab, cfg.eval_topk)
    write_predictions(records, out / "preds_student.jsonl")
    rows = metric_rows(records, stats.many_shot)
    write_metric_report(rows, out / "metrics_student.tsv")
    for row in rows:
        print(f"{row['metric']}\t{row['value']:.4f}")
    return 0


def cmd_eval(args) -> int:
    records = load_predictions(args.preds)
    many_shot = None
    if args.class_stats:
        stats = ClassStats.from_json(Path(args.class_stats).read_text(encoding="utf-8"))
        many_shot = stats.many_shot
    rows = metric_rows(records, many_shot, recall_k=args.k)
    if args.out:
        out = _out_dir(args)
        write_metric_report(rows, out / "metrics.tsv")
    for row in rows:
        print(f"{row['metric']}\t{row['value']:.6f}")
    return 0


def cmd_qualitative(args) -> int:
    cfg = _experiment_config(args)
    out = _out_dir(args)
    test = load_dataset(args.data, tau=cfg.tau)
    teacher = TeacherModel.from_checkpoint(load_checkpoint(args.teacher))
    baseline_ckpt = load_checkpoint(args.baseline)
    baseline = StudentModel.from_checkpoint(baseline_ckpt)
    distilled = StudentModel.from_checkpoint(load_checkpoint(args.distilled))
    vocab = teacher.vocab
    seed = args.seed if args.seed is not None else 0
    result = dump_qualitative(
        baseline, teacher, distilled, test, vocab, args.n, seed, out / "qualitative.tsv"
    )
    for cat, cnt in sorted(result["category_counts"].items()):
        print(f"{cat}\t{cnt}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _experiment_config(args)
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    rows = sweep(cfg, args.param, values)
    for row in rows:
        print(f"{row['value']}\t{row['Acc@1']:.4f}\t{row['Rec@1']:.4f}\t{row['MS-Rec@5']:.4f}")
    return 0


def cmd_run(args) -> int:
    cfg = _experiment_config(args)
    report = run_experiment(cfg)
    print((Path(cfg.out_dir) / "report.tsv").read_text(encoding="utf-8"), end="")
    if report.failures:
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="actionkd",
        description="Train and evaluate next-action anticipation models with "
        "text-to-vision knowledge distillation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="generate a seeded synthetic dataset")
    _add_common(p)
    p.set_defaults(fn=cmd_gen_synth)

    p = sub.add_parser("extract-corpus", help="parse instruction text into action sequences")
    _add_common(p)
    p.add_argument("--input", required=True, help="instruction text, one document per line")
    p.set_defaults(fn=cmd_extract_corpus)

    p = sub.add_parser("pretrain-teacher", help="masked-token pretraining on action sequences")
    _add_common(p)
    p.add_argument("--corpus", required=True, help="sequences.jsonl from extract-corpus")
    p.add_argument("--train", help="dataset whose labels the vocabulary must cover")
    p.add_argument("--test", help="dataset whose labels the vocabulary must cover")
    p.set_defaults(fn=cmd_pretrain_teacher)

    p = sub.add_parser("train-teacher", help="fine-tune the text-side teacher")
    _add_common(p)
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--init", help="pretrained encoder checkpoint")
    p.set_defaults(fn=cmd_train_teacher)

    p = sub.add_parser("train-student", help="train the vision-side student")
    _add_common(p)
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.add_argument(
        "--teacher",
        action="append",
        help="teacher checkpoint enabling distillation; repeat to ensemble",
    )
    p.set_defaults(fn=cmd_train_student)

    p = sub.add_parser("eval", help="metrics from a prediction dump")
    _add_common(p)
    p.add_argument("--preds", required=True)
    p.add_argument("--class-stats", help="class_stats.json for the many-shot set")
    p.add_argument("--k", type=int, default=5)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("qualitative", help="side-by-side top-5 comparison dump")
    _add_common(p)
    p.add_argument("--baseline", required=True)
    p.add_argument("--teacher", required=True)
    p.add_argument("--distilled", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--n", type=int, default=20)
    p.set_defaults(fn=cmd_qualitative)

    p = sub.add_parser("sweep", help="run the pipeline across parameter values")
    _add_common(p)
    p.add_argument("--param", required=True)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("run", help="full pipeline: data, teacher, students, report")
    _add_common(p)
    p.set_defaults(fn=cmd_run)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
