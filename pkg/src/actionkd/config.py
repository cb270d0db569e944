"""Experiment configuration: flat JSON keys routed into component configs.

A config file is a single flat JSON object. Keys prefixed teacher_/student_/
distill_/ensemble_/synth_ set fields on the corresponding component config;
bare keys set experiment-level fields. Profiles bundle per-dataset defaults
and are applied first, then file keys, then explicit overrides.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from .corpus import SynthConfig
from .ensemble import EnsembleConfig
from .student import DistillConfig, StudentConfig
from .teacher import TeacherConfig

_PREFIXES = ("teacher_", "student_", "distill_", "ensemble_", "synth_")

# Per-dataset bundles: context windows, distillation coefficient, loss
# weighting regime, epoch budget, and top-K restriction.
PROFILES: dict[str, dict] = {
    "epic": {
        "tau": 1.0,
        "teacher_context_len": 5,
        "teacher_epochs": 8,
        "teacher_weighted_ce": False,
        "teacher_lr": 1e-5,
        "teacher_weight_decay": 1e-7,
        "distill_lambda_s": 20.0,
        "distill_top_k": 50,
    },
    "egtea": {
        "tau": 0.5,
        "teacher_context_len": 15,
        "teacher_epochs": 4,
        "teacher_weighted_ce": True,
        "teacher_lr": 1e-5,
        "teacher_weight_decay": 1e-7,
        "distill_lambda_s": 150.0,
        "distill_top_k": None,
    },
    "synth": {
        "tau": 1.0,
        "teacher_context_len": 8,
        "teacher_epochs": 6,
        "teacher_lr": 3e-3,
        "teacher_weight_decay": 1e-7,
        "teacher_weighted_ce": False,
        "teacher_batch_size": 32,
        "student_epochs": 8,
        "student_lr": 1e-3,
        "student_batch_size": 32,
        "distill_lambda_s": 20.0,
        "distill_gamma": 2.0,
        "distill_top_k": None,
    },
}


@dataclass
class ExperimentConfig:
    profile: str = "synth"
    seeds: list[int] = field(default_factory=lambda: [0])
    out_dir: str = "runs/exp"
    tau: float = 1.0
    dataset_train: str | None = None
    dataset_test: str | None = None
    corpus_path: str | None = None
    pretrain: bool = False
    pretrain_corpus_sequences: int = 300
    pretrain_corpus_seed: int = 9999
    with_teacher: bool = True
    with_baseline: bool = True
    with_distilled: bool = True
    n_teachers: int = 1
    eval_topk: int = 5
    many_shot_threshold: int = 5
    workers: int = 1
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    student: StudentConfig = field(default_factory=StudentConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    def __post_init__(self):
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be distinct")

    # -- flat-dict round trip ---------------------------------------------------

    @classmethod
    def from_flat(cls, doc: dict) -> "ExperimentConfig":
        doc = dict(doc)
        profile = doc.get("profile", "synth")
        if profile not in PROFILES:
            raise ValueError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
        merged = dict(PROFILES[profile])
        merged.update(doc)
        merged["profile"] = profile

        groups: dict[str, dict] = {p: {} for p in _PREFIXES}
        top: dict = {}
        for key, value in merged.items():
            for prefix in _PREFIXES:
                if key.startswith(prefix):
                    groups[prefix][key[len(prefix) :]] = value
                    break
            else:
                top[key] = value

        known_top = set(cls.__dataclass_fields__) - {
            "teacher", "student", "distill", "ensemble", "synth",
        }
        unknown = set(top) - known_top
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(
            **top,
            teacher=TeacherConfig.from_dict(groups["teacher_"]),
            student=StudentConfig.from_dict(groups["student_"]),
            distill=DistillConfig.from_dict(groups["distill_"]),
            ensemble=EnsembleConfig.from_dict(groups["ensemble_"]),
            synth=SynthConfig(**{
                k: v for k, v in groups["synth_"].items()
                if k in SynthConfig.__dataclass_fields__
            }),
        )

    def to_flat(self) -> dict:
        doc: dict = {}
        for name in self.__dataclass_fields__:
            if name in ("teacher", "student", "distill", "ensemble", "synth"):
                continue
            doc[name] = getattr(self, name)
        for prefix, sub in (
            ("teacher_", self.teacher.to_dict()),
            ("student_", self.student.to_dict()),
            ("distill_", self.distill.to_dict()),
            ("ensemble_", self.ensemble.to_dict()),
            ("synth_", self.synth.to_dict()),
        ):
            for key, value in sub.items():
                doc[prefix + key] = value
        return doc

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Copy with every component seeded from `seed`."""
        return replace(
            self,
            teacher=replace(self.teacher, seed=seed),
            student=replace(self.student, seed=seed),
        )


def load_config(path: str | Path | None, overrides: dict | None = None) -> ExperimentConfig:
    """File keys (if any) under profile defaults, then explicit overrides."""
    doc: dict = {}
    if path is not None:
        loaded = json.loads(Path(path).read_text(encoding="utf-8"))
        if not isinstance(loaded, dict):
            raise ValueError("config file must hold a flat JSON object")
        doc.update(loaded)
    if overrides:
        doc.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig.from_flat(doc)
