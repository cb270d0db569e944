"""Aggregating several frozen teachers into one distillation target.

Per head, the student's feature is projected to a query and every teacher's
feature to a key; softmax over the key/query dot products weights the
teachers, heads are averaged, and the weighted mixture of teacher output
distributions becomes the distillation target.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import nn
from .nn.tensor import Tensor, parameter
from .corpus import Dataset
from .student import DistillConfig, StudentConfig, StudentModel, train_student
from .teacher import TeacherModel, encode_dataset, teacher_eval_logits
from .vocab import Vocabulary

STRATEGIES = ("cross_attention", "mean_pool", "fixed_weights")


@dataclass
class EnsembleConfig:
    heads: int = 2
    attention_dim: int = 16
    strategy: str = "cross_attention"
    fixed_weights: list[float] | None = None

    def __post_init__(self):
        if self.heads < 1:
            raise ValueError("heads must be >= 1")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "EnsembleConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in doc.items() if k in known})


class EnsembleParams:
    """Per-head key/query projections, stacked over heads."""

    def __init__(self, teacher_dim: int, student_dim: int, cfg: EnsembleConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        H, ha = cfg.heads, cfg.attention_dim
        scale_k = 1.0 / np.sqrt(teacher_dim)
        scale_q = 1.0 / np.sqrt(student_dim)
        self.w_k = parameter(rng.normal(0.0, scale_k, size=(H, teacher_dim, ha)), "ens/w_k")
        self.b_k = parameter(np.zeros((H, ha)), "ens/b_k")
        self.w_q = parameter(rng.normal(0.0, scale_q, size=(H, student_dim, ha)), "ens/w_q")
        self.b_q = parameter(np.zeros((H, ha)), "ens/b_q")

    def parameters(self) -> list[Tensor]:
        return [self.w_k, self.b_k, self.w_q, self.b_q]


class TeacherBundle:
    """Frozen teachers with identical class spaces."""

    def __init__(self, teachers: list[TeacherModel]):
        if not teachers:
            raise ValueError("bundle needs at least one teacher")
        first = teachers[0].vocab
        for t in teachers[1:]:
            if t.vocab.actions != first.actions:
                raise ValueError("teachers must share one action class space")
        self.teachers = teachers

    def __len__(self) -> int:
        return len(self.teachers)


def ensemble_weights(f_s, teacher_feats, params: EnsembleParams) -> Tensor:
    """Teacher mixture weights from multi-head key/query attention.

    f_s: (B, h_S) or (h_S,) student features; teacher_feats: (B, n, h_T) or
    (n, h_T). Per head, weights are a softmax over teachers of <k_ih, q_h>;
    the head average makes the result a distribution over teachers.
    """
    f_s = nn.ensure_tensor(f_s)
    feats = nn.ensure_tensor(teacher_feats)
    squeeze = f_s.data.ndim == 1
    if squeeze:
        f_s = f_s.reshape(1, -1)
    if feats.data.ndim == 2:
        feats = feats.reshape(1, *feats.data.shape)
    B, n, h_T = feats.data.shape
    H, _, ha = params.w_k.data.shape
    if f_s.data.shape[0] != B:
        raise ValueError(f"batch mismatch: features {f_s.data.shape[0]} vs teachers {B}")
    if params.w_q.data.shape[1] != f_s.data.shape[1]:
        raise ValueError(
            f"student feature dim {f_s.data.shape[1]} != query projection "
            f"{params.w_q.data.shape[1]}"
        )
    if params.w_k.data.shape[1] != h_T:
        raise ValueError(
            f"teacher feature dim {h_T} != key projection {params.w_k.data.shape[1]}"
        )
    # the key-bias term <b_k, q_h> is teacher-independent and cancels in the
    # softmax over teachers, so it is left out of the scores
    keys = (feats.reshape(B, n, 1, 1, h_T) @ params.w_k).reshape(B, n, H, ha)
    queries = (f_s.reshape(B, 1, 1, -1) @ params.w_q).reshape(B, H, ha) + params.b_q
    scores = (keys * queries.reshape(B, 1, H, ha)).sum(axis=-1)  # (B, n, H)
    per_head = nn.softmax_temp(scores, 1.0, axis=1)
    alpha = per_head.mean(axis=2)
    return alpha.reshape(n) if squeeze else alpha


def ensemble_predict(alpha, teacher_dists) -> Tensor:
    """Convex combination of teacher distributions under weights `alpha`."""
    alpha = nn.ensure_tensor(alpha)
    dists = nn.ensure_tensor(teacher_dists)
    squeeze = alpha.data.ndim == 1
    a = alpha.reshape(1, -1) if squeeze else alpha
    d = dists.reshape(1, *dists.data.shape) if dists.data.ndim == 2 else dists
    if np.any(a.data < 0):
        raise ValueError("mixture weights must be non-negative")
    sums = a.data.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > 1e-9):
        raise ValueError(f"mixture weights must sum to 1, got {sums}")
    if a.data.shape[-1] != d.data.shape[-2]:
        raise ValueError(
            f"weight count {a.data.shape[-1]} != teacher count {d.data.shape[-2]}"
        )
    mixed = (a.reshape(*a.data.shape, 1) * d).sum(axis=-2)
    return mixed.reshape(-1) if squeeze else mixed


def fixed_alpha(cfg: EnsembleConfig, n: int) -> np.ndarray:
    if cfg.strategy == "mean_pool":
        return np.full(n, 1.0 / n)
    weights = np.asarray(cfg.fixed_weights, dtype=np.float64)
    if weights.shape != (n,):
        raise ValueError(f"fixed_weights must have length {n}")
    if np.any(weights < 0):
        raise ValueError("fixed_weights must be non-negative")
    return weights / weights.sum()


def train_ensemble_student(
    dataset: Dataset,
    vocab: Vocabulary,
    bundle: TeacherBundle,
    student_cfg: StudentConfig,
    distill_cfg: DistillConfig,
    ens_cfg: EnsembleConfig,
    loss_log: list[float] | None = None,
) -> tuple[StudentModel, EnsembleParams | None]:
    """Jointly train the student and the ensembling projections.

    Teachers stay frozen: their per-instance distributions and features are
    precomputed constants, so no gradient can reach them. The distillation
    target is the weighted mixture, converted to logits by elementwise log
    (softening is shift-invariant, so for a single teacher this coincides
    with plain logit distillation).
    """
    for t in bundle.teachers:
        if t.vocab.n_actions != vocab.n_actions:
            raise ValueError("teacher/student class-space mismatch")
    all_dists = []
    all_feats = []
    for t in bundle.teachers:
        tokens, _, _, _ = encode_dataset(dataset, t.vocab, t.cfg.context_len)
        logits, feats = teacher_eval_logits(t, tokens)
        all_dists.append(nn.softmax_temp(logits).data)
        all_feats.append(feats)
    dists = np.stack(all_dists, axis=1)  # (N, n, C)
    feats = np.stack(all_feats, axis=1)  # (N, n, h_T)
    n_teachers = len(bundle)

    params: EnsembleParams | None = None
    if ens_cfg.strategy == "cross_attention":
        params = EnsembleParams(
            teacher_dim=feats.shape[-1],
            student_dim=student_cfg.hidden_dim,
            cfg=ens_cfg,
            seed=student_cfg.seed + 1000,
        )

        def provider(rows: np.ndarray, f_s: Tensor) -> Tensor:
            alpha = ensemble_weights(f_s, Tensor(feats[rows]), params)
            mixture = ensemble_predict(alpha, Tensor(dists[rows]))
            return mixture.log()

        extra = params.parameters()
    else:
        alpha_const = fixed_alpha(ens_cfg, n_teachers)

        def provider(rows: np.ndarray, f_s: Tensor) -> Tensor:
            mixture = ensemble_predict(
                Tensor(np.broadcast_to(alpha_const, (len(rows), n_teachers)).copy()),
                Tensor(dists[rows]),
            )
            return mixture.log()

        extra = []

    model = train_student(
        dataset,
        vocab,
        student_cfg,
        distill_cfg=distill_cfg,
        target_provider=provider,
        extra_params=extra,
        loss_log=loss_log,
    )
    return model, params
