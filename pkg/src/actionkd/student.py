"""Vision-modality anticipation model.

A frame-wise MLP backbone feeds a causal transformer decoder; every step
predicts the upcoming action, and the final step's prediction is the
model's output. Training combines final/intermediate cross-entropy, a
future-feature regression term, and (optionally) temperature-smoothed
KL against a frozen text-side teacher restricted to its top-K classes.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Callable, Sequence

import numpy as np

from . import nn
from .nn.tensor import Tensor, parameter
from .vocab import Vocabulary
from .corpus import Dataset, frame_segment_alignment, instance_action_ids, action_label_of

TOP_K_ALL = None


@dataclass
class StudentConfig:
    hidden_dim: int = 32
    n_layers: int = 2
    n_heads: int = 4
    ff_dim: int = 64
    max_frames: int = 64
    dropout: float = 0.0
    epochs: int = 8
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 1e-7
    mu_intermediate: float = 1.0
    mu_future_feature: float = 1.0
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "StudentConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in doc.items() if k in known})


@dataclass
class DistillConfig:
    """How the student matches the teacher's output distribution."""

    lambda_s: float = 1.0
    gamma: float = 2.0
    top_k: int | None = 50  # None means the full class space
    gamma_sq_scale: bool = False

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "DistillConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in doc.items() if k in known})

    def __post_init__(self):
        if self.lambda_s < 0:
            raise ValueError("lambda_s must be >= 0")
        if not self.gamma > 0:
            raise ValueError("gamma must be > 0")
        if self.top_k is not None and self.top_k < 1:
            raise ValueError("top_k must be >= 1 or None for the full space")


@dataclass
class StudentOutput:
    """Batched forward results. y_final is exactly the last step's slice."""

    z: Tensor  # (B, t, h) backbone features
    f_v: Tensor  # (B, t, h) decoder features
    step_logits: Tensor  # (B, t, C)
    final_logits: Tensor  # (B, C)
    future_feat: Tensor  # (B, t, h) future-feature predictions

    @property
    def y_steps(self) -> Tensor:
        return nn.softmax_temp(self.step_logits)

    @property
    def y_final(self) -> Tensor:
        return nn.softmax_temp(self.final_logits)


class StudentModel:
    """Non-contextual backbone + causal decoder + classifier + future head."""

    def __init__(self, feature_dim: int, n_actions: int, cfg: StudentConfig, seed: int | None = None):
        self.feature_dim = feature_dim
        self.n_actions = n_actions
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
        h, ff = cfg.hidden_dim, cfg.ff_dim
        if h % cfg.n_heads != 0:
            raise ValueError(f"hidden_dim {h} not divisible by n_heads {cfg.n_heads}")
        p: dict[str, Tensor] = {}

        def make(name: str, shape_or_values, scale: float | None = None):
            p[name] = parameter(shape_or_values, name, rng=rng, scale=scale)

        make("bb/w1", (feature_dim, h))
        make("bb/b1", np.zeros(h))
        make("bb/w2", (h, h))
        make("bb/b2", np.zeros(h))
        make("dec/pos", (cfg.max_frames, h), scale=1.0 / np.sqrt(h))
        for i in range(cfg.n_layers):
            pre = f"dec/L{i}/"
            make(pre + "ln1_g", np.ones(h))
            make(pre + "ln1_b", np.zeros(h))
            for nm in ("wq", "wk", "wv", "wo"):
                make(pre + nm, (h, h))
            # no key bias: a shared key offset cancels in the attention softmax
            for nm in ("bq", "bv", "bo"):
                make(pre + nm, np.zeros(h))
            make(pre + "ln2_g", np.ones(h))
            make(pre + "ln2_b", np.zeros(h))
            make(pre + "ff_w1", (h, ff))
            make(pre + "ff_b1", np.zeros(ff))
            make(pre + "ff_w2", (ff, h))
            make(pre + "ff_b2", np.zeros(h))
        make("dec/lnf_g", np.ones(h))
        make("dec/lnf_b", np.zeros(h))
        make("head/cls_w", (h, n_actions))
        make("head/cls_b", np.zeros(n_actions))
        make("head/fut_w", (h, h))
        make("head/fut_b", np.zeros(h))
        self.params = p

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def to_checkpoint(self, vocab: Vocabulary | None = None) -> nn.Checkpoint:
        config = {
            "kind": "student",
            "student": self.cfg.to_dict(),
            "feature_dim": self.feature_dim,
            "n_actions": self.n_actions,
        }
        if vocab is not None:
            config["vocab"] = vocab.to_json()
        return nn.Checkpoint(config=config, params={k: v.data.copy() for k, v in self.params.items()})

    @classmethod
    def from_checkpoint(cls, ckpt: nn.Checkpoint) -> "StudentModel":
        model = cls(
            feature_dim=int(ckpt.config["feature_dim"]),
            n_actions=int(ckpt.config["n_actions"]),
            cfg=StudentConfig.from_dict(ckpt.config["student"]),
        )
        for name, values in ckpt.params.items():
            if name not in model.params:
                raise ValueError(f"unexpected parameter {name!r}")
            if model.params[name].data.shape != values.shape:
                raise ValueError(
                    f"shape mismatch for {name}: {model.params[name].data.shape} vs {values.shape}"
                )
            model.params[name].data = values.copy()
        return model

    def forward(self, frames, training: bool = False, rng: np.random.Generator | None = None) -> StudentOutput:
        """Run backbone and causal decoder over (B, t, d) frames."""
        frames = np.asarray(frames, dtype=np.float64)
        if frames.ndim == 2:
            frames = frames[None]
        if frames.shape[-1] != self.feature_dim:
            raise ValueError(
                f"frame feature dim {frames.shape[-1]} != model dim {self.feature_dim}"
            )
        B, t, _ = frames.shape
        if t > self.cfg.max_frames:
            raise ValueError(f"sequence of {t} frames exceeds max_frames={self.cfg.max_frames}")
        p = self.params
        x_in = Tensor(frames)
        z = nn.affine(nn.affine(x_in, p["bb/w1"], p["bb/b1"]).tanh(), p["bb/w2"], p["bb/b2"])
        x = z + p["dec/pos"][np.arange(t)]
        mask = nn.causal_mask(t)
        n_heads = self.cfg.n_heads
        dh = self.cfg.hidden_dim // n_heads
        for i in range(self.cfg.n_layers):
            pre = f"dec/L{i}/"
            h1 = nn.layer_norm(x, p[pre + "ln1_g"], p[pre + "ln1_b"])
            q = nn.affine(h1, p[pre + "wq"], p[pre + "bq"]).reshape(B, t, n_heads, dh).transpose(0, 2, 1, 3)
            k = (h1 @ p[pre + "wk"]).reshape(B, t, n_heads, dh).transpose(0, 2, 1, 3)
            v = nn.affine(h1, p[pre + "wv"], p[pre + "bv"]).reshape(B, t, n_heads, dh).transpose(0, 2, 1, 3)
            ctx = nn.sdp_attention(q, k, v, mask=mask)
            ctx = ctx.transpose(0, 2, 1, 3).reshape(B, t, self.cfg.hidden_dim)
            ctx = nn.affine(ctx, p[pre + "wo"], p[pre + "bo"])
            if training and self.cfg.dropout > 0:
                ctx = nn.dropout(ctx, self.cfg.dropout, rng, training)
            x = x + ctx
            h2 = nn.layer_norm(x, p[pre + "ln2_g"], p[pre + "ln2_b"])
            ff = nn.affine(nn.affine(h2, p[pre + "ff_w1"], p[pre + "ff_b1"]).tanh(),
                           p[pre + "ff_w2"], p[pre + "ff_b2"])
            if training and self.cfg.dropout > 0:
                ff = nn.dropout(ff, self.cfg.dropout, rng, training)
            x = x + ff
        f_v = nn.layer_norm(x, p["dec/lnf_g"], p["dec/lnf_b"])
        step_logits = nn.affine(f_v, p["head/cls_w"], p["head/cls_b"])
        final_logits = step_logits[:, -1]
        future_feat = nn.affine(f_v, p["head/fut_w"], p["head/fut_b"])
        return StudentOutput(z=z, f_v=f_v, step_logits=step_logits,
                             final_logits=final_logits, future_feat=future_feat)


def student_forward(model: StudentModel, frames) -> StudentOutput:
    return model.forward(frames)


def student_predict_topk(model: StudentModel, frames, k: int, vocab: Vocabulary | None = None):
    """Top-k predictions from frames only (the inference-time interface)."""
    if not 1 <= k <= model.n_actions:
        raise ValueError(f"k must be in [1, {model.n_actions}], got {k}")
    probs = nn.softmax_temp(model.forward(frames).final_logits).data[0]
    order = np.argsort(-probs, kind="stable")[:k]
    if vocab is None:
        return [(int(i), float(probs[i])) for i in order]
    return [(vocab.label_from_action_id(int(i)), float(probs[i])) for i in order]


def avt_loss(
    out: StudentOutput,
    target_ids,
    intermediate_ids=None,
    mu_intermediate: float = 1.0,
    mu_future_feature: float = 1.0,
    future_targets: np.ndarray | None = None,
) -> Tensor:
    """Final-step CE + intermediate-step CE + future-feature regression.

    `intermediate_ids` (B, t) holds the action active at each observed frame.
    The feature term regresses each step's predicted next feature onto the
    following backbone feature, which is treated as a constant target; with a
    single frame the term is defined as 0. By default the targets come from
    the current forward's backbone features; finite-difference verification
    should pass frozen `future_targets` (B, t-1, h) explicitly, since the
    stopped branch must not move under perturbation.
    """
    target_ids = np.asarray(target_ids, dtype=np.int64)
    loss = nn.cross_entropy(out.final_logits, target_ids)
    t = out.step_logits.data.shape[1]
    if mu_intermediate != 0.0:
        if intermediate_ids is None:
            raise ValueError("intermediate labels required when mu_intermediate > 0")
        inter = np.asarray(intermediate_ids, dtype=np.int64)
        if inter.shape != out.step_logits.data.shape[:2]:
            raise ValueError(
                f"intermediate labels shape {inter.shape} does not match steps "
                f"{out.step_logits.data.shape[:2]}"
            )
        loss = loss + mu_intermediate * nn.cross_entropy(out.step_logits, inter)
    if mu_future_feature != 0.0 and t > 1:
        pred = out.future_feat[:, : t - 1]
        if future_targets is None:
            target_feat = Tensor(out.z.data[:, 1:])  # constant: no gradient to the target
        else:
            target_feat = Tensor(np.asarray(future_targets, dtype=np.float64))
        loss = loss + mu_future_feature * nn.mse(pred, target_feat)
    return loss


def top_k_index_set(teacher_logits: np.ndarray, top_k: int | None) -> np.ndarray:
    """Indices of the K largest teacher logits per row; ties to lowest index."""
    C = teacher_logits.shape[-1]
    k = C if top_k is None else top_k
    if k > C:
        raise ValueError(f"top_k={k} exceeds class count {C}")
    order = np.argsort(-teacher_logits, axis=-1, kind="stable")
    return order[..., :k]


def _topk_temperature_kl(target_logits, student_logits, cfg: DistillConfig) -> Tensor:
    """KL between temperature-softened restrictions; selection on raw targets."""
    target = nn.ensure_tensor(target_logits)
    student = nn.ensure_tensor(student_logits)
    if target.data.shape != student.data.shape:
        raise ValueError(
            f"logit shape mismatch: teacher {target.data.shape} vs student {student.data.shape}"
        )
    index = top_k_index_set(target.data, cfg.top_k)
    p = nn.softmax_temp(nn.gather_last(target, index), cfg.gamma)
    q = nn.softmax_temp(nn.gather_last(student, index), cfg.gamma)
    kl = nn.kl_divergence(p, q)
    if cfg.gamma_sq_scale:
        kl = kl * (cfg.gamma**2)
    return kl


def distill_loss(student_logits, teacher_logits, cfg: DistillConfig) -> Tensor:
    """Top-K temperature-smoothed KL; gradient reaches the student side only.

    1-D inputs give a scalar; (B, C) inputs give per-row values.
    """
    teacher = nn.ensure_tensor(teacher_logits).detach()
    return _topk_temperature_kl(teacher, student_logits, cfg)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

# Maps (batch row indices, final student features) to distillation target
# logits; the returned Tensor may carry its own gradient graph.
TargetProvider = Callable[[np.ndarray, Tensor], Tensor]


def _bucket_batches(perm: np.ndarray, lengths: np.ndarray, batch_size: int):
    """Consecutive runs of equal-length instances, each at most batch_size."""
    batches = []
    current: list[int] = []
    for idx in perm:
        if current and (lengths[idx] != lengths[current[0]] or len(current) >= batch_size):
            batches.append(np.asarray(current))
            current = []
        current.append(int(idx))
    if current:
        batches.append(np.asarray(current))
    return batches


def prepare_training_arrays(dataset: Dataset, vocab: Vocabulary):
    """Frames, target ids, and per-frame intermediate ids for every instance."""
    frames = [inst.frames for inst in dataset.instances]
    targets = np.asarray(
        [action_label_of(inst, vocab).action_id for inst in dataset.instances], dtype=np.int64
    )
    intermediates = []
    for inst in dataset.instances:
        seg_ids = instance_action_ids(inst, vocab)
        align = frame_segment_alignment(inst.frames.shape[0], len(inst.segments))
        intermediates.append(seg_ids[align])
    return frames, targets, intermediates


def train_student(
    dataset: Dataset,
    vocab: Vocabulary,
    cfg: StudentConfig,
    distill_cfg: DistillConfig | None = None,
    teacher=None,
    target_provider: TargetProvider | None = None,
    extra_params: Sequence[Tensor] = (),
    loss_log: list[float] | None = None,
) -> StudentModel:
    """Train a student, optionally distilling from a frozen teacher.

    The teacher is evaluated once, in inference mode, on each instance's
    observed segments (never the target). With `lambda_s == 0` or no teacher
    the distillation term is skipped entirely, so the training trajectory is
    bit-identical to a plain run under the same seed. `target_provider`
    overrides the single-teacher target (used for ensembling).
    """
    from .teacher import encode_dataset, teacher_eval_logits  # deferred: avoids cycle at import

    frames, targets, intermediates = prepare_training_arrays(dataset, vocab)
    lengths = np.asarray([f.shape[0] for f in frames])

    distilling = distill_cfg is not None and distill_cfg.lambda_s > 0
    provider: TargetProvider | None = None
    if distilling and target_provider is not None:
        provider = target_provider
    elif distilling and teacher is not None:
        if teacher.vocab.n_actions != vocab.n_actions:
            raise ValueError(
                f"teacher class space ({teacher.vocab.n_actions}) does not match "
                f"student class space ({vocab.n_actions})"
            )
        tokens, _, _, _ = encode_dataset(dataset, teacher.vocab, teacher.cfg.context_len)
        teacher_logits, _ = teacher_eval_logits(teacher, tokens)

        def provider(rows: np.ndarray, f_s: Tensor) -> Tensor:
            return Tensor(teacher_logits[rows])

    distilling = distilling and provider is not None

    model = StudentModel(dataset.feature_dim, vocab.n_actions, cfg)
    rng = np.random.default_rng(cfg.seed + 1)
    opt = nn.AdamW(
        list(model.parameters()) + list(extra_params),
        lr=cfg.lr,
        weight_decay=cfg.weight_decay,
    )
    n = len(frames)
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for rows in _bucket_batches(perm, lengths, cfg.batch_size):
            batch_frames = np.stack([frames[i] for i in rows])
            out = model.forward(batch_frames, training=True, rng=rng)
            loss = avt_loss(
                out,
                targets[rows],
                np.stack([intermediates[i] for i in rows]),
                mu_intermediate=cfg.mu_intermediate,
                mu_future_feature=cfg.mu_future_feature,
            )
            if distilling:
                target_logits = provider(rows, out.f_v[:, -1])
                kl = _topk_temperature_kl(target_logits, out.final_logits, distill_cfg)
                loss = loss + distill_cfg.lambda_s * kl.mean()
            if loss_log is not None:
                loss_log.append(float(loss.data))
            opt.zero_grad()
            loss.backward()
            opt.step()
    return model


def student_eval_probs(model: StudentModel, dataset: Dataset, chunk: int = 256) -> np.ndarray:
    """Final-step class probabilities for every instance, frames only."""
    frames = [inst.frames for inst in dataset.instances]
    lengths = np.asarray([f.shape[0] for f in frames])
    probs = np.empty((len(frames), model.n_actions))
    order = np.arange(len(frames))
    for rows in _bucket_batches(order, lengths, chunk):
        batch = np.stack([frames[i] for i in rows])
        out = model.forward(batch)
        probs[rows] = nn.softmax_temp(out.final_logits).data
    return probs
