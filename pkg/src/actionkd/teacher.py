"""Text-modality anticipation model.

A small transformer encoder over encoded (verb, object) token sequences.
The feature at the CLS position summarizes the observed action history and
feeds three classification heads (joint action, verb, object) plus a token
head used for masked-token pretraining.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import nn
from .nn.tensor import Tensor, parameter
from .vocab import CLS, MASK, N_SPECIALS, PAD, Vocabulary, encode_sequence
from .corpus import ActionStep, Dataset, action_label_of

logger = logging.getLogger(__name__)


@dataclass
class TeacherConfig:
    hidden_dim: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ff_dim: int = 128
    context_len: int = 5
    dropout: float = 0.0
    epochs: int = 4
    batch_size: int = 32
    lr: float = 1e-5
    weight_decay: float = 1e-7
    lambda_action: float = 1.0
    lambda_verb: float = 1.0
    lambda_object: float = 1.0
    weighted_ce: bool = False
    mask_rate: float = 0.15
    pretrain_steps: int = 200
    pretrain_lr: float | None = None  # None: fall back to lr
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "TeacherConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in doc.items() if k in known})


@dataclass
class TeacherOutput:
    """Batched forward results; distributions each sum to 1 per row."""

    f_txt: Tensor  # (B, h)
    action_logits: Tensor  # (B, C)
    verb_logits: Tensor  # (B, C_v)
    object_logits: Tensor  # (B, C_o)
    y_action: Tensor  # (B, C)
    y_verb: Tensor  # (B, C_v)
    y_object: Tensor  # (B, C_o)


class TeacherModel:
    """Token encoder + CLS feature + action/verb/object heads."""

    ENCODER_PREFIXES = ("emb/", "enc/")

    def __init__(self, vocab: Vocabulary, cfg: TeacherConfig, seed: int | None = None):
        self.vocab = vocab
        self.cfg = cfg
        self.seq_len = 1 + 2 * cfg.context_len
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
        h, ff = cfg.hidden_dim, cfg.ff_dim
        if h % cfg.n_heads != 0:
            raise ValueError(f"hidden_dim {h} not divisible by n_heads {cfg.n_heads}")
        p: dict[str, Tensor] = {}

        def make(name: str, shape_or_values, scale: float | None = None):
            p[name] = parameter(shape_or_values, name, rng=rng, scale=scale)

        emb_scale = 1.0 / np.sqrt(h)
        make("emb/token", (vocab.n_tokens, h), scale=emb_scale)
        make("emb/pos", (self.seq_len, h), scale=emb_scale)
        for i in range(cfg.n_layers):
            pre = f"enc/L{i}/"
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
        make("enc/lnf_g", np.ones(h))
        make("enc/lnf_b", np.zeros(h))
        make("head/action_w", (h, vocab.n_actions))
        make("head/action_b", np.zeros(vocab.n_actions))
        make("head/verb_w", (h, vocab.n_verbs))
        make("head/verb_b", np.zeros(vocab.n_verbs))
        make("head/object_w", (h, vocab.n_objects))
        make("head/object_b", np.zeros(vocab.n_objects))
        make("head/mlm_w", (h, vocab.n_tokens))
        make("head/mlm_b", np.zeros(vocab.n_tokens))
        self.params = p

    # -- parameter plumbing ---------------------------------------------------

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def arch_dims(self) -> dict:
        return {
            "hidden_dim": self.cfg.hidden_dim,
            "n_layers": self.cfg.n_layers,
            "n_heads": self.cfg.n_heads,
            "ff_dim": self.cfg.ff_dim,
            "context_len": self.cfg.context_len,
            "n_tokens": self.vocab.n_tokens,
            "n_actions": self.vocab.n_actions,
            "n_verbs": self.vocab.n_verbs,
            "n_objects": self.vocab.n_objects,
        }

    def to_checkpoint(self) -> nn.Checkpoint:
        return nn.Checkpoint(
            config={
                "kind": "teacher",
                "teacher": self.cfg.to_dict(),
                "vocab": self.vocab.to_json(),
            },
            params={k: v.data.copy() for k, v in self.params.items()},
        )

    def encoder_checkpoint(self) -> nn.Checkpoint:
        """Embeddings + encoder stack only (classification heads excluded)."""
        ckpt = self.to_checkpoint()
        ckpt.params = {
            k: v
            for k, v in ckpt.params.items()
            if k.startswith(self.ENCODER_PREFIXES)
        }
        return ckpt

    @classmethod
    def from_checkpoint(cls, ckpt: nn.Checkpoint) -> "TeacherModel":
        vocab = Vocabulary.from_json(ckpt.config["vocab"])
        model = cls(vocab, TeacherConfig.from_dict(ckpt.config["teacher"]))
        model.load_params(ckpt.params, strict=True)
        return model

    def load_params(self, params: dict[str, np.ndarray], strict: bool) -> None:
        for name, values in params.items():
            if name not in self.params:
                if strict:
                    raise ValueError(f"unexpected parameter {name!r}")
                continue
            if self.params[name].data.shape != values.shape:
                raise ValueError(
                    f"shape mismatch for {name}: "
                    f"{self.params[name].data.shape} vs {values.shape}"
                )
            self.params[name].data = np.asarray(values, dtype=np.float64).copy()

    # -- forward -----------------------------------------------------------------

    def _prep_tokens(self, tokens) -> np.ndarray:
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        if np.any(tokens < 0) or np.any(tokens >= self.vocab.n_tokens):
            bad = tokens[(tokens < 0) | (tokens >= self.vocab.n_tokens)][0]
            raise ValueError(f"token id {int(bad)} out of range")
        return tokens

    def encode(self, tokens, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        """Contextual states (B, L, h); PAD keys are masked out of attention."""
        tokens = self._prep_tokens(tokens)
        p = self.params
        B, L = tokens.shape
        mask = nn.padding_mask(tokens, PAD)
        x = nn.embedding(p["emb/token"], tokens) + p["emb/pos"][np.arange(L)]
        n_heads = self.cfg.n_heads
        dh = self.cfg.hidden_dim // n_heads
        for i in range(self.cfg.n_layers):
            pre = f"enc/L{i}/"
            h1 = nn.layer_norm(x, p[pre + "ln1_g"], p[pre + "ln1_b"])
            q = nn.affine(h1, p[pre + "wq"], p[pre + "bq"])
            k = h1 @ p[pre + "wk"]
            v = nn.affine(h1, p[pre + "wv"], p[pre + "bv"])
            q = q.reshape(B, L, n_heads, dh).transpose(0, 2, 1, 3)
            k = k.reshape(B, L, n_heads, dh).transpose(0, 2, 1, 3)
            v = v.reshape(B, L, n_heads, dh).transpose(0, 2, 1, 3)
            ctx = nn.sdp_attention(q, k, v, mask=mask)
            ctx = ctx.transpose(0, 2, 1, 3).reshape(B, L, self.cfg.hidden_dim)
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
        return nn.layer_norm(x, p["enc/lnf_g"], p["enc/lnf_b"])

    def forward(self, tokens, training: bool = False, rng: np.random.Generator | None = None) -> TeacherOutput:
        tokens = self._prep_tokens(tokens)
        states = self.encode(tokens, training=training, rng=rng)
        rows, cls_pos = np.nonzero(tokens == CLS)
        if len(rows) != tokens.shape[0]:
            raise ValueError("every sequence must contain exactly one CLS token")
        f_txt = states[rows, cls_pos]
        p = self.params
        action_logits = nn.affine(f_txt, p["head/action_w"], p["head/action_b"])
        verb_logits = nn.affine(f_txt, p["head/verb_w"], p["head/verb_b"])
        object_logits = nn.affine(f_txt, p["head/object_w"], p["head/object_b"])
        return TeacherOutput(
            f_txt=f_txt,
            action_logits=action_logits,
            verb_logits=verb_logits,
            object_logits=object_logits,
            y_action=nn.softmax_temp(action_logits),
            y_verb=nn.softmax_temp(verb_logits),
            y_object=nn.softmax_temp(object_logits),
        )

    def mlm_logits(self, tokens, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        states = self.encode(tokens, training=training, rng=rng)
        return nn.affine(states, self.params["head/mlm_w"], self.params["head/mlm_b"])


def teacher_forward(model: TeacherModel, tokens) -> TeacherOutput:
    return model.forward(tokens)


def teacher_loss(
    out: TeacherOutput,
    action_ids,
    verb_ids,
    object_ids,
    lambdas: tuple[float, float, float] = (1.0, 1.0, 1.0),
    weights: np.ndarray | None = None,
) -> Tensor:
    """Weighted sum of the three head cross-entropies.

    `lambdas` orders as (action, object, verb); class weights, when given,
    apply to the joint-action term only.
    """
    lam, lam_o, lam_v = lambdas
    if lam < 0 or lam_o < 0 or lam_v < 0:
        raise ValueError("loss coefficients must be non-negative")
    loss = lam * nn.cross_entropy(out.action_logits, action_ids, weights=weights)
    loss = loss + lam_o * nn.cross_entropy(out.object_logits, object_ids)
    loss = loss + lam_v * nn.cross_entropy(out.verb_logits, verb_ids)
    return loss


def teacher_predict_topk(model: TeacherModel, tokens, k: int):
    """Top-k (ActionLabel, prob) pairs, descending, ties to the lowest id."""
    C = model.vocab.n_actions
    if not 1 <= k <= C:
        raise ValueError(f"k must be in [1, {C}], got {k}")
    probs = model.forward(tokens).y_action.data[0]
    order = np.argsort(-probs, kind="stable")[:k]
    return [(model.vocab.label_from_action_id(int(i)), float(probs[i])) for i in order]


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def encode_dataset(dataset: Dataset, vocab: Vocabulary, context_len: int):
    """Token matrix plus target id arrays for a dataset."""
    tokens = np.stack(
        [encode_sequence(inst.segments, vocab, context_len) for inst in dataset.instances]
    )
    labels = [action_label_of(inst, vocab) for inst in dataset.instances]
    action_ids = np.asarray([l.action_id for l in labels], dtype=np.int64)
    verb_ids = np.asarray([l.verb_id for l in labels], dtype=np.int64)
    object_ids = np.asarray([l.object_id for l in labels], dtype=np.int64)
    return tokens, action_ids, verb_ids, object_ids


def pretrain_mlm(
    corpus: Sequence[list[ActionStep]],
    vocab: Vocabulary,
    cfg: TeacherConfig,
) -> nn.Checkpoint:
    """Masked-token pretraining over action sequences.

    Each step batches random sequences, masks `mask_rate` of content tokens
    (80% -> MASK, 10% -> random content token, 10% unchanged) and minimizes
    cross-entropy on the masked positions only. Returns the embedding+encoder
    checkpoint; heads are excluded.
    """
    if not corpus:
        raise ValueError("pretraining corpus is empty")
    if not 0.0 < cfg.mask_rate < 1.0:
        raise ValueError(f"nothing to mask: mask_rate must be in (0, 1), got {cfg.mask_rate}")
    rng = np.random.default_rng(cfg.seed)
    model = TeacherModel(vocab, cfg, seed=cfg.seed)
    encoded = np.stack([encode_sequence(seq, vocab, cfg.context_len) for seq in corpus])
    maskable = encoded >= N_SPECIALS
    usable = maskable.any(axis=1)
    n_skipped = int((~usable).sum())
    if n_skipped:
        logger.info("pretrain_mlm: skipping %d sequence(s) with no maskable tokens", n_skipped)
    encoded = encoded[usable]
    maskable = maskable[usable]
    if encoded.shape[0] == 0:
        raise ValueError("no sequences with maskable tokens")
    content_ids = vocab.content_token_ids()
    lr = cfg.lr if cfg.pretrain_lr is None else cfg.pretrain_lr
    opt = nn.AdamW(model.parameters(), lr=lr, weight_decay=cfg.weight_decay)
    for _ in range(cfg.pretrain_steps):
        rows = rng.integers(0, encoded.shape[0], size=min(cfg.batch_size, encoded.shape[0]))
        batch = encoded[rows].copy()
        positions: list[tuple[int, int]] = []
        for r in range(batch.shape[0]):
            cand = np.nonzero(maskable[rows[r]])[0]
            n_mask = max(1, int(round(cfg.mask_rate * len(cand))))
            chosen = rng.choice(cand, size=n_mask, replace=False)
            for c in chosen:
                positions.append((r, int(c)))
        targets = np.asarray([encoded[rows[r], c] for r, c in positions], dtype=np.int64)
        for (r, c) in positions:
            u = rng.random()
            if u < 0.8:
                batch[r, c] = MASK
            elif u < 0.9:
                batch[r, c] = content_ids[rng.integers(0, len(content_ids))]
            # else: leave the token unchanged
        logits = model.mlm_logits(batch, training=True, rng=rng)
        pos_idx = (np.asarray([r for r, _ in positions]), np.asarray([c for _, c in positions]))
        loss = nn.cross_entropy(logits[pos_idx], targets)
        opt.zero_grad()
        loss.backward()
        opt.step()
    return model.encoder_checkpoint()


def finetune_teacher(
    dataset: Dataset,
    vocab: Vocabulary,
    cfg: TeacherConfig,
    init: nn.Checkpoint | None = None,
    class_weight_vector: np.ndarray | None = None,
) -> TeacherModel:
    """Supervised fine-tuning; heads always start fresh.

    With `init`, the embedding and encoder parameters are loaded from the
    pretraining checkpoint ("domain-adapted" configuration); dimensions and
    vocabulary must match.
    """
    model = TeacherModel(vocab, cfg, seed=cfg.seed)
    if init is not None:
        init_vocab = init.config.get("vocab")
        if init_vocab is not None and Vocabulary.from_json(init_vocab) != vocab:
            raise ValueError("init checkpoint vocabulary differs from the dataset vocabulary")
        init_dims = {
            k: v for k, v in TeacherConfig.from_dict(init.config.get("teacher", {})).to_dict().items()
            if k in ("hidden_dim", "n_layers", "n_heads", "ff_dim", "context_len")
        }
        own_dims = {k: getattr(cfg, k) for k in init_dims}
        if init_dims != own_dims:
            diffs = {k: (init_dims[k], own_dims[k]) for k in init_dims if init_dims[k] != own_dims[k]}
            raise ValueError(f"encoder dimension mismatch with init checkpoint: {diffs}")
        encoder_only = {
            k: v for k, v in init.params.items() if k.startswith(TeacherModel.ENCODER_PREFIXES)
        }
        model.load_params(encoder_only, strict=False)

    tokens, action_ids, verb_ids, object_ids = encode_dataset(dataset, vocab, cfg.context_len)
    weights = class_weight_vector if cfg.weighted_ce else None
    rng = np.random.default_rng(cfg.seed + 1)
    opt = nn.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    lambdas = (cfg.lambda_action, cfg.lambda_object, cfg.lambda_verb)
    n = tokens.shape[0]
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            rows = perm[start : start + cfg.batch_size]
            out = model.forward(tokens[rows], training=True, rng=rng)
            loss = teacher_loss(
                out, action_ids[rows], verb_ids[rows], object_ids[rows],
                lambdas=lambdas, weights=weights,
            )
            opt.zero_grad()
            loss.backward()
            opt.step()
    return model


def teacher_eval_logits(model: TeacherModel, tokens: np.ndarray, chunk: int = 256):
    """Frozen-teacher logits and CLS features for a token matrix."""
    logits = []
    feats = []
    for start in range(0, tokens.shape[0], chunk):
        out = model.forward(tokens[start : start + chunk])
        logits.append(out.action_logits.data)
        feats.append(out.f_txt.data)
    return np.concatenate(logits, axis=0), np.concatenate(feats, axis=0)
