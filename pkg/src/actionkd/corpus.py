"""Data sources: instruction-text parsing, synthetic generation, dataset IO.

The synthetic benchmark is a hidden Markov chain whose states emit
(verb, object) actions; frames are per-action embeddings plus Gaussian
noise. World structure (transitions, emissions, embeddings) is a pure
function of the structure seed, so corpora and datasets sampled with
different run seeds share one underlying process.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

from .vocab import NONE_OBJECT, Vocabulary, action_name


class ActionStep(NamedTuple):
    """One (verb, object) action; object may be the NONE sentinel."""

    verb: str
    object: str


@dataclass
class InstructionDoc:
    doc_id: str
    sentences: list[str]


@dataclass
class SkipRecord:
    doc_id: str
    sentence: str
    reason: str


@dataclass
class Instance:
    """One anticipation example: observed frames + segment labels, future target."""

    id: str
    frames: np.ndarray  # (t, d) float64
    segments: list[ActionStep]
    target: ActionStep

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ValueError(f"instance {self.id}: frames must be a non-empty (t, d) array")
        if len(self.segments) < 1:
            raise ValueError(f"instance {self.id}: needs at least one segment")


@dataclass
class Dataset:
    instances: list[Instance]
    tau: float = 1.0
    class_space: Vocabulary | None = None

    def __len__(self) -> int:
        return len(self.instances)

    @property
    def feature_dim(self) -> int:
        return int(self.instances[0].frames.shape[1])


class DatasetFormatError(ValueError):
    def __init__(self, message: str, line: int | None = None, field_name: str | None = None):
        super().__init__(message)
        self.line = line
        self.field = field_name


def validate_dataset(dataset: Dataset) -> None:
    """Reject datasets violating the shared-dimension / non-empty invariants."""
    if not dataset.instances:
        raise DatasetFormatError("no instances")
    dim = dataset.instances[0].frames.shape[1]
    for inst in dataset.instances:
        if inst.frames.shape[1] != dim:
            raise DatasetFormatError(
                f"instance {inst.id}: feature dim {inst.frames.shape[1]} != {dim}"
            )
        if inst.frames.shape[0] < 1:
            raise DatasetFormatError(f"instance {inst.id}: empty frame sequence")
        if len(inst.segments) < 1:
            raise DatasetFormatError(f"instance {inst.id}: empty segment sequence")


# ---------------------------------------------------------------------------
# Instruction parsing
# ---------------------------------------------------------------------------

_DETERMINERS = {"the", "a", "an"}
_CONNECTIVES = {"and", "then"}
_VERB_RE = re.compile(r"[a-z]+(?:-[a-z]+)*")
_WORD_RE = re.compile(r"[a-z0-9]+(?:-[a-z0-9]+)*")


def _normalize_object(words: list[str]) -> str:
    """Head-noun-first object string: 'cutting board' -> 'board:cutting'."""
    if not words:
        return NONE_OBJECT
    if len(words) == 1:
        return words[0]
    return ":".join([words[-1]] + words[:-1])


def parse_instructions(doc: InstructionDoc, skips: list[SkipRecord] | None = None) -> list[ActionStep]:
    """Extract the (verb, object) sequence from a document's instructions.

    Each sentence holds one or more clauses of the form
    "<verb> [the|a|an] <object phrase>", joined by "and"/"then". Clause order
    follows discourse order. A verb clause without its own object shares the
    object of the next clause in the sentence ("wash and dry the board");
    with no such clause the object is the NONE sentinel. Unparseable clauses
    are skipped and recorded in `skips`, never raised.
    """
    if not doc.sentences:
        raise ValueError(f"document {doc.doc_id!r} has no sentences")
    steps: list[ActionStep] = []
    for sentence in doc.sentences:
        words = [w.lower() for w in re.findall(r"[A-Za-z0-9'-]+", sentence)]
        clauses: list[list[str]] = [[]]
        for w in words:
            if w in _CONNECTIVES:
                clauses.append([])
            else:
                clauses[-1].append(w)
        parsed: list[tuple[str, str | None]] = []
        skipped_clauses = 0
        for clause in clauses:
            if not clause:
                continue
            verb = clause[0]
            if not _VERB_RE.fullmatch(verb):
                skipped_clauses += 1
                if skips is not None:
                    skips.append(SkipRecord(doc.doc_id, sentence.strip(), f"no verb in clause {' '.join(clause)!r}"))
                continue
            rest = clause[1:]
            if rest and rest[0] in _DETERMINERS:
                rest = rest[1:]
            obj_words = [w for w in rest if _WORD_RE.fullmatch(w)]
            parsed.append((verb, _normalize_object(obj_words) if obj_words else None))
        if not parsed:
            if skips is not None and skipped_clauses == 0:
                skips.append(SkipRecord(doc.doc_id, sentence.strip(), "no verb clause"))
            continue
        # object-less verbs in a conjunction share the next clause's object
        for i, (verb, obj) in enumerate(parsed):
            if obj is None:
                obj = next((o for _, o in parsed[i + 1 :] if o is not None), NONE_OBJECT)
            steps.append(ActionStep(verb, obj))
    return steps


def load_instruction_corpus(path: str | Path) -> list[InstructionDoc]:
    """One document per line; sentences split on '.'."""
    docs = []
    for i, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines()):
        if not line.strip():
            continue
        sentences = [s.strip() for s in line.split(".") if s.strip()]
        if sentences:
            docs.append(InstructionDoc(doc_id=f"doc-{i + 1}", sentences=sentences))
    return docs


def extract_corpus(path: str | Path) -> tuple[list[list[ActionStep]], list[SkipRecord]]:
    """Parse every document in an instruction file into action sequences."""
    skips: list[SkipRecord] = []
    seqs = []
    for doc in load_instruction_corpus(path):
        seq = parse_instructions(doc, skips)
        if seq:
            seqs.append(seq)
    return seqs, skips


def write_skip_report(skips: Iterable[SkipRecord], path: str | Path) -> None:
    lines = ["doc_id\tsentence\treason"]
    lines += [f"{s.doc_id}\t{s.sentence}\t{s.reason}" for s in skips]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Synthetic generator
# ---------------------------------------------------------------------------


@dataclass
class SynthConfig:
    """Knobs for the hidden-Markov synthetic benchmark."""

    n_states: int = 30
    n_actions: int = 30
    n_verbs: int = 10
    n_objects: int = 10
    transition_seed: int = 7
    emission_noise_sigma: float = 2.0
    frames_per_segment: int = 2
    context_len: int = 8
    feature_dim: int = 16
    n_train: int = 2000
    n_test: int = 500
    windows_per_trajectory: int = 4
    transition_peakiness: float = 3.0
    deterministic_transitions: bool = False
    tau: float = 1.0

    def __post_init__(self):
        counts = {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "n_verbs": self.n_verbs,
            "n_objects": self.n_objects,
            "frames_per_segment": self.frames_per_segment,
            "context_len": self.context_len,
            "feature_dim": self.feature_dim,
            "n_train": self.n_train,
            "n_test": self.n_test,
            "windows_per_trajectory": self.windows_per_trajectory,
        }
        for name, value in counts.items():
            if value < 1:
                raise ValueError(f"{name} must be >= 1, got {value}")
        if self.n_actions > self.n_verbs * self.n_objects:
            raise ValueError(
                f"n_actions={self.n_actions} exceeds n_verbs*n_objects="
                f"{self.n_verbs * self.n_objects}"
            )
        if self.emission_noise_sigma < 0:
            raise ValueError("emission_noise_sigma must be >= 0")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class SynthWorld:
    """The frozen structure behind a synthetic dataset."""

    transition: np.ndarray  # (S, S) row-stochastic
    emit: np.ndarray  # (S,) action id per state
    verbs: list[str]
    objects: list[str]
    action_steps: list[ActionStep]  # action id -> (verb, object)
    embeddings: np.ndarray  # (A, d)
    stationary: np.ndarray  # (S,)

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    def embedding_spacing(self) -> float:
        """Minimum pairwise distance between action embeddings."""
        diffs = self.embeddings[:, None, :] - self.embeddings[None, :, :]
        dist = np.sqrt((diffs**2).sum(axis=-1))
        dist[np.diag_indices_from(dist)] = np.inf
        return float(dist.min())


def stationary_distribution(transition: np.ndarray, iters: int = 10_000, tol: float = 1e-13) -> np.ndarray:
    """Stationary row vector of a row-stochastic matrix, by power iteration."""
    n = transition.shape[0]
    pi = np.full(n, 1.0 / n)
    for _ in range(iters):
        nxt = pi @ transition
        if np.abs(nxt - pi).max() < tol:
            return nxt / nxt.sum()
        pi = nxt
    return pi / pi.sum()


def build_world(cfg: SynthConfig) -> SynthWorld:
    rng = np.random.default_rng(cfg.transition_seed)
    logits = rng.normal(size=(cfg.n_states, cfg.n_states)) * cfg.transition_peakiness
    if cfg.deterministic_transitions:
        transition = np.zeros_like(logits)
        transition[np.arange(cfg.n_states), logits.argmax(axis=1)] = 1.0
    else:
        z = np.exp(logits - logits.max(axis=1, keepdims=True))
        transition = z / z.sum(axis=1, keepdims=True)

    if cfg.n_states >= cfg.n_actions:
        base = np.concatenate(
            [
                rng.permutation(cfg.n_actions),
                rng.integers(0, cfg.n_actions, size=cfg.n_states - cfg.n_actions),
            ]
        )
        emit = rng.permutation(base)
    else:
        emit = rng.choice(cfg.n_actions, size=cfg.n_states, replace=False)

    verbs = [f"v{i:02d}" for i in range(cfg.n_verbs)]
    objects = [f"o{i:02d}" for i in range(cfg.n_objects)]
    pair_ids = rng.choice(cfg.n_verbs * cfg.n_objects, size=cfg.n_actions, replace=False)
    action_steps = [
        ActionStep(verbs[p // cfg.n_objects], objects[p % cfg.n_objects]) for p in pair_ids
    ]
    embeddings = rng.normal(size=(cfg.n_actions, cfg.feature_dim))
    if cfg.deterministic_transitions:
        # argmax rows may be non-ergodic; fall back to uniform start states
        stationary = np.full(cfg.n_states, 1.0 / cfg.n_states)
    else:
        stationary = stationary_distribution(transition)
    return SynthWorld(transition, emit, verbs, objects, action_steps, embeddings, stationary)


def _sample_states(world: SynthWorld, rng: np.random.Generator, length: int) -> np.ndarray:
    states = np.empty(length, dtype=np.int64)
    cum = world.transition.cumsum(axis=1)
    s = int(np.searchsorted(world.stationary.cumsum(), rng.random()))
    s = min(s, world.n_states - 1)
    for i in range(length):
        states[i] = s
        s = int(np.searchsorted(cum[s], rng.random()))
        s = min(s, world.n_states - 1)
    return states


def windows_from_trajectory(
    traj_id: str,
    actions: np.ndarray,
    frames: np.ndarray,
    world: SynthWorld,
    context_len: int,
) -> list[Instance]:
    """Slide a context window over one trajectory; target = the next action."""
    if len(actions) < context_len + 1:
        raise ValueError(
            f"trajectory {traj_id!r} has {len(actions)} segments, "
            f"needs at least context_len+1 = {context_len + 1}"
        )
    out = []
    for w in range(len(actions) - context_len):
        segs = [world.action_steps[a] for a in actions[w : w + context_len]]
        target = world.action_steps[actions[w + context_len]]
        window = frames[w : w + context_len].reshape(-1, frames.shape[-1])
        out.append(Instance(id=f"{traj_id}-w{w:02d}", frames=window.copy(), segments=segs, target=target))
    return out


def gen_synthetic(cfg: SynthConfig, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded (train, test) datasets; splits are disjoint by trajectory."""
    world = build_world(cfg)
    rng = np.random.default_rng(seed)
    traj_len = cfg.context_len + cfg.windows_per_trajectory

    def make_split(prefix: str, n_instances: int) -> Dataset:
        instances: list[Instance] = []
        traj = 0
        while len(instances) < n_instances:
            states = _sample_states(world, rng, traj_len)
            actions = world.emit[states]
            noise = rng.normal(size=(traj_len, cfg.frames_per_segment, cfg.feature_dim))
            frames = world.embeddings[actions][:, None, :] + cfg.emission_noise_sigma * noise
            instances.extend(
                windows_from_trajectory(
                    f"{prefix}-t{traj:05d}", actions, frames, world, cfg.context_len
                )
            )
            traj += 1
        return Dataset(instances=instances[:n_instances], tau=cfg.tau)

    train = make_split("train", cfg.n_train)
    test = make_split("test", cfg.n_test)
    return train, test


def gen_synthetic_corpus(
    cfg: SynthConfig, seed: int, n_sequences: int, min_len: int = 8, max_len: int = 24
) -> list[list[ActionStep]]:
    """Action-label sequences from the same chain, for encoder pretraining."""
    world = build_world(cfg)
    rng = np.random.default_rng(seed)
    seqs = []
    for _ in range(n_sequences):
        length = int(rng.integers(min_len, max_len + 1))
        states = _sample_states(world, rng, length)
        seqs.append([world.action_steps[a] for a in world.emit[states]])
    return seqs


# ---------------------------------------------------------------------------
# Dataset / sequence serialization
# ---------------------------------------------------------------------------

_FLOAT_FMT = ".9g"


def _fmt(x: float) -> str:
    return format(float(x), _FLOAT_FMT)


def write_dataset(dataset: Dataset, path: str | Path) -> None:
    """JSONL, one instance per line, frames at 9 significant digits."""
    lines = []
    for inst in dataset.instances:
        frames = "[" + ",".join(
            "[" + ",".join(_fmt(v) for v in row) + "]" for row in inst.frames
        ) + "]"
        segments = json.dumps(
            [{"verb": s.verb, "object": s.object} for s in inst.segments],
            separators=(",", ":"),
        )
        target = json.dumps(
            {"verb": inst.target.verb, "object": inst.target.object},
            separators=(",", ":"),
        )
        lines.append(
            '{"id":%s,"frames":%s,"segments":%s,"target":%s}'
            % (json.dumps(inst.id), frames, segments, target)
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _require(doc: dict, key: str, line_no: int):
    if key not in doc:
        raise DatasetFormatError(
            f"line {line_no}: missing field {key!r}", line=line_no, field_name=key
        )
    return doc[key]


def _parse_step(doc, line_no: int, where: str) -> ActionStep:
    if not isinstance(doc, dict) or "verb" not in doc or "object" not in doc:
        missing = "verb" if not isinstance(doc, dict) or "verb" not in doc else "object"
        raise DatasetFormatError(
            f"line {line_no}: {where} missing field {missing!r}",
            line=line_no,
            field_name=missing,
        )
    return ActionStep(str(doc["verb"]), str(doc["object"]))


def load_dataset(path: str | Path, tau: float = 1.0) -> Dataset:
    instances = []
    text = Path(path).read_text(encoding="utf-8")
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            doc = json.loads(line)
        except json.JSONDecodeError as e:
            raise DatasetFormatError(f"line {line_no}: invalid JSON ({e})", line=line_no) from None
        inst_id = _require(doc, "id", line_no)
        frames = _require(doc, "frames", line_no)
        segments = _require(doc, "segments", line_no)
        target = _require(doc, "target", line_no)
        try:
            frames_arr = np.asarray(frames, dtype=np.float64)
        except (TypeError, ValueError):
            raise DatasetFormatError(
                f"line {line_no}: frames must be a rectangular float matrix",
                line=line_no,
                field_name="frames",
            ) from None
        if frames_arr.ndim != 2:
            raise DatasetFormatError(
                f"line {line_no}: frames must be 2-D, got shape {frames_arr.shape}",
                line=line_no,
                field_name="frames",
            )
        steps = [_parse_step(s, line_no, f"segments[{i}]") for i, s in enumerate(segments)]
        if not steps:
            raise DatasetFormatError(
                f"line {line_no}: segments must be non-empty", line=line_no, field_name="segments"
            )
        instances.append(
            Instance(
                id=str(inst_id),
                frames=frames_arr,
                segments=steps,
                target=_parse_step(target, line_no, "target"),
            )
        )
    if not instances:
        raise DatasetFormatError("no instances")
    ds = Dataset(instances=instances, tau=tau)
    validate_dataset(ds)
    return ds


def datasets_equal(a: Dataset, b: Dataset, rtol: float = 1e-8) -> bool:
    if len(a.instances) != len(b.instances):
        return False
    for x, y in zip(a.instances, b.instances):
        if x.id != y.id or x.segments != y.segments or x.target != y.target:
            return False
        if x.frames.shape != y.frames.shape:
            return False
        if not np.allclose(x.frames, y.frames, rtol=rtol, atol=0.0):
            return False
    return True


def write_action_sequences(seqs: Iterable[list[ActionStep]], path: str | Path) -> None:
    lines = []
    for i, seq in enumerate(seqs):
        steps = json.dumps(
            [{"verb": s.verb, "object": s.object} for s in seq], separators=(",", ":")
        )
        lines.append('{"id":"seq-%d","steps":%s}' % (i + 1, steps))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_action_sequences(path: str | Path) -> list[list[ActionStep]]:
    seqs = []
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        doc = json.loads(line)
        seqs.append([_parse_step(s, line_no, f"steps[{i}]") for i, s in enumerate(doc["steps"])])
    if not seqs:
        raise DatasetFormatError("no sequences")
    return seqs


def frame_segment_alignment(t: int, k: int) -> np.ndarray:
    """Segment index owning each frame: frame j belongs to segment (j*k)//t."""
    return (np.arange(t) * k) // t


def action_label_of(inst: Instance, vocab: Vocabulary):
    return vocab.label(inst.target.verb, inst.target.object)


def instance_action_ids(inst: Instance, vocab: Vocabulary) -> np.ndarray:
    """Action id of each observed segment."""
    return np.asarray(
        [vocab.actions[action_name(s.verb, s.object)] for s in inst.segments], dtype=np.int64
    )
