"""Label spaces and token encoding for action sequences.

Three independent class spaces (joint action, verb, object) plus a single
token space used by the text-side encoder. Token layout: the four specials
first, then one token per verb, then one per object. The "NONE" object
sentinel always encodes to its reserved special id.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PAD, CLS, MASK, NONE_TOKEN = 0, 1, 2, 3
SPECIALS = {"PAD": PAD, "CLS": CLS, "MASK": MASK, "NONE": NONE_TOKEN}
NONE_OBJECT = "NONE"
N_SPECIALS = 4


class UnknownLabelError(KeyError):
    """A verb/object/action string absent from the vocabulary."""


@dataclass(frozen=True)
class ActionLabel:
    """Id triple for one action: joint class plus its verb and object classes."""

    action_id: int
    verb_id: int
    object_id: int


def action_name(verb: str, obj: str) -> str:
    return f"{verb}_{obj}"


def split_action_name(name: str) -> tuple[str, str]:
    """Inverse of action_name; the verb never contains an underscore."""
    verb, _, obj = name.partition("_")
    if not verb or not obj:
        raise ValueError(f"malformed action name {name!r}")
    return verb, obj


class Vocabulary:
    """Immutable maps between label strings, class ids, and token ids."""

    def __init__(self, actions: dict[str, int], verbs: dict[str, int], objects: dict[str, int]):
        for m in (actions, verbs, objects):
            if len(set(m.values())) != len(m):
                raise ValueError("class ids must be injective")
        self.actions = dict(actions)
        self.verbs = dict(verbs)
        self.objects = dict(objects)
        self.specials = dict(SPECIALS)
        self._action_names = {i: s for s, i in self.actions.items()}
        self._verb_names = {i: s for s, i in self.verbs.items()}
        self._object_names = {i: s for s, i in self.objects.items()}
        # token ids: specials, verbs, then non-sentinel objects
        self._verb_tokens = {s: N_SPECIALS + i for s, i in self.verbs.items()}
        self._object_tokens: dict[str, int] = {}
        next_id = N_SPECIALS + len(self.verbs)
        for s in sorted(self.objects, key=self.objects.get):
            if s == NONE_OBJECT:
                self._object_tokens[s] = NONE_TOKEN
            else:
                self._object_tokens[s] = next_id
                next_id += 1
        self.n_tokens = next_id
        self._token_names: dict[int, tuple[str, str]] = {
            tid: ("special", s) for s, tid in self.specials.items()
        }
        for s, tid in self._verb_tokens.items():
            self._token_names[tid] = ("verb", s)
        for s, tid in self._object_tokens.items():
            if tid != NONE_TOKEN:
                self._token_names[tid] = ("object", s)

    # -- sizes ---------------------------------------------------------------

    @property
    def n_actions(self) -> int:
        return len(self.actions)

    @property
    def n_verbs(self) -> int:
        return len(self.verbs)

    @property
    def n_objects(self) -> int:
        return len(self.objects)

    # -- class-id lookups ------------------------------------------------------

    def label(self, verb: str, obj: str) -> ActionLabel:
        name = action_name(verb, obj)
        if name not in self.actions:
            raise UnknownLabelError(f"unknown action {name!r}")
        if verb not in self.verbs:
            raise UnknownLabelError(f"unknown verb {verb!r}")
        if obj not in self.objects:
            raise UnknownLabelError(f"unknown object {obj!r}")
        return ActionLabel(self.actions[name], self.verbs[verb], self.objects[obj])

    def action_string(self, action_id: int) -> str:
        return self._action_names[action_id]

    def label_from_action_id(self, action_id: int) -> ActionLabel:
        verb, obj = split_action_name(self._action_names[action_id])
        return ActionLabel(action_id, self.verbs[verb], self.objects[obj])

    # -- token lookups -----------------------------------------------------------

    def verb_token(self, verb: str) -> int:
        if verb not in self._verb_tokens:
            raise UnknownLabelError(f"unknown verb {verb!r}")
        return self._verb_tokens[verb]

    def object_token(self, obj: str) -> int:
        if obj == NONE_OBJECT:
            return NONE_TOKEN
        if obj not in self._object_tokens:
            raise UnknownLabelError(f"unknown object {obj!r}")
        return self._object_tokens[obj]

    def token_name(self, token_id: int) -> tuple[str, str]:
        """(kind, string) for a token id; kind in {special, verb, object}."""
        if token_id not in self._token_names:
            raise UnknownLabelError(f"unknown token id {token_id}")
        return self._token_names[token_id]

    def content_token_ids(self) -> np.ndarray:
        """Token ids eligible for masking / random replacement in MLM."""
        return np.arange(N_SPECIALS, self.n_tokens, dtype=np.int64)

    # -- serialization ---------------------------------------------------------

    def to_json(self) -> str:
        doc = {
            "action": dict(sorted(self.actions.items())),
            "verb": dict(sorted(self.verbs.items())),
            "object": dict(sorted(self.objects.items())),
            "specials": self.specials,
        }
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        doc = json.loads(text)
        return cls(doc["action"], doc["verb"], doc["object"])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Vocabulary)
            and self.actions == other.actions
            and self.verbs == other.verbs
            and self.objects == other.objects
        )


def build_vocab(*datasets) -> Vocabulary:
    """Deterministic vocabulary over every verb/object/action seen anywhere.

    Accepts Dataset objects and/or bare sequences of (verb, object) steps;
    pass the train and test splits together so both are covered. Ids follow
    lexicographic string order, so instance order cannot matter.
    """
    verbs: set[str] = set()
    objects: set[str] = set()
    names: set[str] = set()

    def add_step(verb: str, obj: str) -> None:
        verbs.add(verb)
        objects.add(obj)
        names.add(action_name(verb, obj))

    for ds in datasets:
        instances = getattr(ds, "instances", None)
        if instances is not None:
            for inst in instances:
                for step in inst.segments:
                    add_step(step.verb, step.object)
                add_step(inst.target.verb, inst.target.object)
        else:
            for seq in ds:
                for step in seq:
                    add_step(step.verb, step.object)
    if not names:
        raise ValueError("cannot build a vocabulary from empty data")
    return Vocabulary(
        {s: i for i, s in enumerate(sorted(names))},
        {s: i for i, s in enumerate(sorted(verbs))},
        {s: i for i, s in enumerate(sorted(objects))},
    )


@dataclass
class ClassStats:
    """Per-action-class statistics on a training split."""

    counts: np.ndarray
    weights: np.ndarray
    many_shot: set[int] = field(default_factory=set)

    def to_json(self) -> str:
        return json.dumps(
            {
                "counts": [int(c) for c in self.counts],
                "weights": [float(w) for w in self.weights],
                "many_shot": sorted(int(c) for c in self.many_shot),
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "ClassStats":
        doc = json.loads(text)
        return cls(
            counts=np.asarray(doc["counts"], dtype=np.int64),
            weights=np.asarray(doc["weights"], dtype=np.float64),
            many_shot=set(doc["many_shot"]),
        )


def count_targets(dataset, vocab: Vocabulary) -> np.ndarray:
    counts = np.zeros(vocab.n_actions, dtype=np.int64)
    for inst in dataset.instances:
        counts[vocab.label(inst.target.verb, inst.target.object).action_id] += 1
    return counts


def class_weights(counts) -> np.ndarray:
    """Inverse relative-frequency weights: w_c = N / (C_seen · n_c).

    Unseen classes get weight 0. The mean effective weight over seen classes
    is 1 by construction, keeping loss magnitude comparable to unweighted CE.
    """
    counts = np.asarray(counts, dtype=np.float64)
    if np.any(counts < 0):
        raise ValueError("counts must be non-negative")
    total = counts.sum()
    if total == 0:
        raise ValueError("all class counts are zero")
    seen = counts > 0
    weights = np.zeros_like(counts)
    weights[seen] = total / (seen.sum() * counts[seen])
    return weights


def many_shot_classes(counts, threshold: int, override=None) -> set[int]:
    """Classes with count >= threshold, or the explicit override when given."""
    if override is not None:
        return set(int(c) for c in override)
    if threshold < 1:
        raise ValueError(f"threshold must be >= 1, got {threshold}")
    counts = np.asarray(counts)
    return set(int(c) for c in np.nonzero(counts >= threshold)[0])


def compute_class_stats(
    dataset, vocab: Vocabulary, many_shot_threshold: int = 5, many_shot_override=None
) -> ClassStats:
    counts = count_targets(dataset, vocab)
    return ClassStats(
        counts=counts,
        weights=class_weights(counts),
        many_shot=many_shot_classes(counts, many_shot_threshold, many_shot_override),
    )


def encode_sequence(seq, vocab: Vocabulary, context_len: int) -> np.ndarray:
    """Token ids for the last `context_len` steps of a (verb, object) sequence.

    Layout: left PAD fill, then CLS, then verb/object tokens interleaved.
    Fixed length 1 + 2*context_len.
    """
    if context_len < 1:
        raise ValueError(f"context_len must be >= 1, got {context_len}")
    steps = list(seq)[-context_len:]
    tokens = [PAD] * (2 * (context_len - len(steps))) + [CLS]
    for step in steps:
        tokens.append(vocab.verb_token(step.verb))
        tokens.append(vocab.object_token(step.object))
    return np.asarray(tokens, dtype=np.int64)


def decode_sequence(tokens, vocab: Vocabulary):
    """Inverse of encode_sequence (up to the kept suffix): list of (verb, object)."""
    from .corpus import ActionStep  # local import to avoid a module cycle

    toks = [int(t) for t in tokens]
    try:
        start = toks.index(CLS) + 1
    except ValueError:
        raise ValueError("no CLS token in sequence") from None
    body = toks[start:]
    if len(body) % 2 != 0:
        raise ValueError("token body must hold (verb, object) pairs")
    steps = []
    for v_tok, o_tok in zip(body[0::2], body[1::2]):
        kind, verb = vocab.token_name(v_tok)
        if kind != "verb":
            raise ValueError(f"expected a verb token, got {kind} {verb!r}")
        if o_tok == NONE_TOKEN:
            obj = NONE_OBJECT
        else:
            kind, obj = vocab.token_name(o_tok)
            if kind != "object":
                raise ValueError(f"expected an object token, got {kind} {obj!r}")
        steps.append(ActionStep(verb, obj))
    return steps
