"""Conversations, emotion label sets, the JSONL corpus format and a synthetic
corpus generator."""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

RESERVED_TOKENS = ("<s>", "</s>", "<mask>")
RESERVED_FRAGMENTS = RESERVED_TOKENS + ("<pad>", "<unk>")


class CorpusError(ValueError):
    """Raised for malformed corpus files or invalid domain objects."""


# Fixed English adverb per label name; LabelSet copies these so users can override.
ADVERBS = {
    "anger": "angrily",
    "happiness": "happily",
    "joyful": "happily",
    "sadness": "sadly",
    "sad": "sadly",
    "neutral": "neutrally",
    "fear": "fearfully",
    "scared": "fearfully",
    "disgust": "disgustedly",
    "surprise": "surprisedly",
    "frustrated": "frustratedly",
    "excited": "excitedly",
    "mad": "madly",
    "powerful": "powerfully",
    "peaceful": "peacefully",
    "emotional": "emotionally",
    "positive": "positively",
    "negative": "negatively",
}


def default_adverb(name: str) -> str:
    if name in ADVERBS:
        return ADVERBS[name]
    return name + "ly"


@dataclass(frozen=True)
class Speaker:
    name: str

    def __post_init__(self):
        name = self.name.strip()
        if not name:
            raise CorpusError("speaker name must be non-empty")
        if any(tok in name for tok in RESERVED_FRAGMENTS):
            raise CorpusError(f"speaker name {name!r} contains a reserved token")
        object.__setattr__(self, "name", name)

    def __str__(self):
        return self.name


@dataclass(frozen=True)
class Utterance:
    index: int
    speaker: Speaker
    text: str
    gold_label: int | None = None

    def __post_init__(self):
        if isinstance(self.speaker, str):
            object.__setattr__(self, "speaker", Speaker(self.speaker))
        if not self.text or not self.text.strip():
            raise CorpusError(f"utterance {self.index} has empty text")
        if any(tok in self.text for tok in RESERVED_FRAGMENTS):
            raise CorpusError(f"utterance {self.index} text contains a reserved token")


@dataclass(frozen=True)
class Conversation:
    id: str
    utterances: tuple[Utterance, ...]

    def __post_init__(self):
        object.__setattr__(self, "utterances", tuple(self.utterances))
        if not self.utterances:
            raise CorpusError(f"conversation {self.id!r} has no utterances")
        for pos, u in enumerate(self.utterances, start=1):
            if u.index != pos:
                raise CorpusError(
                    f"conversation {self.id!r}: utterance indices must be 1..N in order"
                )

    def __len__(self):
        return len(self.utterances)

    def __getitem__(self, index: int) -> Utterance:
        """1-based access, matching utterance indices."""
        if not 1 <= index <= len(self.utterances):
            raise IndexError(f"utterance index {index} out of range 1..{len(self.utterances)}")
        return self.utterances[index - 1]

    @classmethod
    def from_turns(cls, conv_id: str, turns: Iterable[tuple], ) -> "Conversation":
        """Build from ``(speaker, text)`` or ``(speaker, text, label)`` tuples."""
        utts = []
        for pos, turn in enumerate(turns, start=1):
            label = turn[2] if len(turn) > 2 else None
            utts.append(Utterance(pos, Speaker(turn[0]), turn[1], label))
        return cls(conv_id, tuple(utts))


@dataclass(frozen=True)
class LabelSet:
    name: str
    labels: tuple[str, ...]
    neutral_index: int | None = None
    emo_adverbs: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(self.labels))
        if len(set(self.labels)) != len(self.labels):
            raise CorpusError(f"label set {self.name!r} has duplicate labels")
        if self.neutral_index is not None and not 0 <= self.neutral_index < len(self.labels):
            raise CorpusError("neutral_index out of range")
        adverbs = tuple(self.emo_adverbs) or tuple(default_adverb(l) for l in self.labels)
        if len(adverbs) != len(self.labels):
            raise CorpusError("exactly one adverb per label is required")
        object.__setattr__(self, "emo_adverbs", adverbs)

    def __len__(self):
        return len(self.labels)

    def index(self, name: str) -> int:
        try:
            return self.labels.index(name)
        except ValueError:
            raise CorpusError(f"unknown label {name!r} for label set {self.name!r}") from None


_SEVEN = ("anger", "disgust", "fear", "happiness", "sadness", "surprise", "neutral")

BUILTIN_LABELS = {
    "iemocap": ("neutral", "happiness", "sadness", "anger", "frustrated", "excited"),
    "meld": _SEVEN,
    "dailydialog": _SEVEN,
    "emorynlp": ("neutral", "sad", "mad", "scared", "powerful", "peaceful", "joyful"),
}

# Valence tables for the ternary scheme. The source only names the coarse labels.
TERNARY_VALENCE = {
    "iemocap": {
        "happiness": "positive", "excited": "positive",
        "sadness": "negative", "anger": "negative", "frustrated": "negative",
        "neutral": "neutral",
    },
    "meld": {
        "happiness": "positive", "surprise": "positive",
        "anger": "negative", "disgust": "negative", "fear": "negative", "sadness": "negative",
        "neutral": "neutral",
    },
    "emorynlp": {
        "joyful": "positive", "powerful": "positive", "peaceful": "positive",
        "sad": "negative", "mad": "negative", "scared": "negative",
        "neutral": "neutral",
    },
}
TERNARY_VALENCE["dailydialog"] = TERNARY_VALENCE["meld"]


def builtin_label_set(dataset: str) -> LabelSet:
    key = dataset.lower()
    if key not in BUILTIN_LABELS:
        raise CorpusError(f"unknown dataset {dataset!r}; choose from {sorted(BUILTIN_LABELS)}")
    labels = BUILTIN_LABELS[key]
    return LabelSet(key, labels, labels.index("neutral"))


@dataclass(frozen=True)
class CoarseningScheme:
    """Maps fine label indices onto a (possibly identical) coarse label set."""

    name: str
    mapping: tuple[int, ...]
    coarse_labels: tuple[str, ...]
    adverbs: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "mapping", tuple(int(m) for m in self.mapping))
        object.__setattr__(self, "coarse_labels", tuple(self.coarse_labels))
        if not self.adverbs:
            object.__setattr__(
                self, "adverbs", tuple(default_adverb(c) for c in self.coarse_labels)
            )
        expected = {"binary": 2, "ternary": 3}.get(self.name)
        if expected is not None and len(self.coarse_labels) != expected:
            raise CorpusError(f"{self.name} scheme needs {expected} coarse labels")
        if any(not 0 <= m < len(self.coarse_labels) for m in self.mapping):
            raise CorpusError("coarse mapping points outside the coarse label set")

    def __len__(self):
        return len(self.coarse_labels)

    @property
    def labels(self) -> tuple[str, ...]:
        return self.coarse_labels

    def index(self, name: str) -> int:
        try:
            return self.coarse_labels.index(name)
        except ValueError:
            raise CorpusError(f"unknown label {name!r} for scheme {self.name!r}") from None

    def apply(self, label: int | None) -> int | None:
        return None if label is None else self.mapping[label]

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "mapping": list(self.mapping),
            "coarse_labels": list(self.coarse_labels),
            "adverbs": list(self.adverbs),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CoarseningScheme":
        return cls(d["name"], tuple(d["mapping"]), tuple(d["coarse_labels"]), tuple(d["adverbs"]))


def full_scheme(label_set: LabelSet) -> CoarseningScheme:
    """Identity scheme, used for task-driven knowledge and fine-grained models."""
    return CoarseningScheme(
        "full", tuple(range(len(label_set))), label_set.labels, label_set.emo_adverbs
    )


def coarsen(label_set: LabelSet, scheme_name: str,
            valence: dict[str, str] | None = None) -> CoarseningScheme:
    """Binary (neutral, emotional) or ternary (positive, neutral, negative) reduction.

    ``valence`` overrides the builtin ternary table for custom label sets.
    """
    if scheme_name == "full":
        return full_scheme(label_set)
    if scheme_name == "binary":
        if label_set.neutral_index is None:
            raise CorpusError(f"binary scheme needs a neutral label; {label_set.name!r} has none")
        coarse = ("neutral", "emotional")
        mapping = tuple(0 if i == label_set.neutral_index else 1 for i in range(len(label_set)))
        return CoarseningScheme("binary", mapping, coarse)
    if scheme_name == "ternary":
        table = valence or TERNARY_VALENCE.get(label_set.name)
        if table is None:
            raise CorpusError(f"no ternary valence table for label set {label_set.name!r}")
        coarse = ("positive", "neutral", "negative")
        try:
            mapping = tuple(coarse.index(table[l]) for l in label_set.labels)
        except KeyError as exc:
            raise CorpusError(f"valence table misses label {exc.args[0]!r}") from None
        return CoarseningScheme("ternary", mapping, coarse)
    raise CorpusError(f"unknown coarsening scheme {scheme_name!r}")


@dataclass(frozen=True)
class Corpus:
    label_set: LabelSet
    split: str
    conversations: tuple[Conversation, ...]

    def __post_init__(self):
        object.__setattr__(self, "conversations", tuple(self.conversations))
        if self.split not in ("train", "test"):
            raise CorpusError(f"split must be train or test, got {self.split!r}")
        n = len(self.label_set)
        seen = set()
        for conv in self.conversations:
            if conv.id in seen:
                raise CorpusError(f"duplicate conversation id {conv.id!r}")
            seen.add(conv.id)
            for u in conv.utterances:
                if u.gold_label is not None and not 0 <= u.gold_label < n:
                    raise CorpusError(f"gold label {u.gold_label} out of range in {conv.id!r}")

    def __iter__(self):
        return iter(self.conversations)

    def __len__(self):
        return len(self.conversations)

    def by_id(self) -> dict[str, Conversation]:
        return {c.id: c for c in self.conversations}

    def n_utterances(self) -> int:
        return sum(len(c) for c in self.conversations)

    def items(self):
        """Yield every ``(conversation, index)`` pair in corpus order."""
        for conv in self.conversations:
            for u in conv.utterances:
                yield conv, u.index

    def golds(self) -> list[int | None]:
        return [u.gold_label for c in self.conversations for u in c.utterances]


def _parse_line(line: str, lineno: int, label_set: LabelSet) -> Conversation:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise CorpusError(f"line {lineno}: malformed JSON ({exc.msg})") from None
    if not isinstance(obj, dict) or not isinstance(obj.get("id"), str):
        raise CorpusError(f"line {lineno}: malformed record, expected an object with string 'id'")
    utts = obj.get("utterances")
    if not isinstance(utts, list):
        raise CorpusError(f"line {lineno}: malformed record, 'utterances' must be a list")
    out = []
    for pos, rec in enumerate(utts, start=1):
        if (not isinstance(rec, dict) or not isinstance(rec.get("speaker"), str)
                or not isinstance(rec.get("text"), str)):
            raise CorpusError(f"line {lineno}: malformed utterance {pos}")
        label = rec.get("label")
        if label is not None and not isinstance(label, str):
            raise CorpusError(f"line {lineno}: label must be a string or null")
        try:
            gold = None if label is None else label_set.index(label)
            out.append(Utterance(pos, Speaker(rec["speaker"]), rec["text"], gold))
        except CorpusError as exc:
            raise CorpusError(f"line {lineno}: {exc}") from None
    try:
        return Conversation(obj["id"], tuple(out))
    except CorpusError as exc:
        raise CorpusError(f"line {lineno}: {exc}") from None


def load_corpus(path: str | Path, label_set: LabelSet, split: str = "train") -> Corpus:
    convs = []
    seen: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            conv = _parse_line(line, lineno, label_set)
            if conv.id in seen:
                raise CorpusError(
                    f"line {lineno}: duplicate conversation id {conv.id!r} (first at line {seen[conv.id]})"
                )
            seen[conv.id] = lineno
            convs.append(conv)
    if not convs:
        raise CorpusError(f"empty corpus: {path}")
    return Corpus(label_set, split, tuple(convs))


def conversation_to_json(conv: Conversation, label_set: LabelSet) -> str:
    rec = {
        "id": conv.id,
        "utterances": [
            {
                "speaker": u.speaker.name,
                "text": u.text,
                "label": None if u.gold_label is None else label_set.labels[u.gold_label],
            }
            for u in conv.utterances
        ],
    }
    return json.dumps(rec, ensure_ascii=False)


def write_corpus(corpus: Corpus, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for conv in corpus.conversations:
            fh.write(conversation_to_json(conv, corpus.label_set) + "\n")


@dataclass(frozen=True)
class Prediction:
    label: int
    confidence: float
    distribution: tuple[float, ...]

    def __post_init__(self):
        dist = np.asarray(self.distribution, dtype=np.float64)
        if dist.ndim != 1 or dist.size == 0:
            raise ValueError("distribution must be a non-empty vector")
        if abs(dist.sum() - 1.0) > 1e-6 or (dist < 0).any():
            raise ValueError("distribution must be a probability vector")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("confidence must lie in [0, 1]")
        object.__setattr__(self, "distribution", tuple(float(x) for x in dist))

    @classmethod
    def from_distribution(cls, dist) -> "Prediction":
        dist = np.asarray(dist, dtype=np.float64)
        label = int(np.argmax(dist))  # first maximum, i.e. lowest index on ties
        return cls(label, float(dist[label]), tuple(dist))


# -- synthetic corpora -------------------------------------------------------

SPEAKER_NAMES = ("Alice", "Bob", "Carol", "Dave", "Erin", "Frank", "Grace", "Heidi")


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of the synthetic dialogue generator.

    Each speaker carries a mood that persists to their next own turn with
    probability ``persistence``; otherwise it jumps uniformly to another label.
    Every utterance has ``words_per_utterance`` filler words, and with
    probability ``signal`` one of them is replaced by a word of the
    speaker's current mood.
    """

    n_conversations: int = 100
    min_turns: int = 6
    max_turns: int = 12
    n_speakers: int = 2
    label_set: str | LabelSet = "iemocap"
    labels: tuple[str, ...] = ()
    persistence: float = 0.8
    signal: float = 0.5
    words_per_utterance: int = 5
    words_per_label: int = 3
    n_filler: int = 40
    label_weights: tuple[float, ...] = ()

    def resolve_label_set(self) -> LabelSet:
        if isinstance(self.label_set, LabelSet):
            return self.label_set
        return builtin_label_set(self.label_set)

    def active_labels(self) -> list[int]:
        ls = self.resolve_label_set()
        if not self.labels:
            return list(range(len(ls)))
        return [ls.index(name) for name in self.labels]

    def validate(self) -> None:
        problems = []
        if self.n_conversations < 1:
            problems.append("n_conversations must be >= 1")
        if not 1 <= self.min_turns <= self.max_turns:
            problems.append("need 1 <= min_turns <= max_turns")
        if not 1 <= self.n_speakers <= len(SPEAKER_NAMES):
            problems.append(f"n_speakers must be in 1..{len(SPEAKER_NAMES)}")
        if not 0.0 <= self.persistence <= 1.0:
            problems.append("persistence must be in [0, 1]")
        if not 0.0 <= self.signal <= 1.0:
            problems.append("signal must be in [0, 1]")
        if self.words_per_utterance < 1 or self.words_per_label < 1 or self.n_filler < 1:
            problems.append("word counts must be positive")
        try:
            active = self.active_labels()
        except CorpusError as exc:
            problems.append(str(exc))
            active = []
        if active and len(active) < 2 and self.persistence < 1.0:
            problems.append("mood changes need at least two labels")
        if self.label_weights and len(self.label_weights) != len(active):
            problems.append("label_weights must match the active labels")
        if problems:
            raise CorpusError("invalid synth spec: " + "; ".join(problems))


def emotion_words(label_name: str, k: int) -> list[str]:
    return [f"{label_name[:4]}{j}" for j in range(k)]


def synth_corpus(spec: SynthSpec, seed: int, split: str = "train") -> Corpus:
    spec.validate()
    ls = spec.resolve_label_set()
    active = spec.active_labels()
    rng = random.Random(seed)
    filler = [f"w{j:02d}" for j in range(spec.n_filler)]
    words = {i: emotion_words(ls.labels[i], spec.words_per_label) for i in active}
    weights = list(spec.label_weights) if spec.label_weights else None
    speakers = SPEAKER_NAMES[: spec.n_speakers]

    convs = []
    for c in range(spec.n_conversations):
        n_turns = rng.randint(spec.min_turns, spec.max_turns)
        mood = {s: rng.choices(active, weights=weights)[0] for s in speakers}
        seen_speaker = set()
        prev = None
        turns = []
        for _ in range(n_turns):
            options = [s for s in speakers if s != prev] or list(speakers)
            spk = rng.choice(options)
            if spk in seen_speaker and rng.random() >= spec.persistence:
                others = [a for a in active if a != mood[spk]]
                mood[spk] = rng.choice(others)
            seen_speaker.add(spk)
            toks = [rng.choice(filler) for _ in range(spec.words_per_utterance)]
            if rng.random() < spec.signal:
                toks[rng.randrange(len(toks))] = rng.choice(words[mood[spk]])
            turns.append((spk, " ".join(toks), mood[spk]))
            prev = spk
        convs.append(Conversation.from_turns(f"{split}-{seed}-{c:04d}", turns))
    return Corpus(ls, split, tuple(convs))


def label_histogram(corpus: Corpus) -> np.ndarray:
    counts = np.zeros(len(corpus.label_set), dtype=np.int64)
    for g in corpus.golds():
        if g is not None:
            counts[g] += 1
    return counts


def relabel(corpus: Corpus, scheme: CoarseningScheme) -> Corpus:
    """Project gold labels through a coarsening scheme."""
    coarse_ls = LabelSet(
        f"{corpus.label_set.name}:{scheme.name}", scheme.coarse_labels,
        scheme.coarse_labels.index("neutral") if "neutral" in scheme.coarse_labels else None,
        scheme.adverbs,
    )
    convs = tuple(
        Conversation(
            c.id,
            tuple(Utterance(u.index, u.speaker, u.text, scheme.apply(u.gold_label))
                  for u in c.utterances),
        )
        for c in corpus.conversations
    )
    return Corpus(coarse_ls, corpus.split, convs)


def collect_texts(corpora: Sequence[Corpus]) -> list[str]:
    return [u.text for corpus in corpora for c in corpus for u in c.utterances]
