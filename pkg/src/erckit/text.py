"""Suggestive input text for a query utterance.

A built text is ``past contexts, query, future contexts`` joined by single
spaces. The query is wrapped as ``<s>{speaker} <mask> says: {text}</s>``;
contexts read ``{speaker} says: {text}`` or, with accepted teacher knowledge,
``{speaker} {adverb} says: {text}``.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

from erckit.dialogue import (
    CoarseningScheme,
    Conversation,
    CorpusError,
    LabelSet,
    Prediction,
    Utterance,
)

BOS, EOS, MASK = "<s>", "</s>", "<mask>"
SAYS = " says: "
FEELS = " feels "

_TOKEN_RE = re.compile(r"<mask>|</s>|<s>|(?:(?!<mask>|</s>|<s>)\S)+")


class TextBuildError(ValueError):
    pass


def split_tokens(text: str) -> list[tuple[str, int, int]]:
    """Whitespace tokenization where reserved tokens self-delimit.

    Returns ``(token, char_start, char_end)`` triples.
    """
    return [(m.group(), m.start(), m.end()) for m in _TOKEN_RE.finditer(text)]


def token_strings(text: str) -> list[str]:
    return [t for t, _, _ in split_tokens(text)]


@dataclass(frozen=True)
class BuildConfig:
    mode: str = "MSA"
    window: int = 8
    online: bool = False
    token_budget: int = 256
    with_knowledge: bool = False
    knowledge_threshold: float = 0.7
    replace_contexts_with_knowledge: bool = False
    use_mask: bool = True

    def __post_init__(self):
        mode = self.mode.upper()
        if mode not in ("MSA", "SSA"):
            raise TextBuildError(f"mode must be MSA or SSA, got {self.mode!r}")
        object.__setattr__(self, "mode", mode)
        if self.window < 0:
            raise TextBuildError("window must be non-negative")
        if self.token_budget < 1:
            raise TextBuildError("token_budget must be positive")
        if self.knowledge_threshold < 0:
            raise TextBuildError("knowledge_threshold must be non-negative")
        if self.replace_contexts_with_knowledge and not self.with_knowledge:
            raise TextBuildError("replacing contexts with knowledge requires with_knowledge")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class SuggestiveText:
    """Rendered text with token-level segment spans.

    ``past_pieces`` and ``future_pieces`` hold ``(utterance index, rendered
    context)`` in text order; truncation removes whole pieces.
    """

    past_pieces: tuple[tuple[int, str], ...]
    query_piece: str
    future_pieces: tuple[tuple[int, str], ...]
    query_index: int
    rendered: str = field(init=False)
    tokens: tuple[str, ...] = field(init=False)
    past_span: tuple[int, int] = field(init=False)
    query_span: tuple[int, int] = field(init=False)
    future_span: tuple[int, int] = field(init=False)
    mask_position: int | None = field(init=False)

    def __post_init__(self):
        parts = [p for _, p in self.past_pieces] + [self.query_piece] + [
            p for _, p in self.future_pieces
        ]
        n_past = sum(len(token_strings(p)) for _, p in self.past_pieces)
        q_toks = token_strings(self.query_piece)
        n_future = sum(len(token_strings(p)) for _, p in self.future_pieces)
        object.__setattr__(self, "rendered", " ".join(parts))
        object.__setattr__(self, "tokens", tuple(token_strings(self.rendered)))
        object.__setattr__(self, "past_span", (0, n_past))
        object.__setattr__(self, "query_span", (n_past, n_past + len(q_toks)))
        object.__setattr__(
            self, "future_span", (n_past + len(q_toks), n_past + len(q_toks) + n_future)
        )
        mask = [k for k, t in enumerate(self.tokens) if t == MASK]
        object.__setattr__(self, "mask_position", mask[0] if mask else None)

    def __len__(self):
        return len(self.tokens)

    @property
    def past_indices(self) -> tuple[int, ...]:
        return tuple(j for j, _ in self.past_pieces)

    @property
    def future_indices(self) -> tuple[int, ...]:
        return tuple(j for j, _ in self.future_pieces)

    @property
    def spans(self) -> tuple[tuple[int, int], tuple[int, int], tuple[int, int]]:
        return self.past_span, self.query_span, self.future_span

    def span_table(self) -> str:
        rows = [f"{'segment':<8} {'start':>5} {'end':>5}  tokens"]
        for name, (lo, hi) in zip(("past", "query", "future"), self.spans):
            rows.append(f"{name:<8} {lo:>5} {hi:>5}  {' '.join(self.tokens[lo:hi])}")
        rows.append(f"mask position: {self.mask_position}")
        return "\n".join(rows)


@dataclass
class KnowledgeMap:
    """Teacher predictions per ``(conversation id, utterance index)``.

    Raw confidences are stored; screening happens when text is built.
    """

    scheme: CoarseningScheme
    entries: dict[tuple[str, int], Prediction] = field(default_factory=dict)

    def __post_init__(self):
        for pred in self.entries.values():
            if not 0.0 <= pred.confidence <= 1.0:
                raise ValueError("knowledge confidences must lie in [0, 1]")

    def __len__(self):
        return len(self.entries)

    def get(self, conv_id: str, index: int) -> Prediction | None:
        return self.entries.get((conv_id, index))

    def accepted(self, p: float) -> dict[tuple[str, int], int]:
        out = {}
        for key, pred in self.entries.items():
            label = screen_knowledge(pred, p)
            if label is not None:
                out[key] = label
        return out

    def acceptance_rate(self, p: float) -> float:
        return len(self.accepted(p)) / len(self.entries) if self.entries else 0.0

    def write(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            header = {"scheme": self.scheme.to_dict()}
            fh.write(json.dumps(header) + "\n")
            for (conv, idx), pred in sorted(self.entries.items()):
                rec = {
                    "conv": conv,
                    "idx": idx,
                    "label": self.scheme.coarse_labels[pred.label],
                    "conf": pred.confidence,
                    "dist": list(pred.distribution),
                }
                fh.write(json.dumps(rec) + "\n")

    @classmethod
    def read(cls, path: str | Path, scheme: CoarseningScheme | None = None) -> "KnowledgeMap":
        entries = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                rec = json.loads(line)
                if "scheme" in rec:
                    scheme = scheme or CoarseningScheme.from_dict(rec["scheme"])
                    continue
                if scheme is None:
                    raise CorpusError(f"{path}: no scheme header and none supplied")
                try:
                    label = scheme.index(rec["label"])
                    conf = float(rec["conf"])
                    key = (str(rec["conv"]), int(rec["idx"]))
                except (KeyError, TypeError, ValueError) as exc:
                    raise CorpusError(f"{path} line {lineno}: malformed knowledge record ({exc})") from None
                dist = rec.get("dist") or _dist_from_confidence(label, conf, len(scheme))
                entries[key] = Prediction(label, conf, tuple(dist))
        if scheme is None:
            raise CorpusError(f"{path}: empty knowledge file")
        return cls(scheme, entries)


def _dist_from_confidence(label: int, conf: float, n: int) -> list[float]:
    # Records without a distribution spread the remaining mass evenly.
    if n == 1:
        return [1.0]
    rest = (1.0 - conf) / (n - 1)
    return [conf if k == label else rest for k in range(n)]


def render_query(u: Utterance, use_mask: bool = True) -> str:
    if use_mask:
        return f"{BOS}{u.speaker.name} {MASK}{SAYS}{u.text}{EOS}"
    return f"{BOS}{u.speaker.name}{SAYS}{u.text}{EOS}"


def emo_token(label: int, scheme: CoarseningScheme | LabelSet) -> str:
    adverbs = scheme.adverbs if isinstance(scheme, CoarseningScheme) else scheme.emo_adverbs
    return adverbs[label]


def render_context(u: Utterance, knowledge: int | None = None,
                   label_set: CoarseningScheme | LabelSet | None = None) -> str:
    if knowledge is None:
        return f"{u.speaker.name}{SAYS}{u.text}"
    return f"{u.speaker.name} {emo_token(knowledge, label_set)}{SAYS}{u.text}"


def render_feeling(u: Utterance, knowledge: int,
                   label_set: CoarseningScheme | LabelSet) -> str:
    return f"{u.speaker.name}{FEELS}{emo_token(knowledge, label_set)}."


def select_context(conv: Conversation, i: int, cfg: BuildConfig
                   ) -> tuple[list[Utterance], list[Utterance]]:
    n = len(conv)
    if not 1 <= i <= n:
        raise TextBuildError(f"query index {i} out of range 1..{n}")
    w = cfg.window
    past = [conv[j] for j in range(max(1, i - w), i)]
    future = [] if cfg.online else [conv[j] for j in range(i + 1, min(n, i + w) + 1)]
    if cfg.mode == "SSA":
        spk = conv[i].speaker
        past = [u for u in past if u.speaker == spk]
        future = [u for u in future if u.speaker == spk]
    return past, future


def screen_knowledge(pred: Prediction | None, p: float) -> int | None:
    if pred is None or pred.confidence < p:
        return None
    return pred.label


def _render_contexts(conv, utts, cfg, knowledge):
    pieces = []
    for u in utts:
        label = None
        if knowledge is not None:
            label = screen_knowledge(knowledge.get(conv.id, u.index), cfg.knowledge_threshold)
        if cfg.replace_contexts_with_knowledge:
            if label is not None:
                pieces.append((u.index, render_feeling(u, label, knowledge.scheme)))
        else:
            pieces.append((u.index, render_context(u, label, knowledge.scheme if knowledge else None)))
    return tuple(pieces)


def build(conv: Conversation, i: int, cfg: BuildConfig,
          knowledge: KnowledgeMap | None = None) -> SuggestiveText:
    if cfg.with_knowledge and knowledge is None:
        raise TextBuildError("config requests knowledge but no KnowledgeMap was given")
    if not cfg.with_knowledge:
        knowledge = None
    past, future = select_context(conv, i, cfg)
    st = SuggestiveText(
        _render_contexts(conv, past, cfg, knowledge),
        render_query(conv[i], cfg.use_mask),
        _render_contexts(conv, future, cfg, knowledge),
        i,
    )
    return truncate(st, cfg.token_budget)


def truncate(st: SuggestiveText, budget: int) -> SuggestiveText:
    """Drop whole context utterances until the text fits ``budget`` tokens.

    The farthest remaining future context goes first, then the farthest past
    one, alternating; a side that runs out is skipped.
    """
    q_len = st.query_span[1] - st.query_span[0]
    if q_len > budget:
        raise TextBuildError(f"query overflow: query needs {q_len} tokens, budget is {budget}")
    if len(st) <= budget:
        return st
    past = list(st.past_pieces)
    future = list(st.future_pieces)
    sizes = {id(p): len(token_strings(p[1])) for p in past + future}
    total = len(st)
    take_future = True
    while total > budget:
        if take_future and future:
            total -= sizes[id(future.pop())]
        elif not take_future and past:
            total -= sizes[id(past.pop(0))]
        take_future = not take_future
    return replace(st, past_pieces=tuple(past), future_pieces=tuple(future))


def build_all(conv: Conversation, cfg: BuildConfig,
              knowledge: KnowledgeMap | None = None) -> list[SuggestiveText]:
    return [build(conv, u.index, cfg, knowledge) for u in conv.utterances]
