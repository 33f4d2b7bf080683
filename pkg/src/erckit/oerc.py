"""Online ERC simulation.

While speaker ``i`` is talking the teacher labels the completed utterance
``i-1`` (speaking stage); once ``u_i`` arrives only the small student runs
(prediction stage), reading the cached teacher labels as knowledge.
"""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from erckit.dialogue import Conversation, Corpus, Prediction, Utterance, full_scheme, relabel
from erckit.evaluation import EvalReport, evaluate
from erckit.text import BuildConfig, KnowledgeMap, build
from erckit.training import (
    Example,
    ModelBundle,
    TrainConfig,
    encode_text,
    make_bundle,
    predict_examples,
    train,
)

MODES = ("MSA+C", "MSA+K+C", "SSA+K+C", "SSA+K")
CLI_MODES = {"msa-c": "MSA+C", "msa-k-c": "MSA+K+C", "ssa-k-c": "SSA+K+C", "ssa-k": "SSA+K"}


class OercError(RuntimeError):
    pass


def normalize_mode(mode: str) -> str:
    m = CLI_MODES.get(mode.lower(), mode.upper().replace(" ", ""))
    if m not in MODES:
        raise OercError(f"unknown OERC mode {mode!r}; choose from {MODES}")
    return m


def mode_build_config(mode: str, window: int = 8, p: float = 0.5,
                      token_budget: int = 256) -> BuildConfig:
    """Online student input configuration for one of the four modes."""
    mode = normalize_mode(mode)
    return BuildConfig(
        mode="SSA" if mode.startswith("SSA") else "MSA",
        window=window,
        online=True,
        token_budget=token_budget,
        with_knowledge=mode != "MSA+C",
        knowledge_threshold=p,
        replace_contexts_with_knowledge=mode == "SSA+K",
    )


def teacher_online_config(teacher: ModelBundle) -> BuildConfig:
    return replace(teacher.build_config, online=True, with_knowledge=False,
                   replace_contexts_with_knowledge=False)


@dataclass
class TurnTiming:
    conv: str
    index: int
    speaking_tokens: int = 0
    prediction_tokens: int = 0
    speaking_seconds: float = 0.0
    prediction_seconds: float = 0.0


@dataclass
class OercSession:
    """Single-owner state for one conversation being streamed turn by turn."""

    conv_id: str
    teacher: ModelBundle
    student: ModelBundle
    mode: str = "MSA+K+C"
    p: float = 0.5
    window: int = 8
    token_budget: int = 256
    history: list[Utterance] = field(default_factory=list)
    cache: KnowledgeMap | None = None
    timings: dict[int, TurnTiming] = field(default_factory=dict)
    last_text: object = field(default=None, repr=False)

    def __post_init__(self):
        self.mode = normalize_mode(self.mode)
        if self.cache is None:
            self.cache = KnowledgeMap(self.teacher.scheme)
        self.student_config = mode_build_config(
            self.mode, self.window, self.p,
            min(self.token_budget, self.student.encoder.config.max_len))
        self.teacher_config = teacher_online_config(self.teacher)

    def _timing(self, index: int) -> TurnTiming:
        return self.timings.setdefault(index, TurnTiming(self.conv_id, index))

    def _conversation(self, extra: Utterance | None = None) -> Conversation:
        utts = list(self.history) + ([extra] if extra is not None else [])
        return Conversation(self.conv_id, tuple(utts))


def speaking_stage(session: OercSession, u: Utterance) -> OercSession:
    """Teacher labels the just-completed utterance from preceding context only."""
    n = len(session.history)
    if u.index <= n:
        if session.history[u.index - 1] != u:
            raise OercError(f"replayed utterance {u.index} differs from the recorded one")
        return session
    if u.index != n + 1:
        raise OercError(f"out-of-order utterance {u.index}; expected {n + 1}")
    start = time.perf_counter()
    conv = session._conversation(u)
    st = build(conv, u.index, session.teacher_config)
    ids, spans = encode_text(session.teacher, st)
    dist = predict_examples(session.teacher, [Example(ids, spans, None, (conv.id, u.index))])[0]
    session.history.append(u)
    session.cache.entries[(session.conv_id, u.index)] = Prediction.from_distribution(dist)
    timing = session._timing(u.index)
    timing.speaking_tokens = len(st)
    timing.speaking_seconds = time.perf_counter() - start
    return session


def predict_online(session: OercSession, u: Utterance) -> tuple[Prediction, TurnTiming]:
    """Student prediction for the newly completed utterance ``u``."""
    n = len(session.history)
    if u.index != n + 1:
        raise OercError(f"cache stale: history has {n} utterances, got utterance {u.index}")
    if len(session.cache) != n:
        raise OercError(f"cache stale: {len(session.cache)} knowledge entries for {n} utterances")
    start = time.perf_counter()
    conv = session._conversation(u)
    st = build(conv, u.index, session.student_config, session.cache)
    ids, spans = encode_text(session.student, st)
    dist = predict_examples(session.student, [Example(ids, spans, None, (conv.id, u.index))])[0]
    elapsed = time.perf_counter() - start
    timing = session._timing(u.index)
    timing.prediction_tokens = len(st)
    timing.prediction_seconds = elapsed
    session.last_text = st
    return Prediction.from_distribution(dist), timing


@dataclass(frozen=True)
class SessionTemplate:
    teacher: ModelBundle
    student: ModelBundle
    mode: str = "MSA+K+C"
    p: float = 0.5
    window: int = 8
    token_budget: int = 256

    def open(self, conv_id: str) -> OercSession:
        return OercSession(conv_id, self.teacher, self.student, self.mode, self.p,
                           self.window, self.token_budget)


@dataclass
class SimulationResult:
    predictions: list[Prediction]
    report: EvalReport | None
    timings: list[TurnTiming]
    texts: list[str]

    def summary(self) -> dict:
        n = max(len(self.timings), 1)
        return {
            "utterances": len(self.timings),
            "mean_prediction_tokens": sum(t.prediction_tokens for t in self.timings) / n,
            "mean_speaking_tokens": sum(t.speaking_tokens for t in self.timings) / n,
            "prediction_seconds": sum(t.prediction_seconds for t in self.timings),
            "speaking_seconds": sum(t.speaking_seconds for t in self.timings),
        }

    def write_timing_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            cols = ["conv", "index", "speaking_tokens", "prediction_tokens",
                    "speaking_seconds", "prediction_seconds"]
            w.writerow(cols)
            for t in self.timings:
                row = asdict(t)
                w.writerow([row[c] for c in cols])


def simulate(corpus: Corpus, template: SessionTemplate) -> SimulationResult:
    """Stream every conversation turn by turn through a fresh session."""
    preds, timings, texts = [], [], []
    for conv in corpus:
        session = template.open(conv.id)
        for u in conv.utterances:
            pred, timing = predict_online(session, u)
            texts.append(session.last_text.rendered)
            speaking_stage(session, u)
            preds.append(pred)
            timings.append(timing)
    report = None
    if all(g is not None for g in corpus.golds()):
        target = corpus if template.student.scheme.name == "full" else relabel(
            corpus, template.student.scheme)
        report = evaluate([p.label for p in preds], target)
    return SimulationResult(preds, report, timings, texts)


def online_knowledge(teacher: ModelBundle, corpus: Corpus) -> KnowledgeMap:
    """Teacher labels for every utterance using preceding context only.

    Equal to what the speaking stage caches during ``simulate``.
    """
    cfg = teacher_online_config(teacher)
    examples = []
    for conv, i in corpus.items():
        ids, spans = encode_text(teacher, build(conv, i, cfg))
        examples.append(Example(ids, spans, None, (conv.id, i)))
    dists = predict_examples(teacher, examples)
    return KnowledgeMap(teacher.scheme, {
        e.key: Prediction.from_distribution(d) for e, d in zip(examples, dists)})


def train_online_student(teacher: ModelBundle, corpus: Corpus, mode: str, vocab=None,
                         encoder_config=None, train_config: TrainConfig | None = None,
                         p: float = 0.5, window: int = 8, token_budget: int = 256,
                         knowledge: KnowledgeMap | None = None):
    """Train a student on the online inputs of ``mode`` using teacher knowledge."""
    cfg = mode_build_config(mode, window, p, token_budget)
    km = None
    if cfg.with_knowledge:
        km = knowledge or online_knowledge(teacher, corpus)
    student = make_bundle(vocab or teacher.vocab, full_scheme(corpus.label_set), cfg,
                          encoder_config, train_config)
    return train(student, corpus, knowledge=km)
