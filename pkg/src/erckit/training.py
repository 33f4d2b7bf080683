"""Focal-loss training, Adam, checkpoints and the coarse-teacher / fine-student
pipeline."""

from __future__ import annotations

import copy
import csv
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from erckit.dialogue import (
    CoarseningScheme,
    Conversation,
    Corpus,
    LabelSet,
    Prediction,
    coarsen,
    full_scheme,
    relabel,
)
from erckit.encoder import Encoder, EncoderConfig, Vocab, build_vocab, pad_batch, tokenize
from erckit.evaluation import EvalReport, evaluate, weighted_f1
from erckit.head import Head, HeadConfig, softmax
from erckit.text import BuildConfig, KnowledgeMap, SuggestiveText, build

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
# fine-tuning rate for a large pretrained encoder; the "pretrained" config preset
PRETRAINED_LEARNING_RATE = 9e-6
PROB_EPS = 1e-12


class TrainingError(ValueError):
    pass


# -- loss and optimizer ------------------------------------------------------

def focal_loss(distribution, target, gamma: float = 2.0):
    """Mean focal loss ``-(1 - p_t)^gamma * log p_t`` and its gradient wrt the logits.

    Accepts one distribution (C,) with an int target, or a batch (B, C) with
    a target vector; the gradient has the input's shape.
    """
    probs = np.asarray(distribution, dtype=np.float64)
    single = probs.ndim == 1
    probs = np.atleast_2d(probs)
    target = np.atleast_1d(np.asarray(target, dtype=np.int64))
    b, c = probs.shape
    if target.shape != (b,) or target.min() < 0 or target.max() >= c:
        raise TrainingError("targets must index the distribution")
    pt = probs[np.arange(b), target]
    pt_c = np.clip(pt, PROB_EPS, 1.0)
    log_pt = np.log(pt_c)
    one_minus = 1.0 - pt
    losses = -(one_minus ** gamma) * log_pt
    # dL/dp_t, then chain through softmax: dp_t/dz_k = p_t (1[k=t] - p_k)
    dl_dpt = -(one_minus ** gamma) / pt_c
    if gamma > 0:
        with np.errstate(divide="ignore", invalid="ignore"):
            focus = np.where(one_minus > 0, gamma * one_minus ** (gamma - 1) * log_pt, 0.0)
        dl_dpt = dl_dpt + focus
    onehot = np.zeros_like(probs)
    onehot[np.arange(b), target] = 1.0
    grad = (dl_dpt * pt)[:, None] * (onehot - probs) / b
    if single:
        return float(losses[0]), grad[0]
    return float(losses.mean()), grad


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
              frozen: set[str] | frozenset = frozenset()) -> AdamState:
    """In-place bias-corrected Adam update; frozen or gradient-less tensors are skipped."""
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name in sorted(params):
        if name in frozen:
            continue
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(params[name])
        if g.shape != params[name].shape:
            raise TrainingError(f"gradient shape mismatch for {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


# -- configuration and bundles ----------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 9e-4
    batch_size: int = 8
    epochs: int = 10
    focal_gamma: float = 2.0
    seed: int = 0
    frozen_prefix: int = 0
    freeze_embeddings: bool = False
    mlp_depth: int = 1
    pooling: str = "fcm"
    dropout: float = 0.1
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise TrainingError("learning_rate and batch_size must be positive, epochs >= 0")
        if self.focal_gamma < 0:
            raise TrainingError("focal_gamma must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ModelBundle:
    encoder: Encoder
    head: Head
    vocab: Vocab
    build_config: BuildConfig
    scheme: CoarseningScheme
    train_config: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.head.config.model_dim != self.encoder.config.model_dim:
            raise TrainingError("head width does not match the encoder")
        if self.head.config.n_classes != len(self.scheme):
            raise TrainingError("head output size does not match the label scheme")
        if self.build_config.token_budget > self.encoder.config.max_len:
            raise TrainingError("token budget exceeds the encoder max_len")

    def copy(self) -> "ModelBundle":
        return copy.deepcopy(self)

    def n_trainable(self) -> int:
        return self.encoder.n_trainable() + self.head.n_parameters()

    def save(self, path: str | Path) -> None:
        meta = {
            "version": CHECKPOINT_VERSION,
            "encoder": self.encoder.config.to_dict(),
            "head": self.head.config.to_dict(),
            "build": self.build_config.to_dict(),
            "scheme": self.scheme.to_dict(),
            "train": self.train_config.to_dict(),
            "vocab": self.vocab.tokens,
        }
        arrays = {f"enc/{k}": v for k, v in self.encoder.params.items()}
        arrays.update({f"head/{k}": v for k, v in self.head.params.items()})
        with open(path, "wb") as fh:
            np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)

    @classmethod
    def load(cls, path: str | Path) -> "ModelBundle":
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(str(data["__meta__"]))
            if meta.get("version") != CHECKPOINT_VERSION:
                raise TrainingError(f"unsupported checkpoint version {meta.get('version')}")
            enc = {k[4:]: data[k].copy() for k in data.files if k.startswith("enc/")}
            head = {k[5:]: data[k].copy() for k in data.files if k.startswith("head/")}
        train = dict(meta["train"])
        train["betas"] = tuple(train["betas"])
        return cls(
            Encoder(EncoderConfig(**meta["encoder"]), enc),
            Head(HeadConfig(**meta["head"]), head),
            Vocab(meta["vocab"]),
            BuildConfig(**meta["build"]),
            CoarseningScheme.from_dict(meta["scheme"]),
            TrainConfig(**train),
        )


def template_texts(corpora: Sequence[Corpus], schemes: Sequence[CoarseningScheme] = ()) -> list[str]:
    """Texts whose tokens a model may see: utterances, speakers, template words, adverbs."""
    texts = []
    for corpus in corpora:
        for conv in corpus:
            for u in conv.utterances:
                texts.append(u.text)
                texts.append(u.speaker.name)
    texts.append("says: feels")
    for scheme in schemes:
        for adv in scheme.adverbs:
            texts.append(f"{adv} {adv}.")
    return texts


def vocab_for(corpora: Sequence[Corpus], label_set: LabelSet | None = None) -> Vocab:
    """Vocabulary over the corpora plus every adverb of every coarsening of ``label_set``."""
    schemes = []
    ls = label_set or corpora[0].label_set
    schemes.append(full_scheme(ls))
    for name in ("binary", "ternary"):
        try:
            schemes.append(coarsen(ls, name))
        except ValueError:
            pass
    return build_vocab(template_texts(corpora, schemes))


def make_bundle(vocab: Vocab, scheme: CoarseningScheme, build_config: BuildConfig,
                encoder_config: EncoderConfig | None = None,
                train_config: TrainConfig | None = None) -> ModelBundle:
    tc = train_config or TrainConfig()
    ec = encoder_config or EncoderConfig()
    ec = EncoderConfig(**{**ec.to_dict(), "vocab_size": len(vocab),
                          "frozen_prefix": tc.frozen_prefix,
                          "freeze_embeddings": tc.freeze_embeddings})
    if build_config.token_budget > ec.max_len:
        build_config = replace(build_config, token_budget=ec.max_len)
    enc = Encoder(ec, seed=tc.seed)
    head = Head(HeadConfig(ec.model_dim, len(scheme), tc.pooling, tc.mlp_depth, tc.dropout),
                seed=tc.seed + 1)
    return ModelBundle(enc, head, vocab, build_config, scheme, tc)


# -- examples ----------------------------------------------------------------

@dataclass
class Example:
    ids: np.ndarray
    spans: np.ndarray
    target: int | None
    key: tuple[str, int]


def encode_text(bundle: ModelBundle, st: SuggestiveText) -> tuple[np.ndarray, np.ndarray]:
    ids, _ = tokenize(st.rendered, bundle.vocab, bundle.encoder.config.max_len)
    return ids, np.array(st.spans, dtype=np.int64)


def prepare(bundle: ModelBundle, corpus: Corpus, knowledge: KnowledgeMap | None = None,
            with_targets: bool = True) -> list[Example]:
    cfg = bundle.build_config
    if cfg.with_knowledge and knowledge is None:
        raise TrainingError("bundle expects knowledge but none was given")
    if knowledge is not None and cfg.with_knowledge:
        unknown = [a for a in knowledge.scheme.adverbs if a not in bundle.vocab.index]
        if unknown:
            raise TrainingError(f"knowledge scheme adverbs missing from the vocabulary: {unknown}")
    out = []
    for conv, i in corpus.items():
        st = build(conv, i, cfg, knowledge)
        ids, spans = encode_text(bundle, st)
        target = None
        if with_targets:
            gold = conv[i].gold_label
            if gold is None:
                raise TrainingError(f"{conv.id}:{i} has no gold label")
            if gold >= len(bundle.scheme.mapping):
                raise TrainingError("corpus labels do not match the bundle scheme")
            target = bundle.scheme.mapping[gold]
        out.append(Example(ids, spans, target, (conv.id, i)))
    return out


def _batch_arrays(examples: list[Example], pad_id: int):
    ids, lengths = pad_batch([e.ids for e in examples], pad_id)
    spans = np.stack([e.spans for e in examples])
    return ids, lengths, spans


def forward_batch(bundle: ModelBundle, examples: list[Example], train_mode=False, rng=None):
    ids, lengths, spans = _batch_arrays(examples, bundle.vocab.pad_id)
    feats, enc_cache = bundle.encoder.forward(ids, lengths)
    x = bundle.head.gather(feats, spans)
    logits, head_cache = bundle.head.forward(x, train_mode, rng)
    return logits, (enc_cache, head_cache, spans, ids.shape[1])


def loss_and_grads(bundle: ModelBundle, examples: list[Example], gamma: float,
                   train_mode=False, rng=None):
    logits, (enc_cache, head_cache, spans, t) = forward_batch(bundle, examples, train_mode, rng)
    probs = softmax(logits)
    targets = np.array([e.target for e in examples], dtype=np.int64)
    loss, dlogits = focal_loss(probs, targets, gamma)
    dx, head_grads = bundle.head.backward(dlogits, head_cache)
    dfeat = bundle.head.scatter(dx, spans, t)
    enc_grads = bundle.encoder.backward(dfeat, enc_cache)
    return loss, probs, enc_grads, head_grads


def predict_examples(bundle: ModelBundle, examples: list[Example], batch_size: int = 32
                     ) -> np.ndarray:
    """Eval-mode distributions (n, C) in example order."""
    out = []
    for start in range(0, len(examples), batch_size):
        logits, _ = forward_batch(bundle, examples[start:start + batch_size])
        out.append(softmax(logits))
    return np.concatenate(out) if out else np.zeros((0, len(bundle.scheme)))


# -- training ----------------------------------------------------------------

@dataclass
class EpochLog:
    epoch: int
    loss: float
    metric: float


def write_log_csv(log: list[EpochLog], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss", "metric"])
        for row in log:
            w.writerow([row.epoch, repr(row.loss), repr(row.metric)])


def train(bundle: ModelBundle, corpus: Corpus, train_cfg: TrainConfig | None = None,
          knowledge: KnowledgeMap | None = None) -> tuple[ModelBundle, list[EpochLog]]:
    """Train a copy of ``bundle``; the input bundle is left untouched.

    Utterances are shuffled globally each epoch. The per-epoch metric is the
    weighted F1 of the train-mode predictions seen during that epoch.
    """
    tc = train_cfg or bundle.train_config
    bundle = bundle.copy()
    bundle.train_config = tc
    if len(corpus.label_set) != len(bundle.scheme.mapping):
        raise TrainingError("corpus label set does not match the bundle scheme")
    examples = prepare(bundle, corpus, knowledge)
    rng = np.random.default_rng(tc.seed)
    enc_state, head_state = AdamState(), AdamState()
    enc, head = bundle.encoder, bundle.head
    n_classes = len(bundle.scheme)
    log = []
    for epoch in range(1, tc.epochs + 1):
        order = rng.permutation(len(examples))
        losses, preds, golds = [], [], []
        for start in range(0, len(order), tc.batch_size):
            batch = [examples[k] for k in order[start:start + tc.batch_size]]
            loss, probs, enc_grads, head_grads = loss_and_grads(
                bundle, batch, tc.focal_gamma, train_mode=True, rng=rng)
            adam_step(enc.params, enc_grads, enc_state, tc.learning_rate,
                      tc.betas, tc.adam_eps, enc.frozen)
            adam_step(head.params, head_grads, head_state, tc.learning_rate,
                      tc.betas, tc.adam_eps)
            losses.append(loss * len(batch))
            preds.extend(np.argmax(probs, axis=1).tolist())
            golds.extend(e.target for e in batch)
        entry = EpochLog(epoch, float(sum(losses) / len(examples)),
                         weighted_f1(preds, golds, n_classes))
        logger.info("epoch %d loss %.4f train wF1 %.4f", entry.epoch, entry.loss, entry.metric)
        log.append(entry)
    return bundle, log


def predict(bundle: ModelBundle, conv: Conversation, i: int,
            knowledge: KnowledgeMap | None = None) -> Prediction:
    st = build(conv, i, bundle.build_config, knowledge)
    ids, spans = encode_text(bundle, st)
    dist = predict_examples(bundle, [Example(ids, spans, None, (conv.id, i))])[0]
    return Prediction.from_distribution(dist)


def predict_corpus(bundle: ModelBundle, corpus: Corpus,
                   knowledge: KnowledgeMap | None = None) -> list[Prediction]:
    examples = prepare(bundle, corpus, knowledge, with_targets=False)
    return [Prediction.from_distribution(d) for d in predict_examples(bundle, examples)]


def evaluate_bundle(bundle: ModelBundle, corpus: Corpus,
                    knowledge: KnowledgeMap | None = None) -> tuple[EvalReport, list[Prediction]]:
    """Evaluate over the bundle's own label scheme."""
    preds = predict_corpus(bundle, corpus, knowledge)
    target = corpus if bundle.scheme.name == "full" else relabel(corpus, bundle.scheme)
    return evaluate([p.label for p in preds], target), preds


# -- knowledge ----------------------------------------------------------------

def generate_knowledge(teacher: ModelBundle, corpus: Corpus,
                       scheme: CoarseningScheme | None = None, p: float | None = None
                       ) -> KnowledgeMap:
    """Teacher prediction for every utterance; screening at ``p`` happens at build time."""
    if scheme is not None and scheme.coarse_labels != teacher.scheme.coarse_labels:
        raise TrainingError(
            f"teacher predicts {teacher.scheme.name!r} labels, knowledge asks for {scheme.name!r}")
    if p is not None and not 0.0 <= p:
        raise TrainingError("threshold must be non-negative")
    preds = predict_corpus(teacher, corpus)
    keys = [(c.id, i) for c, i in corpus.items()]
    return KnowledgeMap(teacher.scheme, dict(zip(keys, preds)))


def oracle_knowledge(corpus: Corpus, scheme: CoarseningScheme) -> KnowledgeMap:
    """Gold labels projected through ``scheme`` with confidence 1."""
    n = len(scheme)
    entries = {}
    for conv, i in corpus.items():
        label = scheme.apply(conv[i].gold_label)
        dist = np.zeros(n)
        dist[label] = 1.0
        entries[(conv.id, i)] = Prediction(label, 1.0, tuple(dist))
    return KnowledgeMap(scheme, entries)


@dataclass(frozen=True)
class StageConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    build: BuildConfig = field(default_factory=BuildConfig)
    train: TrainConfig = field(default_factory=TrainConfig)


@dataclass(frozen=True)
class TwoStageConfig:
    teacher: StageConfig = field(default_factory=StageConfig)
    student: StageConfig = field(default_factory=lambda: StageConfig(
        build=BuildConfig(with_knowledge=True)))
    knowledge_scheme: str = "task_driven"
    threshold: float = 0.7

    def __post_init__(self):
        if self.knowledge_scheme not in ("task_driven", "binary", "ternary"):
            raise TrainingError("knowledge_scheme must be task_driven, binary or ternary")
        if not 0.0 <= self.threshold:
            raise TrainingError("threshold must be non-negative")


def knowledge_scheme_for(label_set: LabelSet, name: str) -> CoarseningScheme:
    return full_scheme(label_set) if name in ("task_driven", "full") else coarsen(label_set, name)


@dataclass
class TwoStageReport:
    teacher: EvalReport
    student: EvalReport
    knowledge_scheme: str
    threshold: float
    accepted_train: float
    accepted_test: float
    teacher_log: list[EpochLog]
    student_log: list[EpochLog]

    def to_dict(self) -> dict:
        return {
            "teacher": self.teacher.to_dict(),
            "student": self.student.to_dict(),
            "knowledge_scheme": self.knowledge_scheme,
            "threshold": self.threshold,
            "accepted_fraction_train": self.accepted_train,
            "accepted_fraction_test": self.accepted_test,
            "teacher_log": [asdict(e) for e in self.teacher_log],
            "student_log": [asdict(e) for e in self.student_log],
        }


def two_stage(cfg: TwoStageConfig, corpus_train: Corpus, corpus_test: Corpus,
              vocab: Vocab | None = None):
    """Train the coarse teacher, inject its screened predictions into the
    student's text, train the student; test knowledge always comes from the
    teacher, never from gold labels."""
    ls = corpus_train.label_set
    scheme = knowledge_scheme_for(ls, cfg.knowledge_scheme)
    vocab = vocab or vocab_for([corpus_train], ls)
    teacher_build = replace(cfg.teacher.build, with_knowledge=False,
                            replace_contexts_with_knowledge=False)
    teacher = make_bundle(vocab, scheme, teacher_build, cfg.teacher.encoder, cfg.teacher.train)
    teacher, teacher_log = train(teacher, corpus_train)
    teacher_report, _ = evaluate_bundle(teacher, corpus_test)

    km_train = generate_knowledge(teacher, corpus_train, scheme)
    km_test = generate_knowledge(teacher, corpus_test, scheme)
    student_build = replace(cfg.student.build, with_knowledge=True,
                            knowledge_threshold=cfg.threshold)
    student = make_bundle(vocab, full_scheme(ls), student_build, cfg.student.encoder,
                          cfg.student.train)
    student, student_log = train(student, corpus_train, knowledge=km_train)
    student_report, _ = evaluate_bundle(student, corpus_test, km_test)
    report = TwoStageReport(
        teacher_report, student_report, cfg.knowledge_scheme, cfg.threshold,
        km_train.acceptance_rate(cfg.threshold), km_test.acceptance_rate(cfg.threshold),
        teacher_log, student_log,
    )
    return teacher, student, report
