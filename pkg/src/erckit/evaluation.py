"""Scores used for ERC: weighted F1, micro F1 with an excluded class,
accuracy, emotion-shift splits and multi-seed stability."""

from __future__ import annotations

import csv
import io
import json
import statistics
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from erckit.dialogue import Corpus


class EvaluationError(ValueError):
    pass


def _check(preds, golds, n_classes=None):
    preds = np.asarray(preds, dtype=np.int64)
    golds = np.asarray(golds, dtype=np.int64)
    if preds.shape != golds.shape or preds.ndim != 1:
        raise EvaluationError("preds and golds must be equal-length 1-D sequences")
    if preds.size == 0:
        raise EvaluationError("empty input")
    if n_classes is not None and (
        preds.min() < 0 or golds.min() < 0 or preds.max() >= n_classes or golds.max() >= n_classes
    ):
        raise EvaluationError("label outside 0..n_classes-1")
    return preds, golds


def confusion_matrix(preds, golds, n_classes: int) -> np.ndarray:
    """Rows are gold labels, columns predictions."""
    preds, golds = _check(preds, golds, n_classes)
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (golds, preds), 1)
    return cm


def _ratio(num, den):
    return num / den if den else 0.0


def per_class_prf(preds, golds, n_classes: int):
    cm = confusion_matrix(preds, golds, n_classes)
    tp = np.diag(cm).astype(float)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    precision = np.array([_ratio(tp[c], predicted[c]) for c in range(n_classes)])
    recall = np.array([_ratio(tp[c], support[c]) for c in range(n_classes)])
    f1 = np.array([_ratio(2 * precision[c] * recall[c], precision[c] + recall[c])
                   for c in range(n_classes)])
    return precision, recall, f1, support


def weighted_f1(preds, golds, n_classes: int) -> float:
    _, _, f1, support = per_class_prf(preds, golds, n_classes)
    return float((f1 * support).sum() / support.sum())


def accuracy(preds, golds) -> float:
    preds, golds = _check(preds, golds)
    return float((preds == golds).mean())


def micro_f1_excluding(preds, golds, excluded: int) -> float:
    """Micro F1 over every class except ``excluded``.

    Predicting the excluded class on another gold is a false negative only;
    predicting another class on an excluded gold is a false positive.
    """
    preds, golds = _check(preds, golds)
    if not (golds != excluded).any():
        warnings.warn("no gold labels outside the excluded class; micro F1 defined as 0",
                      RuntimeWarning, stacklevel=2)
        return 0.0
    tp = int(((preds == golds) & (golds != excluded)).sum())
    fp = int(((preds != golds) & (preds != excluded)).sum())
    fn = int(((preds != golds) & (golds != excluded)).sum())
    return _ratio(2 * tp, 2 * tp + fp + fn)


# -- emotion shift -----------------------------------------------------------

def split_emotion_shift(corpus: Corpus):
    """Partition utterance keys ``(conv id, index)`` into shift, constant and unpaired.

    An utterance is paired with the same speaker's previous own utterance,
    wherever it sits in the conversation.
    """
    shift, constant, unpaired = [], [], []
    for conv in corpus:
        last: dict[str, int | None] = {}
        for u in conv.utterances:
            if u.gold_label is None:
                raise EvaluationError(f"{conv.id}:{u.index} has no gold label")
            key = (conv.id, u.index)
            name = u.speaker.name
            if name not in last:
                unpaired.append(key)
            elif last[name] != u.gold_label:
                shift.append(key)
            else:
                constant.append(key)
            last[name] = u.gold_label
    return shift, constant, unpaired


def _as_mapping(preds, corpus: Corpus) -> Mapping[tuple[str, int], int]:
    if isinstance(preds, Mapping):
        return preds
    keys = [(c.id, u.index) for c in corpus for u in c.utterances]
    preds = list(preds)
    if len(preds) != len(keys):
        raise EvaluationError("predictions do not cover the corpus")
    return dict(zip(keys, preds))


def es_accuracy(preds, corpus: Corpus) -> tuple[float | None, float | None]:
    """Accuracy on the shift set and on the constant set; ``None`` for an empty set."""
    pmap = _as_mapping(preds, corpus)
    gold = {(c.id, u.index): u.gold_label for c in corpus for u in c.utterances}
    shift, constant, _ = split_emotion_shift(corpus)

    def acc(keys):
        if not keys:
            return None
        return sum(pmap[k] == gold[k] for k in keys) / len(keys)

    return acc(shift), acc(constant)


# -- reports -----------------------------------------------------------------

@dataclass
class EvalReport:
    weighted_f1: float
    accuracy: float
    micro_f1_excl_neutral: float | None = None
    es_accuracy: float | None = None
    woes_accuracy: float | None = None
    labels: list[str] = field(default_factory=list)
    precision: list[float] = field(default_factory=list)
    recall: list[float] = field(default_factory=list)
    f1: list[float] = field(default_factory=list)
    support: list[int] = field(default_factory=list)
    n_shift: int = 0
    n_constant: int = 0
    n_unpaired: int = 0

    def primary(self, metric: str = "weighted_f1") -> float:
        value = getattr(self, metric)
        return float("nan") if value is None else value

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def evaluate(preds: Sequence[int], corpus: Corpus) -> EvalReport:
    """Full report for predictions aligned with ``corpus`` utterance order."""
    golds = corpus.golds()
    if any(g is None for g in golds):
        raise EvaluationError("evaluation needs gold labels everywhere")
    ls = corpus.label_set
    n = len(ls)
    precision, recall, f1, support = per_class_prf(preds, golds, n)
    micro = None
    if ls.neutral_index is not None:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            micro = micro_f1_excluding(preds, golds, ls.neutral_index)
    es, woes = es_accuracy(preds, corpus)
    shift, constant, unpaired = split_emotion_shift(corpus)
    return EvalReport(
        weighted_f1=weighted_f1(preds, golds, n),
        accuracy=accuracy(preds, golds),
        micro_f1_excl_neutral=micro,
        es_accuracy=es,
        woes_accuracy=woes,
        labels=list(ls.labels),
        precision=precision.tolist(),
        recall=recall.tolist(),
        f1=f1.tolist(),
        support=support.tolist(),
        n_shift=len(shift),
        n_constant=len(constant),
        n_unpaired=len(unpaired),
    )


def stability(run: Callable[[int], float], seeds: Iterable[int] = range(5)) -> tuple[float, float]:
    """Mean and sample standard deviation of ``run(seed)`` over the seeds."""
    values = [float(run(s)) for s in sorted(seeds)]
    if len(values) < 2:
        raise EvaluationError("stability needs at least two seeds")
    return statistics.fmean(values), statistics.stdev(values)


def results_table_csv(rows: Mapping[str, Mapping[str, float | None]], columns: Sequence[str]) -> str:
    """Model-by-dataset score table (one row per model, percentages with 2 decimals)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", *columns])
    for model, scores in rows.items():
        w.writerow([model, *(_pct(scores.get(c)) for c in columns)])
    return buf.getvalue()


def emotion_shift_table_csv(rows: Mapping[str, Mapping[str, tuple[float | None, float | None]]],
                            datasets: Sequence[str]) -> str:
    """ES / woES accuracy per dataset, one row per model."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", *(f"{d}_{k}" for d in datasets for k in ("ES", "woES"))])
    for model, by_ds in rows.items():
        cells = []
        for d in datasets:
            es, woes = by_ds.get(d, (None, None))
            cells += [_pct(es), _pct(woes)]
        w.writerow([model, *cells])
    return buf.getvalue()


def _pct(v):
    return "" if v is None else f"{100 * v:.2f}"
