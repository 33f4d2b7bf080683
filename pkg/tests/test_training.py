import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from erckit.dialogue import (
    Prediction,
    SynthSpec,
    coarsen,
    full_scheme,
    synth_corpus,
)
from erckit.encoder import EncoderConfig
from erckit.head import softmax
from erckit.text import BuildConfig, KnowledgeMap
from erckit.training import (
    AdamState,
    ModelBundle,
    StageConfig,
    TrainConfig,
    TrainingError,
    TwoStageConfig,
    adam_step,
    evaluate_bundle,
    focal_loss,
    generate_knowledge,
    make_bundle,
    oracle_knowledge,
    predict_corpus,
    train,
    two_stage,
    vocab_for,
)

TINY = EncoderConfig(n_layers=1, model_dim=16, n_heads=2, ff_dim=16, max_len=96)
LABELS = ("neutral", "happiness", "sadness", "anger")


@pytest.fixture(scope="module")
def separable():
    spec = SynthSpec(n_conversations=60, min_turns=4, max_turns=6, labels=LABELS, signal=1.0,
                     persistence=1.0)
    return synth_corpus(spec, seed=11)


@pytest.fixture(scope="module")
def vocab(separable):
    return vocab_for([separable])


def bundle(vocab, corpus, build=None, **tc):
    cfg = TrainConfig(**{"epochs": 2, "batch_size": 8, "learning_rate": 3e-3, **tc})
    return make_bundle(vocab, full_scheme(corpus.label_set),
                       build or BuildConfig(window=2, token_budget=96), TINY, cfg)


# -- focal loss ---------------------------------------------------------------

def test_focal_loss_uniform_gamma_zero():
    loss, _ = focal_loss(np.full(4, 0.25), 0, gamma=0.0)
    assert loss == pytest.approx(math.log(4), abs=1e-12)


def test_focal_loss_hand_value():
    loss, _ = focal_loss(np.array([0.9, 0.1]), 0, gamma=2.0)
    assert loss == pytest.approx(0.01 * -math.log(0.9), rel=1e-12)
    assert loss == pytest.approx(1.0536e-3, abs=1e-7)


def test_focal_loss_certain_prediction():
    loss, grad = focal_loss(np.array([1.0, 0.0, 0.0]), 0, gamma=2.0)
    assert loss == 0.0 and np.all(grad == 0)
    loss, grad = focal_loss(np.array([1.0, 0.0]), 0, gamma=0.5)
    assert loss == 0.0 and np.isfinite(grad).all()


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=6), st.data())
def test_gamma_zero_is_cross_entropy(logits, data):
    z = np.array(logits)
    p = softmax(z)
    t = data.draw(st.integers(0, len(z) - 1))
    loss, grad = focal_loss(p, t, gamma=0.0)
    assert loss == pytest.approx(-np.log(max(p[t], 1e-12)), abs=1e-12)
    onehot = np.eye(len(z))[t]
    np.testing.assert_allclose(grad, p - onehot, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-4, 4), min_size=2, max_size=5), st.floats(0, 4), st.data())
def test_focal_gradient_matches_finite_difference(logits, gamma, data):
    z = np.array(logits)
    t = data.draw(st.integers(0, len(z) - 1))
    _, grad = focal_loss(softmax(z), t, gamma)
    h = 1e-6
    for k in range(len(z)):
        e = np.eye(len(z))[k] * h
        fd = (focal_loss(softmax(z + e), t, gamma)[0] - focal_loss(softmax(z - e), t, gamma)[0]) / (2 * h)
        assert grad[k] == pytest.approx(fd, abs=1e-6)


@settings(max_examples=60, deadline=None)
@given(st.floats(0.01, 0.99), st.floats(0, 5))
def test_focal_at_most_cross_entropy(pt, gamma):
    dist = np.array([pt, 1 - pt])
    assert focal_loss(dist, 0, gamma)[0] <= focal_loss(dist, 0, 0.0)[0] + 1e-15


def test_focal_batch_is_mean():
    d = np.array([[0.7, 0.3], [0.2, 0.8]])
    loss, grad = focal_loss(d, [0, 0])
    a, ga = focal_loss(d[0], 0)
    b, gb = focal_loss(d[1], 0)
    assert loss == pytest.approx((a + b) / 2)
    np.testing.assert_allclose(grad, np.stack([ga, gb]) / 2)


def test_focal_rejects_bad_target():
    with pytest.raises(TrainingError):
        focal_loss(np.array([0.5, 0.5]), 2)


# -- Adam -----------------------------------------------------------------------

def test_adam_first_step_moves_by_lr():
    params = {"w": np.array([1.0, -2.0, 0.0])}
    adam_step(params, {"w": np.array([0.5, -3.0, 0.0])}, AdamState(), lr=0.1)
    np.testing.assert_allclose(params["w"], [0.9, -1.9, 0.0], atol=1e-7)


def test_adam_reference_sequence():
    params = {"w": np.array([0.3])}
    state = AdamState()
    m = v = 0.0
    x = 0.3
    for t in range(1, 6):
        g = 2 * x
        adam_step(params, {"w": np.array([2 * params["w"][0]])}, state, lr=0.01)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        x -= 0.01 * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        assert params["w"][0] == pytest.approx(x, abs=1e-14)


def test_adam_skips_frozen():
    params = {"a": np.ones(2), "b": np.ones(2)}
    adam_step(params, {"a": np.ones(2), "b": np.ones(2)}, AdamState(), 0.1, frozen={"a"})
    assert np.all(params["a"] == 1) and np.all(params["b"] < 1)


# -- training -------------------------------------------------------------------

def test_training_deterministic(separable, vocab):
    b = bundle(vocab, separable)
    m1, log1 = train(b, separable)
    m2, log2 = train(b, separable)
    assert log1 == log2
    for k, v in m1.encoder.params.items():
        np.testing.assert_array_equal(v, m2.encoder.params[k])


def test_zero_epochs_returns_initial(separable, vocab):
    b = bundle(vocab, separable, epochs=0)
    m, log = train(b, separable)
    assert log == []
    for k, v in b.head.params.items():
        np.testing.assert_array_equal(v, m.head.params[k])


def test_input_bundle_not_mutated(separable, vocab):
    b = bundle(vocab, separable)
    before = {k: v.copy() for k, v in b.encoder.params.items()}
    train(b, separable)
    for k, v in before.items():
        np.testing.assert_array_equal(v, b.encoder.params[k])


def test_separable_corpus_has_bag_of_words_signal(separable):
    from sklearn.feature_extraction.text import CountVectorizer
    from sklearn.linear_model import LogisticRegression
    texts = [conv[i].text for conv, i in separable.items()]
    golds = separable.golds()
    x = CountVectorizer(token_pattern=r"\S+").fit_transform(texts)
    clf = LogisticRegression(max_iter=1000).fit(x, golds)
    assert clf.score(x, golds) == 1.0


def test_learns_separable_corpus(separable, vocab):
    b = bundle(vocab, separable, epochs=10)
    m, log = train(b, separable)
    report, _ = evaluate_bundle(m, separable)
    assert report.weighted_f1 >= 0.95
    losses = [e.loss for e in log]
    for prev, cur in zip(losses[1:], losses[2:]):
        assert cur <= prev * 1.05


def test_frozen_tensors_bitwise_unchanged(separable, vocab):
    b = bundle(vocab, separable, frozen_prefix=1, freeze_embeddings=True, epochs=1)
    assert b.encoder.frozen
    m, _ = train(b, separable)
    for name in b.encoder.frozen:
        assert np.array_equal(b.encoder.params[name], m.encoder.params[name])
    assert not np.array_equal(b.head.params["fc_w"], m.head.params["fc_w"])


def test_checkpoint_round_trip(tmp_path, separable, vocab):
    m, _ = train(bundle(vocab, separable, epochs=1), separable)
    m.save(tmp_path / "m.npz")
    again = ModelBundle.load(tmp_path / "m.npz")
    assert again.vocab == m.vocab and again.build_config == m.build_config
    assert again.train_config == m.train_config and again.scheme == m.scheme
    a = [p.distribution for p in predict_corpus(m, separable)]
    b = [p.distribution for p in predict_corpus(again, separable)]
    assert a == b


# -- knowledge -----------------------------------------------------------------

def test_generate_knowledge_total(separable, vocab):
    teacher = bundle(vocab, separable, epochs=0)
    km = generate_knowledge(teacher, separable)
    assert set(km.entries) == {(c.id, i) for c, i in separable.items()}
    assert all(0 <= p.confidence <= 1 for p in km.entries.values())


def test_generate_knowledge_scheme_mismatch(separable, vocab):
    teacher = bundle(vocab, separable, epochs=0)
    with pytest.raises(TrainingError):
        generate_knowledge(teacher, separable, coarsen(separable.label_set, "binary"))


def test_oracle_knowledge_matches_gold(separable):
    scheme = coarsen(separable.label_set, "ternary")
    km = oracle_knowledge(separable, scheme)
    for conv, i in separable.items():
        pred = km.get(conv.id, i)
        assert pred.label == scheme.apply(conv[i].gold_label) and pred.confidence == 1.0


def test_threshold_above_one_equals_no_knowledge(separable, vocab):
    """With p > 1 nothing passes screening, so the text and model equal the plain ones."""
    build_plain = BuildConfig(window=2, token_budget=96)
    build_k = replace(build_plain, with_knowledge=True, knowledge_threshold=1.01)
    km = oracle_knowledge(separable, full_scheme(separable.label_set))
    plain, _ = train(bundle(vocab, separable, build_plain), separable)
    with_k, _ = train(bundle(vocab, separable, build_k), separable, knowledge=km)
    for k, v in plain.encoder.params.items():
        np.testing.assert_array_equal(v, with_k.encoder.params[k])


def test_two_stage_report(separable, vocab):
    tc = TrainConfig(epochs=1, learning_rate=3e-3)
    stage = StageConfig(TINY, BuildConfig(window=2, token_budget=96), tc)
    cfg = TwoStageConfig(stage, stage, knowledge_scheme="binary", threshold=0.5)
    teacher, student, report = two_stage(cfg, separable, separable, vocab)
    d = report.to_dict()
    assert teacher.scheme.coarse_labels == ("neutral", "emotional")
    assert student.scheme.coarse_labels == separable.label_set.labels
    assert student.build_config.with_knowledge and student.build_config.knowledge_threshold == 0.5
    assert d["accepted_fraction_train"] == 1.0  # binary max prob is always >= 0.5
    assert len(d["teacher_log"]) == len(d["student_log"]) == 1
    assert 0 <= d["student"]["weighted_f1"] <= 1


def test_missing_knowledge_rejected(separable, vocab):
    b = bundle(vocab, separable, BuildConfig(window=2, token_budget=96, with_knowledge=True))
    with pytest.raises(TrainingError):
        train(b, separable)


def test_two_stage_bad_scheme():
    with pytest.raises(TrainingError):
        TwoStageConfig(knowledge_scheme="quaternary")


def test_knowledge_map_rejects_bad_confidence(separable):
    with pytest.raises(ValueError):
        KnowledgeMap(full_scheme(separable.label_set), {("a", 1): Prediction(0, 1.5, (1.0, 0.0))})


def test_adam_zero_gradient_keeps_params_and_decays_moments():
    params = {"w": np.array([1.0, 2.0])}
    state = AdamState()
    adam_step(params, {"w": np.array([1.0, -1.0])}, state, lr=0.1)
    after_one = params["w"].copy()
    m1 = state.m["w"].copy()
    zero = {"w": np.zeros(2)}
    fresh = {"w": np.array([1.0, 2.0])}
    adam_step(fresh, zero, AdamState(), lr=0.1)
    np.testing.assert_array_equal(fresh["w"], [1.0, 2.0])
    adam_step(params, zero, state, lr=0.1)
    np.testing.assert_allclose(state.m["w"], 0.9 * m1)
    assert not np.array_equal(params["w"], after_one)  # stale momentum still moves


def test_full_pipeline_gradient(separable, vocab):
    """Loss through head, pooling and the whole encoder against central differences."""
    from erckit.training import loss_and_grads, prepare
    b = make_bundle(vocab, full_scheme(separable.label_set), BuildConfig(window=2, token_budget=96),
                    EncoderConfig(n_layers=2, model_dim=16, n_heads=4, ff_dim=32, max_len=96),
                    TrainConfig(mlp_depth=2, dropout=0.0))
    examples = prepare(b, separable)[:3]
    _, _, enc_g, head_g = loss_and_grads(b, examples, 2.0)
    rng = np.random.default_rng(0)
    top = [k for k in b.encoder.params if k.startswith("L1.") or k.startswith("lnf")]
    h = 1e-5
    worst = 0.0
    for _ in range(100):
        if rng.random() < 0.5:
            name = top[rng.integers(len(top))]
            store, grads = b.encoder.params, enc_g
        else:
            name = sorted(b.head.params)[rng.integers(len(b.head.params))]
            store, grads = b.head.params, head_g
        idx = tuple(int(rng.integers(s)) for s in store[name].shape)
        old = store[name][idx]
        store[name][idx] = old + h
        up = loss_and_grads(b, examples, 2.0)[0]
        store[name][idx] = old - h
        down = loss_and_grads(b, examples, 2.0)[0]
        store[name][idx] = old
        fd = (up - down) / (2 * h)
        worst = max(worst, abs(fd - grads[name][idx]) / max(abs(fd), 1e-6))
    assert worst <= 1e-4


def test_predict_consistent(separable, vocab):
    from erckit.training import predict
    m, _ = train(bundle(vocab, separable, epochs=1), separable)
    conv = separable.conversations[0]
    a, b = predict(m, conv, 2), predict(m, conv, 2)
    assert a == b
    assert sum(a.distribution) == pytest.approx(1.0, abs=1e-12)
    assert a.confidence == max(a.distribution) and a.distribution[a.label] == a.confidence


def test_trained_teacher_screening_monotone(separable, vocab):
    from erckit.text import build
    teacher, _ = train(bundle(vocab, separable, epochs=3), separable)
    km = generate_knowledge(teacher, separable)

    def injected(p):
        cfg = BuildConfig(window=2, token_budget=96, with_knowledge=True, knowledge_threshold=p)
        adverbs = set(km.scheme.adverbs)
        total = 0
        for conv, i in separable.items():
            s = build(conv, i, cfg, km)
            total += sum(1 for _, text in s.past_pieces + s.future_pieces
                         if text.split()[1] in adverbs)
        return total

    assert injected(0.9) <= injected(0.7)
    assert injected(0.0) > 0 and injected(1.01) == 0
