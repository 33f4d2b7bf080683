import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from erckit.dialogue import Conversation, Prediction, builtin_label_set, full_scheme
from erckit.text import (
    MASK,
    BuildConfig,
    KnowledgeMap,
    SuggestiveText,
    TextBuildError,
    build,
    screen_knowledge,
    select_context,
    split_tokens,
    token_strings,
    truncate,
)

IEMOCAP = builtin_label_set("iemocap")
SCHEME = full_scheme(IEMOCAP)


def knowledge(entries):
    return KnowledgeMap(SCHEME, {k: Prediction(l, c, _dist(l, c)) for k, (l, c) in entries.items()})


def _dist(label, conf, n=len(IEMOCAP)):
    rest = (1 - conf) / (n - 1)
    return tuple(conf if j == label else rest for j in range(n))


def test_msa_offline_text(three_turns):
    st_ = build(three_turns, 2, BuildConfig(mode="MSA", window=8))
    assert st_.rendered == "A says: Hi <s>B <mask> says: Hello</s> A says: How are you"
    assert st_.past_indices == (1,) and st_.future_indices == (3,)


def test_msa_online_drops_future(three_turns):
    st_ = build(three_turns, 2, BuildConfig(window=8, online=True))
    assert st_.rendered == "A says: Hi <s>B <mask> says: Hello</s>"


def test_ssa_keeps_same_speaker(three_turns):
    st_ = build(three_turns, 3, BuildConfig(mode="SSA", window=8))
    assert st_.rendered == "A says: Hi <s>A <mask> says: How are you</s>"


def test_knowledge_adverb(three_turns):
    km = knowledge({("c1", 1): (IEMOCAP.index("anger"), 0.9)})
    st_ = build(three_turns, 2, BuildConfig(window=8, with_knowledge=True, knowledge_threshold=0.7), km)
    assert st_.rendered.startswith("A angrily says: Hi <s>B <mask> says: Hello</s>")


def test_ssa_k_feels_sentences(three_turns):
    km = knowledge({("c1", 1): (IEMOCAP.index("happiness"), 0.9)})
    cfg = BuildConfig(mode="SSA", window=8, with_knowledge=True, knowledge_threshold=0.5,
                      replace_contexts_with_knowledge=True)
    assert build(three_turns, 3, cfg, km).rendered == "A feels happily. <s>A <mask> says: How are you</s>"


def test_screening_boundary():
    pred = Prediction(3, 0.7, _dist(3, 0.7))
    assert screen_knowledge(pred, 0.7) == 3
    assert screen_knowledge(Prediction(3, 0.6999, _dist(3, 0.6999)), 0.7) is None
    assert screen_knowledge(pred, 0.0) == 3
    assert screen_knowledge(Prediction(3, 1.0, _dist(3, 1.0)), 1.01) is None
    assert screen_knowledge(None, 0.0) is None


def test_tokenizer_splits_reserved_tokens():
    assert token_strings("<s>B <mask> says: Hello</s>") == ["<s>", "B", "<mask>", "says:", "Hello", "</s>"]
    assert split_tokens("a  bb")[1] == ("bb", 3, 5)


def test_spans_and_mask(three_turns):
    st_ = build(three_turns, 2, BuildConfig(window=8))
    assert st_.past_span == (0, 3)
    assert st_.query_span == (3, 9)
    assert st_.future_span == (9, 14)
    assert st_.tokens[st_.mask_position] == MASK and st_.mask_position == 5


def test_without_mask_has_no_mask(three_turns):
    st_ = build(three_turns, 2, BuildConfig(window=8, use_mask=False))
    assert st_.mask_position is None and MASK not in st_.tokens


def test_query_overflow(three_turns):
    with pytest.raises(TextBuildError, match="query overflow"):
        build(three_turns, 3, BuildConfig(window=8, token_budget=5))


def test_bad_index(three_turns):
    with pytest.raises(TextBuildError):
        build(three_turns, 4, BuildConfig())


def test_knowledge_required_when_requested(three_turns):
    with pytest.raises(TextBuildError):
        build(three_turns, 1, BuildConfig(with_knowledge=True))


def test_knowledge_file_round_trip(tmp_path):
    km = knowledge({("c1", 1): (2, 0.8), ("c2", 4): (0, 0.55)})
    f = tmp_path / "k.jsonl"
    km.write(f)
    again = KnowledgeMap.read(f)
    assert again.entries == km.entries and again.scheme == SCHEME
    assert again.acceptance_rate(0.6) == 0.5


# -- properties --------------------------------------------------------------

words = st.text(alphabet="abcxyz!?", min_size=1, max_size=6)


@st.composite
def conversations(draw):
    n = draw(st.integers(1, 9))
    speakers = draw(st.lists(st.sampled_from(["A", "B", "Cy"]), min_size=n, max_size=n))
    texts = [" ".join(draw(st.lists(words, min_size=1, max_size=4))) for _ in range(n)]
    return Conversation.from_turns("cv", list(zip(speakers, texts)))


@st.composite
def conv_and_query(draw):
    conv = draw(conversations())
    return conv, draw(st.integers(1, len(conv)))


def configs(**fixed):
    return st.builds(BuildConfig, mode=st.sampled_from(["MSA", "SSA"]), window=st.integers(0, 10),
                     online=st.booleans(), token_budget=st.integers(12, 80)).map(
        lambda c: BuildConfig(**{**c.to_dict(), **fixed}))


@settings(max_examples=200, deadline=None)
@given(conv_and_query(), configs())
def test_grammar_and_spans(cq, cfg):
    conv, i = cq
    s = build(conv, i, cfg)
    assert s.tokens.count("<s>") == 1 and s.tokens.count("</s>") == 1
    assert s.tokens.count(MASK) == 1
    lo, hi = s.query_span
    assert s.tokens[lo] == "<s>" and s.tokens[hi - 1] == "</s>"
    assert lo < s.mask_position < hi
    assert s.past_span[1] == lo and s.future_span[0] == hi and s.future_span[1] == len(s)
    assert len(s) <= cfg.token_budget
    assert "  " not in s.rendered
    assert all(j < i for j in s.past_indices) and all(j > i for j in s.future_indices)
    assert all(abs(j - i) <= cfg.window for j in s.past_indices + s.future_indices)


@settings(max_examples=200, deadline=None)
@given(conv_and_query(), st.integers(0, 10))
def test_ssa_subset_of_msa(cq, w):
    conv, i = cq
    msa = build(conv, i, BuildConfig(mode="MSA", window=w, token_budget=10_000))
    ssa = build(conv, i, BuildConfig(mode="SSA", window=w, token_budget=10_000))
    assert set(ssa.past_indices) <= set(msa.past_indices)
    assert set(ssa.future_indices) <= set(msa.future_indices)
    spk = conv[i].speaker
    assert all(conv[j].speaker == spk for j in ssa.past_indices + ssa.future_indices)


@settings(max_examples=100, deadline=None)
@given(conv_and_query(), configs(online=True), st.text(alphabet="qrs", min_size=1, max_size=5))
def test_online_ignores_future_turns(cq, cfg, extra):
    conv, i = cq
    cut = Conversation(conv.id, conv.utterances[:i])
    changed = Conversation.from_turns(conv.id, [(u.speaker.name, u.text) for u in conv.utterances[:i]]
                                      + [("Z", extra)] * 3)
    assert build(cut, i, cfg).rendered == build(conv, i, cfg).rendered == build(changed, i, cfg).rendered


def _oracle_truncate(past, future, qlen, budget):
    """Brute-force reference: simulate dropping from lists of sizes."""
    past, future = list(past), list(future)
    turn_future = True
    while qlen + sum(past) + sum(future) > budget:
        if turn_future and future:
            future.pop()
        elif not turn_future and past:
            past.pop(0)
        turn_future = not turn_future
    return len(past), len(future)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(1, 6), max_size=6), st.lists(st.integers(1, 6), max_size=6),
       st.integers(6, 40))
def test_truncation_matches_reference(past_sizes, future_sizes, budget):
    def piece(k, n):
        return (k, " ".join(["w"] * n))
    past = tuple(piece(k, n) for k, n in enumerate(past_sizes))
    future = tuple(piece(100 + k, n) for k, n in enumerate(future_sizes))
    s = SuggestiveText(past, "<s>A <mask> says: x</s>", future, 50)
    out = truncate(s, budget)
    want = _oracle_truncate(past_sizes, future_sizes, 6, budget)
    assert (len(out.past_pieces), len(out.future_pieces)) == want
    assert out.past_pieces == past[len(past) - want[0]:]
    assert out.future_pieces == future[:want[1]]


@settings(max_examples=150, deadline=None)
@given(conv_and_query(), st.lists(st.floats(0, 1), min_size=9, max_size=9),
       st.floats(0, 1), st.floats(0, 1))
def test_screening_monotone(cq, confs, p1, p2):
    conv, i = cq
    lo, hi = sorted((p1, p2))
    km = knowledge({("cv", j + 1): (1, c) for j, c in enumerate(confs[:len(conv)])})
    def adverbed(p):
        cfg = BuildConfig(window=10, token_budget=10_000, with_knowledge=True, knowledge_threshold=p)
        s = build(conv, i, cfg, km)
        return {k for k, text in s.past_pieces + s.future_pieces if " happily says: " in text}
    assert adverbed(hi) <= adverbed(lo)


def test_select_context_window_zero(three_turns):
    assert select_context(three_turns, 2, BuildConfig(window=0)) == ([], [])


def test_query_and_context_templates():
    from erckit.dialogue import Speaker, Utterance, coarsen
    from erckit.text import emo_token, render_context, render_query
    assert render_query(Utterance(1, Speaker("Alice"), "I did well in the exam")) == \
        "<s>Alice <mask> says: I did well in the exam</s>"
    assert render_query(Utterance(1, Speaker("Dr. X"), "Hi")) == "<s>Dr. X <mask> says: Hi</s>"
    bob = Utterance(1, Speaker("Bob"), "Hello")
    assert render_context(bob) == "Bob says: Hello"
    assert render_context(bob, IEMOCAP.index("anger"), SCHEME) == "Bob angrily says: Hello"
    assert render_context(bob, IEMOCAP.index("neutral"), SCHEME) == "Bob neutrally says: Hello"
    binary, ternary = coarsen(IEMOCAP, "binary"), coarsen(IEMOCAP, "ternary")
    assert emo_token(binary.index("emotional"), binary) == "emotionally"
    assert emo_token(ternary.index("positive"), ternary) == "positively"


def test_every_builtin_label_has_an_adverb():
    from erckit.dialogue import coarsen
    for name in ("iemocap", "meld", "dailydialog", "emorynlp"):
        ls = builtin_label_set(name)
        for scheme in (full_scheme(ls), coarsen(ls, "binary"), coarsen(ls, "ternary")):
            assert len(scheme.adverbs) == len(scheme.coarse_labels)
            assert all(a.endswith("ly") for a in scheme.adverbs)


def test_window_arithmetic():
    conv = Conversation.from_turns("w", [("A", "a"), ("B", "b"), ("A", "c"), ("B", "d"), ("A", "e")])
    past, future = select_context(conv, 3, BuildConfig(window=1))
    assert [u.index for u in past] == [2] and [u.index for u in future] == [4]
    assert select_context(conv, 1, BuildConfig(window=3))[0] == []
    past, future = select_context(conv, 5, BuildConfig(mode="SSA", window=4))
    assert [u.index for u in past] == [1, 3] and future == []


def test_window_zero_and_mixed_knowledge(three_turns):
    assert build(three_turns, 2, BuildConfig(window=0)).rendered == "<s>B <mask> says: Hello</s>"
    km = knowledge({("c1", 1): (IEMOCAP.index("anger"), 0.9), ("c1", 3): (IEMOCAP.index("sadness"), 0.4)})
    cfg = BuildConfig(window=2, with_knowledge=True, knowledge_threshold=0.7)
    assert build(three_turns, 2, cfg, km).rendered == \
        "A angrily says: Hi <s>B <mask> says: Hello</s> A says: How are you"


def test_screening_examples():
    assert screen_knowledge(Prediction(1, 0.71, _dist(1, 0.71)), 0.7) == 1
    assert screen_knowledge(Prediction(1, 0.70, _dist(1, 0.70)), 0.7) == 1
    assert screen_knowledge(Prediction(1, 0.69, _dist(1, 0.69)), 0.7) is None


def test_truncation_drops_farthest_future_first(three_turns):
    conv = Conversation.from_turns("t", [("A", "p1"), ("B", "p2"), ("A", "q"), ("B", "f1"), ("A", "f2")])
    full = build(conv, 3, BuildConfig(window=2, token_budget=1000))
    cut = build(conv, 3, BuildConfig(window=2, token_budget=len(full) - 1))
    assert cut.past_indices == (1, 2) and cut.future_indices == (4,)
    assert build(conv, 3, BuildConfig(window=2, token_budget=len(full))) == full


@settings(max_examples=100, deadline=None)
@given(st.lists(words, min_size=1, max_size=8), st.integers(0, 10), st.integers(1, 8),
       st.booleans())
def test_single_speaker_ssa_equals_msa(texts, w, i, online):
    conv = Conversation.from_turns("s", [("A", t) for t in texts])
    i = min(i, len(conv))
    msa = build(conv, i, BuildConfig(mode="MSA", window=w, online=online, token_budget=10_000))
    ssa = build(conv, i, BuildConfig(mode="SSA", window=w, online=online, token_budget=10_000))
    assert msa.rendered == ssa.rendered


@settings(max_examples=100, deadline=None)
@given(conv_and_query(), st.integers(6, 30))
def test_truncation_keeps_query_and_whole_pieces(cq, budget):
    conv, i = cq
    full = build(conv, i, BuildConfig(window=10, token_budget=10_000))
    q_len = full.query_span[1] - full.query_span[0]
    if q_len > budget:
        return
    cut = truncate(full, budget)
    assert cut.query_piece == full.query_piece
    assert set(cut.past_pieces) <= set(full.past_pieces)
    assert set(cut.future_pieces) <= set(full.future_pieces)
