import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from erckit.encoder import (
    RESERVED,
    Encoder,
    EncoderConfig,
    EncoderError,
    Vocab,
    build_vocab,
    encode,
    freeze_prefix,
    pad_batch,
    tokenize,
)

SMALL = EncoderConfig(n_layers=2, model_dim=16, n_heads=4, ff_dim=24, max_len=32, vocab_size=30)


def param_count_oracle(c: EncoderConfig) -> int:
    d, f = c.model_dim, c.ff_dim
    per_layer = 2 * d + 4 * (d * d + d) + 2 * d + d * f + f + f * d + d
    return c.vocab_size * d + c.max_len * d + c.n_layers * per_layer + 2 * d


def test_vocab_reserved_ids():
    v = build_vocab(["b a a", "c"])
    assert tuple(v.tokens[:5]) == RESERVED
    assert v.tokens[5:] == ["a", "b", "c"]
    assert v.id("zzz") == v.unk_id == 1 and v.pad_id == 0


def test_vocab_round_trip(tmp_path):
    v = build_vocab(["x y z", "says: <mask>"])
    v.write(tmp_path / "v.txt")
    assert Vocab.read(tmp_path / "v.txt") == v


def test_tokenize_ids_and_offsets():
    v = build_vocab(["B says: Hello"])
    ids, offs = tokenize("<s>B <mask> says: Hello</s>", v)
    assert [v.tokens[i] for i in ids] == ["<s>", "B", "<mask>", "says:", "Hello", "</s>"]
    assert offs[0] == (0, 3) and offs[-1] == (23, 27)
    with pytest.raises(EncoderError):
        tokenize("a b c", v, max_len=2)


def test_output_shape_and_determinism():
    enc = Encoder(SMALL, seed=4)
    ids = np.arange(7) + 5
    out = encode(enc, ids)
    assert out.shape == (7, 16)
    np.testing.assert_array_equal(out, Encoder(SMALL, seed=4).encode(ids))
    assert encode(enc, []).shape == (0, 16)


def test_too_long_rejected():
    with pytest.raises(EncoderError):
        Encoder(SMALL).encode(np.zeros(33, dtype=int))


def test_position_sensitive():
    enc = Encoder(SMALL, seed=0)
    a = enc.encode(np.array([5, 6, 7]))
    b = enc.encode(np.array([7, 6, 5]))
    assert not np.allclose(a[[2, 1, 0]], b)


def test_permutation_equivariant_without_positions(rng):
    enc = Encoder(SMALL, seed=0)
    enc.params["pos_emb"][:] = 0
    ids = rng.integers(5, 30, size=9)
    perm = rng.permutation(9)
    np.testing.assert_allclose(enc.encode(ids)[perm], enc.encode(ids[perm]), atol=1e-12)


def test_padding_does_not_leak(rng):
    enc = Encoder(SMALL, seed=1)
    seqs = [rng.integers(5, 30, size=n) for n in (3, 8, 5)]
    ids, lengths = pad_batch(seqs)
    feats, _ = enc.forward(ids, lengths)
    for k, s in enumerate(seqs):
        np.testing.assert_allclose(feats[k, : len(s)], enc.encode(s), atol=1e-12)


@pytest.mark.parametrize("cfg", [SMALL, EncoderConfig(n_layers=3, model_dim=8, n_heads=2, ff_dim=5,
                                                      max_len=11, vocab_size=7)])
def test_parameter_count(cfg):
    assert Encoder(cfg).n_parameters() == param_count_oracle(cfg)


def test_freezing_monotone():
    counts = []
    for n in range(SMALL.n_layers + 1):
        counts.append(freeze_prefix(Encoder(SMALL), n).n_trainable())
    assert all(a > b for a, b in zip(counts, counts[1:]))
    full = freeze_prefix(Encoder(SMALL), SMALL.n_layers, freeze_embeddings=True)
    assert full.n_trainable() == 0
    assert freeze_prefix(Encoder(SMALL), 0, True).n_trainable() < counts[0]
    with pytest.raises(EncoderError):
        freeze_prefix(Encoder(SMALL), 3)


def _loss(enc, ids, lengths, w):
    feats, cache = enc.forward(ids, lengths)
    mask = (np.arange(ids.shape[1])[None] < lengths[:, None])[..., None]
    return float((feats * w * mask).sum()), cache, w * mask


def test_backward_matches_finite_differences(rng):
    enc = Encoder(SMALL, seed=2)
    ids, lengths = pad_batch([rng.integers(2, 30, size=n) for n in (6, 4)])
    w = rng.normal(size=(2, ids.shape[1], 16))
    _, cache, dout = _loss(enc, ids, lengths, w)
    grads = enc.backward(dout, cache)
    assert set(grads) == set(enc.params)
    names = sorted(enc.params)
    h = 1e-5
    worst = 0.0
    for _ in range(100):
        name = names[rng.integers(len(names))]
        p = enc.params[name]
        if name == "tok_emb":
            idx = (int(ids[0, rng.integers(6)]), int(rng.integers(16)))
        elif name == "pos_emb":
            idx = (int(rng.integers(6)), int(rng.integers(16)))
        else:
            idx = tuple(int(rng.integers(s)) for s in p.shape)
        old = p[idx]
        p[idx] = old + h
        up = _loss(enc, ids, lengths, w)[0]
        p[idx] = old - h
        down = _loss(enc, ids, lengths, w)[0]
        p[idx] = old
        fd = (up - down) / (2 * h)
        err = abs(fd - grads[name][idx]) / max(1.0, abs(fd))
        worst = max(worst, err)
    assert worst < 1e-6


def test_frozen_layers_get_no_gradient(rng):
    enc = freeze_prefix(Encoder(SMALL, seed=3), 1, freeze_embeddings=True)
    ids, lengths = pad_batch([rng.integers(5, 30, size=5)])
    feats, cache = enc.forward(ids, lengths)
    grads = enc.backward(np.ones_like(feats), cache)
    assert set(grads) == set(enc.params) - enc.frozen
    assert not any(k.startswith("L0.") for k in grads)
    assert "lnf_g" in grads


def test_partial_freeze_gradients_unchanged(rng):
    """Freezing lower layers must not alter the gradients of the upper ones."""
    ids, lengths = pad_batch([rng.integers(5, 30, size=5)])
    full = Encoder(SMALL, seed=3)
    part = freeze_prefix(Encoder(SMALL, seed=3), 1, freeze_embeddings=True)
    g_full = full.backward(np.ones((1, 5, 16)), full.forward(ids, lengths)[1])
    g_part = part.backward(np.ones((1, 5, 16)), part.forward(ids, lengths)[1])
    for k, v in g_part.items():
        np.testing.assert_allclose(v, g_full[k], atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(0, 29), min_size=1, max_size=32))
def test_features_finite_and_normalized(ids):
    out = Encoder(SMALL, seed=0).encode(np.array(ids))
    assert np.isfinite(out).all()
    # final LayerNorm with unit gain and zero bias
    np.testing.assert_allclose(out.mean(axis=1), 0, atol=1e-9)


def test_vocab_examples():
    texts = ["x y y", "rare y"]
    assert build_vocab(texts) == build_vocab(list(texts))
    v = build_vocab(texts, min_count=2)
    assert "rare" not in v.index and v.id("rare") == v.unk_id
    assert "<mask>" in v.index
    ids, offs = tokenize("", v)
    assert ids.size == 0 and offs == []
    ids, _ = tokenize("Hello<mask>", build_vocab(["Hello"]))
    assert ids.tolist() == [build_vocab(["Hello"]).id("Hello"), RESERVED.index("<mask>")]


def test_full_freeze_trains_nothing_in_encoder():
    enc = freeze_prefix(Encoder(SMALL), SMALL.n_layers, freeze_embeddings=True)
    assert enc.n_trainable() == 0
    assert freeze_prefix(Encoder(SMALL), 0).n_trainable() == enc.n_parameters()
