"""Tokenizer and a small pre-norm transformer encoder with hand-written backward.

All tensors are float64. Sequences are processed in padded batches; padded
key positions are masked out of attention and padded rows are never read by
the heads.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from erckit import kernels
from erckit.text import BOS, EOS, MASK, split_tokens

PAD, UNK = "<pad>", "<unk>"
RESERVED = (PAD, UNK, BOS, EOS, MASK)
LN_EPS = 1e-5


class EncoderError(ValueError):
    pass


class Vocab:
    def __init__(self, tokens: Iterable[str]):
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise EncoderError("vocabulary tokens must be unique")
        for i, tok in enumerate(RESERVED):
            if self.tokens[i] != tok:
                raise EncoderError(f"reserved token {tok!r} must sit at id {i}")

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.tokens == other.tokens

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def unk_id(self) -> int:
        return 1

    def id(self, token: str) -> int:
        return self.index.get(token, 1)

    def write(self, path: str | Path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def read(cls, path: str | Path) -> "Vocab":
        return cls(Path(path).read_text(encoding="utf-8").splitlines())


def build_vocab(texts: Iterable[str], min_count: int = 1) -> Vocab:
    """Reserved tokens first, then by descending count, ties broken lexicographically."""
    counts = Counter(tok for text in texts for tok, _, _ in split_tokens(text))
    for tok in RESERVED:
        counts.pop(tok, None)
    kept = sorted((t for t, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
    return Vocab(list(RESERVED) + kept)


def tokenize(text: str, vocab: Vocab, max_len: int | None = None
             ) -> tuple[np.ndarray, list[tuple[int, int]]]:
    """Token ids plus the character span of every token."""
    toks = split_tokens(text)
    if max_len is not None and len(toks) > max_len:
        raise EncoderError(f"sequence of {len(toks)} tokens exceeds max_len={max_len}")
    ids = np.array([vocab.id(t) for t, _, _ in toks], dtype=np.int64)
    return ids, [(a, b) for _, a, b in toks]


def char_span_to_tokens(offsets: list[tuple[int, int]], start: int, end: int) -> tuple[int, int]:
    """Half-open token range covering the characters ``[start, end)``."""
    inside = [k for k, (a, b) in enumerate(offsets) if a >= start and b <= end]
    if not inside:
        return (0, 0)
    return inside[0], inside[-1] + 1


@dataclass(frozen=True)
class EncoderConfig:
    n_layers: int = 4
    model_dim: int = 64
    n_heads: int = 4
    ff_dim: int = 128
    max_len: int = 256
    vocab_size: int = 0
    frozen_prefix: int = 0
    freeze_embeddings: bool = False

    def __post_init__(self):
        if self.model_dim % self.n_heads:
            raise EncoderError("model_dim must be divisible by n_heads")
        if not 0 <= self.frozen_prefix <= self.n_layers:
            raise EncoderError(f"frozen_prefix must lie in [0, {self.n_layers}]")
        if min(self.n_layers, self.model_dim, self.ff_dim, self.max_len) < 1:
            raise EncoderError("encoder sizes must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


LAYER_TENSORS = ("ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
                 "ln2_g", "ln2_b", "w1", "b1", "w2", "b2")


def _layer_of(name: str) -> int | None:
    if name.startswith("L") and "." in name:
        return int(name[1:name.index(".")])
    return None


class Encoder:
    """Parameters live in ``self.params``; ``self.frozen`` names the tensors
    that no optimizer step may touch."""

    def __init__(self, config: EncoderConfig, params: dict[str, np.ndarray] | None = None,
                 seed: int = 0):
        if config.vocab_size < len(RESERVED):
            raise EncoderError("vocab_size must cover the reserved tokens")
        self.config = config
        self.params = params if params is not None else self._init(seed)
        self.frozen: set[str] = set()
        self.freeze_prefix(config.frozen_prefix, config.freeze_embeddings)

    def _init(self, seed: int) -> dict[str, np.ndarray]:
        c = self.config
        rng = np.random.default_rng(seed)
        d, f = c.model_dim, c.ff_dim

        def unif(fan_in, *shape):
            bound = 1.0 / np.sqrt(fan_in)
            return rng.uniform(-bound, bound, size=shape)

        p = {"tok_emb": unif(d, c.vocab_size, d), "pos_emb": unif(d, c.max_len, d)}
        for l in range(c.n_layers):
            pre = f"L{l}."
            p[pre + "ln1_g"] = np.ones(d)
            p[pre + "ln1_b"] = np.zeros(d)
            for w in ("wq", "wk", "wv", "wo"):
                p[pre + w] = unif(d, d, d)
                p[pre + "b" + w[1]] = np.zeros(d)
            p[pre + "ln2_g"] = np.ones(d)
            p[pre + "ln2_b"] = np.zeros(d)
            p[pre + "w1"] = unif(d, d, f)
            p[pre + "b1"] = np.zeros(f)
            p[pre + "w2"] = unif(f, f, d)
            p[pre + "b2"] = np.zeros(d)
        p["lnf_g"] = np.ones(d)
        p["lnf_b"] = np.zeros(d)
        return p

    # -- freezing ----------------------------------------------------------

    def freeze_prefix(self, n: int, freeze_embeddings: bool) -> "Encoder":
        """Freeze layers ``0..n-1`` (and optionally the embedding tables).

        The final normalization is frozen only when every layer is.
        """
        if not 0 <= n <= self.config.n_layers:
            raise EncoderError(f"frozen prefix {n} out of range [0, {self.config.n_layers}]")
        frozen = set()
        for name in self.params:
            layer = _layer_of(name)
            if name in ("tok_emb", "pos_emb"):
                if freeze_embeddings:
                    frozen.add(name)
            elif layer is not None:
                if layer < n:
                    frozen.add(name)
            elif n == self.config.n_layers:
                frozen.add(name)
        self.frozen = frozen
        self.config = EncoderConfig(**{**self.config.to_dict(), "frozen_prefix": n,
                                       "freeze_embeddings": freeze_embeddings})
        return self

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def n_trainable(self) -> int:
        return sum(p.size for k, p in self.params.items() if k not in self.frozen)

    # -- forward / backward -------------------------------------------------

    def forward(self, ids: np.ndarray, lengths: np.ndarray):
        """``ids`` is (B, T) padded; returns features (B, T, D) and a cache."""
        c = self.config
        p = self.params
        ids = np.atleast_2d(ids)
        b, t = ids.shape
        if t > c.max_len:
            raise EncoderError(f"sequence length {t} exceeds max_len={c.max_len}")
        d, h = c.model_dim, c.n_heads
        dh = d // h
        scale = 1.0 / np.sqrt(dh)
        x = p["tok_emb"][ids] + p["pos_emb"][:t][None]
        caches = []
        for l in range(c.n_layers):
            pre = f"L{l}."
            x2 = x.reshape(b * t, d)
            h1, xhat1, rstd1 = kernels.layer_norm_forward(x2, p[pre + "ln1_g"], p[pre + "ln1_b"], LN_EPS)
            q = (h1 @ p[pre + "wq"] + p[pre + "bq"]).reshape(b, t, h, dh).transpose(0, 2, 1, 3)
            k = (h1 @ p[pre + "wk"] + p[pre + "bk"]).reshape(b, t, h, dh).transpose(0, 2, 1, 3)
            v = (h1 @ p[pre + "wv"] + p[pre + "bv"]).reshape(b, t, h, dh).transpose(0, 2, 1, 3)
            scores = np.ascontiguousarray(q @ k.transpose(0, 1, 3, 2)) * scale
            probs = kernels.masked_softmax_forward(scores, lengths)
            ctx = (probs @ v).transpose(0, 2, 1, 3).reshape(b * t, d)
            x2 = x2 + ctx @ p[pre + "wo"] + p[pre + "bo"]
            h2, xhat2, rstd2 = kernels.layer_norm_forward(x2, p[pre + "ln2_g"], p[pre + "ln2_b"], LN_EPS)
            u = h2 @ p[pre + "w1"] + p[pre + "b1"]
            g = kernels.gelu_forward(u)
            x2 = x2 + g @ p[pre + "w2"] + p[pre + "b2"]
            caches.append((h1, xhat1, rstd1, q, k, v, probs, ctx, xhat2, rstd2, h2, u, g))
            x = x2.reshape(b, t, d)
        out, xhatf, rstdf = kernels.layer_norm_forward(x.reshape(b * t, d), p["lnf_g"], p["lnf_b"], LN_EPS)
        cache = {"ids": ids, "layers": caches, "xhatf": xhatf, "rstdf": rstdf, "shape": (b, t)}
        return out.reshape(b, t, d), cache

    def _stop_layer(self) -> int:
        # Backprop below this layer is pointless when nothing there trains.
        if "tok_emb" not in self.frozen or "pos_emb" not in self.frozen:
            return 0
        return self.config.frozen_prefix

    def backward(self, dout: np.ndarray, cache) -> dict[str, np.ndarray]:
        """Gradients for every trainable tensor, given dL/d(features)."""
        c = self.config
        p = self.params
        b, t = cache["shape"]
        d, h = c.model_dim, c.n_heads
        dh = d // h
        scale = 1.0 / np.sqrt(dh)
        grads: dict[str, np.ndarray] = {}
        dx, dg, db = kernels.layer_norm_backward(
            np.ascontiguousarray(dout.reshape(b * t, d)), cache["xhatf"], cache["rstdf"], p["lnf_g"])
        if "lnf_g" not in self.frozen:
            grads["lnf_g"], grads["lnf_b"] = dg, db
        stop = self._stop_layer()
        for l in range(c.n_layers - 1, stop - 1, -1):
            pre = f"L{l}."
            train = pre + "wq" not in self.frozen
            h1, xhat1, rstd1, q, k, v, probs, ctx, xhat2, rstd2, h2, u, g = cache["layers"][l]
            # feed-forward residual
            if train:
                grads[pre + "w2"] = g.T @ dx
                grads[pre + "b2"] = dx.sum(axis=0)
            dgl = dx @ p[pre + "w2"].T
            du = kernels.gelu_backward(dgl, u)
            if train:
                grads[pre + "w1"] = h2.T @ du
                grads[pre + "b1"] = du.sum(axis=0)
            dh2 = np.ascontiguousarray(du @ p[pre + "w1"].T)
            dxl, dg2, db2 = kernels.layer_norm_backward(dh2, xhat2, rstd2, p[pre + "ln2_g"])
            if train:
                grads[pre + "ln2_g"], grads[pre + "ln2_b"] = dg2, db2
            dx = dx + dxl
            # attention residual
            if train:
                grads[pre + "wo"] = ctx.T @ dx
                grads[pre + "bo"] = dx.sum(axis=0)
            dctx = (dx @ p[pre + "wo"].T).reshape(b, t, h, dh).transpose(0, 2, 1, 3)
            dprobs = np.ascontiguousarray(dctx @ v.transpose(0, 1, 3, 2))
            dv = probs.transpose(0, 1, 3, 2) @ dctx
            dscores = kernels.softmax_backward(dprobs, probs) * scale
            dq = dscores @ k
            dk = dscores.transpose(0, 1, 3, 2) @ q
            dq, dk, dv = (a.transpose(0, 2, 1, 3).reshape(b * t, d) for a in (dq, dk, dv))
            if train:
                for name, dproj in (("q", dq), ("k", dk), ("v", dv)):
                    grads[pre + "w" + name] = h1.T @ dproj
                    grads[pre + "b" + name] = dproj.sum(axis=0)
            dh1 = np.ascontiguousarray(
                dq @ p[pre + "wq"].T + dk @ p[pre + "wk"].T + dv @ p[pre + "wv"].T)
            dxl, dg1, db1 = kernels.layer_norm_backward(dh1, xhat1, rstd1, p[pre + "ln1_g"])
            if train:
                grads[pre + "ln1_g"], grads[pre + "ln1_b"] = dg1, db1
            dx = dx + dxl
        if stop == 0:
            dx3 = dx.reshape(b, t, d)
            if "pos_emb" not in self.frozen:
                gpos = np.zeros_like(p["pos_emb"])
                gpos[:t] = dx3.sum(axis=0)
                grads["pos_emb"] = gpos
            if "tok_emb" not in self.frozen:
                gtok = np.zeros_like(p["tok_emb"])
                np.add.at(gtok, cache["ids"].reshape(-1), dx)
                grads["tok_emb"] = gtok
        return grads

    def encode(self, ids: np.ndarray) -> np.ndarray:
        """Features (l, D) for one unpadded sequence."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size == 0:
            return np.zeros((0, self.config.model_dim))
        feats, _ = self.forward(ids[None, :], np.array([ids.size]))
        return feats[0]


def encode(encoder: Encoder, ids) -> np.ndarray:
    return encoder.encode(ids)


def freeze_prefix(encoder: Encoder, n: int, freeze_embeddings: bool = False) -> Encoder:
    return encoder.freeze_prefix(n, freeze_embeddings)


def pad_batch(seqs: list[np.ndarray], pad_id: int = 0) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    out = np.full((len(seqs), int(lengths.max())), pad_id, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out, lengths
