"""Compare the compiled kernels against the numpy fallback.

Run with ``python3 benchmarks/bench_kernels.py [--repeat N]``. Each row is the
best-of-N time per call for both backends and their ratio.
"""

from __future__ import annotations

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from erckit import _kernels_py as fallback

try:
    from erckit import _kernels as compiled
except ImportError:  # extension not built
    compiled = None


def cases(rng):
    x = rng.normal(size=(2048, 64))
    g, b = rng.normal(size=64), rng.normal(size=64)
    y, xhat, rstd = fallback.layer_norm_forward(x, g, b, 1e-5)
    scores = rng.normal(size=(8, 4, 96, 96))
    lengths = rng.integers(40, 97, size=8)
    probs = fallback.masked_softmax_forward(scores, lengths)
    u = rng.normal(size=(2048, 128))
    feats = rng.normal(size=(32, 96, 64))
    spans = np.array([[[0, 30], [30, 50], [50, 96]]] * 32)
    pooled = rng.normal(size=(32, 3, 64))
    return {
        "layer_norm_forward": lambda k: k.layer_norm_forward(x, g, b, 1e-5),
        "layer_norm_backward": lambda k: k.layer_norm_backward(y, xhat, rstd, g),
        "masked_softmax_forward": lambda k: k.masked_softmax_forward(scores, lengths),
        "softmax_backward": lambda k: k.softmax_backward(scores, probs),
        "gelu_forward": lambda k: k.gelu_forward(u),
        "gelu_backward": lambda k: k.gelu_backward(u, u),
        "segment_mean_forward": lambda k: k.segment_mean_forward(feats, spans),
        "segment_mean_backward": lambda k: k.segment_mean_backward(pooled, spans, 96),
    }


def best(fn, repeat: int) -> float:
    number = 5
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


EPOCH_SCRIPT = """
import time
from erckit import kernels
from erckit.dialogue import SynthSpec, full_scheme, synth_corpus
from erckit.encoder import EncoderConfig
from erckit.text import BuildConfig
from erckit.training import TrainConfig, make_bundle, train, vocab_for
c = synth_corpus(SynthSpec(n_conversations=40, min_turns=8, max_turns=12), 0)
b = make_bundle(vocab_for([c]), full_scheme(c.label_set), BuildConfig(window=8),
                EncoderConfig(n_layers=2, model_dim=32, n_heads=4, ff_dim=64), TrainConfig(epochs=1))
t = time.perf_counter()
train(b, c)
print(kernels.BACKEND, time.perf_counter() - t)
"""


def epoch_seconds(pure: bool) -> float:
    env = dict(os.environ, ERCKIT_PURE_PYTHON="1" if pure else "0")
    out = subprocess.run([sys.executable, "-c", EPOCH_SCRIPT], env=env, check=True,
                         capture_output=True, text=True).stdout.split()
    return float(out[1])


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--epoch", action="store_true", help="also time one end-to-end training epoch")
    args = ap.parse_args(argv)
    if compiled is None:
        print("compiled extension not available; build with `pip install -e . --no-build-isolation`")
        return
    rng = np.random.default_rng(0)
    print(f"{'kernel':<24} {'fallback ms':>12} {'compiled ms':>12} {'speedup':>8}")
    for name, call in cases(rng).items():
        a = best(lambda: call(fallback), args.repeat)
        c = best(lambda: call(compiled), args.repeat)
        print(f"{name:<24} {1e3 * a:>12.3f} {1e3 * c:>12.3f} {a / c:>7.2f}x")
    if args.epoch:
        a = min(epoch_seconds(True) for _ in range(2))
        c = min(epoch_seconds(False) for _ in range(2))
        print(f"{'training epoch (s)':<24} {a:>12.3f} {c:>12.3f} {a / c:>7.2f}x")


if __name__ == "__main__":
    main()
