"""Pure numpy versions of the hot kernels.

Every function here has a compiled twin in ``_kernels.pyx`` with the same
signature and semantics. Inputs are float64 and C-contiguous.
"""

import numpy as np

_GELU_C = np.sqrt(2.0 / np.pi)


def layer_norm_forward(x, gamma, beta, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, xhat, rstd[:, 0]


def layer_norm_backward(dy, xhat, rstd, gamma):
    dgamma = (dy * xhat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    dxhat = dy * gamma
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = rstd[:, None] * (dxhat - m1 - xhat * m2)
    return dx, dgamma, dbeta


def masked_softmax_forward(scores, lengths):
    # scores: (B, H, T, T); keys at positions >= lengths[b] are masked out
    t = scores.shape[-1]
    keep = np.arange(t)[None, :] < np.asarray(lengths)[:, None]
    s = np.where(keep[:, None, None, :], scores, -np.inf)
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(dprobs, probs):
    return probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))


def gelu_forward(x):
    inner = _GELU_C * (x + 0.044715 * x**3)
    return 0.5 * x * (1.0 + np.tanh(inner))


def gelu_backward(dy, x):
    inner = _GELU_C * (x + 0.044715 * x**3)
    th = np.tanh(inner)
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner)


def segment_mean_forward(features, spans):
    # features: (B, T, D); spans: (B, 3, 2) half-open ranges
    b, _, d = features.shape
    out = np.zeros((b, 3, d))
    for i in range(b):
        for s in range(3):
            lo, hi = spans[i, s]
            if hi > lo:
                out[i, s] = features[i, lo:hi].mean(axis=0)
    return out


def segment_mean_backward(dpooled, spans, n_tokens):
    b, _, d = dpooled.shape
    dfeat = np.zeros((b, n_tokens, d))
    for i in range(b):
        for s in range(3):
            lo, hi = spans[i, s]
            if hi > lo:
                dfeat[i, lo:hi] += dpooled[i, s] / (hi - lo)
    return dfeat
