"""Classification heads over encoder features.

``fcm`` pools the past, query and future token segments by their means and
classifies the concatenation; ``cls`` classifies the first token only (the
ablation baseline). Both share MLP(Dropout(Tanh(FC(x)))).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from erckit import kernels


class HeadError(ValueError):
    pass


@dataclass(frozen=True)
class HeadConfig:
    model_dim: int
    n_classes: int
    pooling: str = "fcm"
    mlp_depth: int = 1
    dropout: float = 0.1

    def __post_init__(self):
        if self.pooling not in ("fcm", "cls"):
            raise HeadError("pooling must be 'fcm' or 'cls'")
        if self.mlp_depth not in (1, 2):
            raise HeadError("mlp_depth must be 1 or 2")
        if not 0.0 <= self.dropout < 1.0:
            raise HeadError("dropout must lie in [0, 1)")
        if self.n_classes < 2:
            raise HeadError("need at least two classes")

    @property
    def in_dim(self) -> int:
        return 3 * self.model_dim if self.pooling == "fcm" else self.model_dim

    def to_dict(self) -> dict:
        return asdict(self)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def pool_segments(features: np.ndarray, spans) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Mean of each segment's rows; an empty past or future segment pools to zeros."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim == 1:
        features = features[:, None]
    spans = np.asarray(spans, dtype=np.int64).reshape(3, 2)
    n = features.shape[0]
    for lo, hi in spans:
        if not 0 <= lo <= hi <= n:
            raise HeadError(f"span ({lo}, {hi}) invalid for {n} feature rows")
    if spans[1, 1] <= spans[1, 0]:
        raise HeadError("query span is empty")
    pooled = kernels.segment_mean_forward(np.ascontiguousarray(features[None]), spans[None])[0]
    return pooled[0], pooled[1], pooled[2]


class Head:
    def __init__(self, config: HeadConfig, params: dict[str, np.ndarray] | None = None,
                 seed: int = 0):
        self.config = config
        self.params = params if params is not None else self._init(seed)

    def _init(self, seed):
        c = self.config
        rng = np.random.default_rng(seed)

        def unif(fan_in, *shape):
            bound = 1.0 / np.sqrt(fan_in)
            return rng.uniform(-bound, bound, size=shape)

        d = c.model_dim
        p = {"fc_w": unif(c.in_dim, c.in_dim, d), "fc_b": np.zeros(d)}
        if c.mlp_depth == 2:
            p["hid_w"] = unif(d, d, d)
            p["hid_b"] = np.zeros(d)
        p["out_w"] = unif(d, d, c.n_classes)
        p["out_b"] = np.zeros(c.n_classes)
        return p

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def gather(self, features: np.ndarray, spans: np.ndarray) -> np.ndarray:
        """Head input (B, in_dim) from batched features (B, T, D) and spans (B, 3, 2)."""
        if self.config.pooling == "cls":
            return np.ascontiguousarray(features[:, 0, :])
        pooled = kernels.segment_mean_forward(np.ascontiguousarray(features), spans)
        return pooled.reshape(features.shape[0], -1)

    def scatter(self, dinput: np.ndarray, spans: np.ndarray, n_tokens: int) -> np.ndarray:
        b = dinput.shape[0]
        d = self.config.model_dim
        if self.config.pooling == "cls":
            out = np.zeros((b, n_tokens, d))
            out[:, 0, :] = dinput
            return out
        return kernels.segment_mean_backward(
            np.ascontiguousarray(dinput.reshape(b, 3, d)), spans, n_tokens)

    def forward(self, x: np.ndarray, train_mode: bool = False,
                rng: np.random.Generator | None = None):
        c = self.config
        p = self.params
        if x.shape[-1] != c.in_dim:
            raise HeadError(f"head expects width {c.in_dim}, got {x.shape[-1]}")
        z = x @ p["fc_w"] + p["fc_b"]
        t = np.tanh(z)
        a = t
        keep = None
        if train_mode and c.dropout > 0:
            if rng is None:
                raise HeadError("train-mode dropout needs an rng")
            keep = (rng.random(a.shape) >= c.dropout) / (1.0 - c.dropout)
            a = a * keep
        hid = u = None
        if c.mlp_depth == 2:
            u = a @ p["hid_w"] + p["hid_b"]
            hid = kernels.gelu_forward(u)
            logits = hid @ p["out_w"] + p["out_b"]
        else:
            logits = a @ p["out_w"] + p["out_b"]
        return logits, (x, t, a, keep, u, hid)

    def backward(self, dlogits: np.ndarray, cache) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        p = self.params
        x, t, a, keep, u, hid = cache
        grads = {}
        if self.config.mlp_depth == 2:
            grads["out_w"] = hid.T @ dlogits
            grads["out_b"] = dlogits.sum(axis=0)
            du = kernels.gelu_backward(dlogits @ p["out_w"].T, u)
            grads["hid_w"] = a.T @ du
            grads["hid_b"] = du.sum(axis=0)
            da = du @ p["hid_w"].T
        else:
            grads["out_w"] = a.T @ dlogits
            grads["out_b"] = dlogits.sum(axis=0)
            da = dlogits @ p["out_w"].T
        if keep is not None:
            da = da * keep
        dz = da * (1.0 - t * t)
        grads["fc_w"] = x.T @ dz
        grads["fc_b"] = dz.sum(axis=0)
        return dz @ p["fc_w"].T, grads


def classify(head: Head, f_past, f_query, f_future, train_mode: bool = False,
             rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Logits and softmax distribution for one pooled example."""
    parts = [np.asarray(f, dtype=np.float64).reshape(-1) for f in (f_past, f_query, f_future)]
    if head.config.pooling != "fcm":
        raise HeadError("classify expects an fcm head; use classify_class_token")
    if any(f.size != head.config.model_dim for f in parts):
        raise HeadError("segment feature width does not match the head")
    logits, _ = head.forward(np.concatenate(parts)[None], train_mode, rng)
    return logits[0], softmax(logits)[0]


def classify_class_token(head: Head, features: np.ndarray, train_mode: bool = False,
                         rng: np.random.Generator | None = None) -> np.ndarray:
    if head.config.pooling != "cls":
        raise HeadError("classify_class_token expects a cls head")
    logits, _ = head.forward(np.asarray(features, dtype=np.float64)[:1], train_mode, rng)
    return logits[0]
