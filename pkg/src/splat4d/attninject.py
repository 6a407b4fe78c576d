"""EMA attention injection on a toy spatial-attention stack.

Each timestamp carries a multi-view latent ``z*_t`` (tokens x channels).
Keys and values are formed from a blended latent ``z_t``; queries always
come from the current ``z*_t``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

VARIANTS = ("s_ema", "s_linear", "s_res", "t_ema", "none")


@dataclass
class AttentionLayer:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray

    def __post_init__(self):
        if self.w_q.shape != self.w_k.shape:
            raise ValueError("query and key projections must share a shape")
        if self.w_v.shape[0] != self.w_q.shape[0]:
            raise ValueError("value projection must read the same channel count")
        if self.key_dim < 1:
            raise ValueError("key dimension must be at least 1")
        for m in (self.w_q, self.w_k, self.w_v):
            if not np.all(np.isfinite(m)):
                raise ValueError("projection matrices must be finite")

    @property
    def key_dim(self) -> int:
        return self.w_k.shape[1]

    @classmethod
    def random(cls, channels: int = 16, key_dim: int = 16, rng=None) -> "AttentionLayer":
        rng = np.random.default_rng(rng)
        scale = 1.0 / np.sqrt(channels)
        # value projection maps back to ``channels`` so layers can be stacked
        return cls(rng.normal(0, scale, (channels, key_dim)), rng.normal(0, scale, (channels, key_dim)),
                   rng.normal(0, scale, (channels, channels)))


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def ema_blend(z_star_t: np.ndarray, z_prev: np.ndarray | None, alpha: float) -> np.ndarray:
    """``alpha * z_star_t + (1 - alpha) * z_prev``; without a predecessor returns ``z_star_t``."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if z_prev is None:
        return np.array(z_star_t, copy=True)
    if z_star_t.shape != z_prev.shape:
        raise ValueError(f"latent shapes differ: {z_star_t.shape} vs {z_prev.shape}")
    return alpha * z_star_t + (1.0 - alpha) * z_prev


def attention_weights(layer: AttentionLayer, z_query: np.ndarray, z_kv: np.ndarray) -> np.ndarray:
    q = z_query @ layer.w_q
    k = z_kv @ layer.w_k
    return softmax(q @ k.T / np.sqrt(layer.key_dim), axis=-1)


def injected_attention(layer: AttentionLayer, z_star_t: np.ndarray, z_t: np.ndarray) -> np.ndarray:
    """``Softmax(Q K^T / sqrt(d_k)) V`` with Q from ``z_star_t`` and K, V from ``z_t``."""
    if z_star_t.shape[1] != layer.w_q.shape[0] or z_t.shape[1] != layer.w_k.shape[0]:
        raise ValueError("latent channels do not match the layer projections")
    return attention_weights(layer, z_star_t, z_t) @ (z_t @ layer.w_v)


def self_attention(layer: AttentionLayer, z: np.ndarray) -> np.ndarray:
    return injected_attention(layer, z, z)


def _run_layer(layer, inputs, alpha, variant):
    # each layer is residual: skip + attention
    outputs = []
    state = None
    for t, z_star in enumerate(inputs):
        if variant == "none":
            out = z_star + self_attention(layer, z_star)
        elif variant == "s_ema":
            state = ema_blend(z_star, state, alpha)
            out = z_star + injected_attention(layer, z_star, state)
        elif variant == "s_linear":
            z_t = ema_blend(z_star, None if t == 0 else inputs[0], alpha)
            out = z_star + injected_attention(layer, z_star, z_t)
        elif variant == "s_res":
            state = ema_blend(z_star, state, alpha)
            out = state + self_attention(layer, z_star)
        else:
            raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        outputs.append(out)
    return outputs


def _run_views(layer, inputs, alpha, n_views):
    # blend each view's tokens with the reference timestamp's tokens of all views
    outputs = []
    ref = inputs[0]
    for z_star in inputs:
        views = np.split(z_star, n_views, axis=0)
        ref_all = ref
        out = []
        for v in views:
            kv = ema_blend(np.tile(v, (n_views, 1)), ref_all, alpha)
            out.append(v + injected_attention(layer, v, kv))
        outputs.append(np.concatenate(out, axis=0))
    return outputs


def run_sequence(layers, sequence, alpha: float, variant: str = "s_ema", n_views: int = 1):
    """Push a list of per-timestamp latents through the stack under an injection variant.

    ``t_ema`` blends each view against all views of timestamp 0 (requires
    ``n_views`` to divide the token count). Returns one output per timestamp.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    current = [np.asarray(z, dtype=np.float64) for z in sequence]
    shape = current[0].shape
    if any(z.shape != shape for z in current):
        raise ValueError("all timestamps must share (tokens, channels)")
    for layer in layers:
        if variant == "t_ema":
            current = _run_views(layer, current, alpha, n_views)
        else:
            current = _run_layer(layer, current, alpha, variant)
    return current


def make_stack(n_layers: int = 2, channels: int = 16, key_dim: int = 16, rng=None) -> list[AttentionLayer]:
    rng = np.random.default_rng(rng)
    return [AttentionLayer.random(channels, key_dim, rng) for _ in range(n_layers)]


def static_noisy_sequence(n_steps: int = 8, tokens: int = 32, channels: int = 16,
                          noise: float = 0.1, rng=None) -> list[np.ndarray]:
    """A fixed latent plus independent per-timestamp noise."""
    rng = np.random.default_rng(rng)
    base = rng.normal(size=(tokens, channels))
    return [base + noise * rng.normal(size=(tokens, channels)) for _ in range(n_steps)]


def mean_pairwise_distance(outputs) -> float:
    flat = np.stack([o.ravel() for o in outputs])
    n = flat.shape[0]
    total = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            total += np.linalg.norm(flat[i] - flat[j]) / np.sqrt(flat.shape[1])
    return total / (n * (n - 1) / 2)


def consistency_score(outputs) -> float:
    """Temporal consistency in (0, 1]: ``1 / (1 + mean pairwise RMS distance)``; 1 means identical."""
    return 1.0 / (1.0 + mean_pairwise_distance(outputs))


def consistency_sweep(alphas, variant: str = "s_ema", n_steps: int = 8, tokens: int = 32,
                      channels: int = 16, noise: float = 0.1, seed: int = 0):
    """Consistency score per alpha on the static-signal benchmark; rows of (alpha, variant, score)."""
    rng = np.random.default_rng(seed)
    layers = make_stack(2, channels, channels, rng)
    seq = static_noisy_sequence(n_steps, tokens, channels, noise, rng)
    rows = []
    for a in alphas:
        outs = run_sequence(layers, seq, float(a), variant)
        rows.append((float(a), variant, consistency_score(outs)))
    return rows
