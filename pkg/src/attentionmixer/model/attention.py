from __future__ import annotations

import numpy as np

from ..autodiff import F, Module, Parameter, Tensor, uniform_fan_in


def multi_head_attention(
    q_tokens: Tensor,
    kv_tokens: Tensor,
    w_q: Tensor,
    w_k: Tensor,
    w_v: Tensor,
    w_o: Tensor,
    heads: int,
) -> tuple[Tensor, np.ndarray]:
    """Scaled dot-product attention with ``heads`` heads.

    Token tensors are (B, n, d) or (n, d). Head ``i`` uses column block ``i``
    of ``w_q``/``w_k``/``w_v``; head outputs are concatenated along features and
    projected by ``w_o``. Returns the output and the attention weights
    (B, heads, n_q, n_kv) as a plain array.
    """
    squeeze = q_tokens.ndim == 2
    if squeeze:
        q_tokens = q_tokens.reshape(1, *q_tokens.shape)
        kv_tokens = kv_tokens.reshape(1, *kv_tokens.shape)
    b, n_q, d = q_tokens.shape
    n_kv = kv_tokens.shape[1]
    if n_q < 1 or n_kv < 1:
        raise ValueError("attention needs at least one query and one key")
    if kv_tokens.shape[2] != d or w_q.shape[0] != d or w_k.shape[0] != d or w_v.shape[0] != d:
        raise ValueError(
            f"attention width mismatch: q {q_tokens.shape}, kv {kv_tokens.shape}, "
            f"W_Q {w_q.shape}, W_K {w_k.shape}, W_V {w_v.shape}"
        )
    if w_q.shape[1] % heads or w_v.shape[1] % heads or w_q.shape != w_k.shape:
        raise ValueError(f"projection widths {w_q.shape[1]}, {w_v.shape[1]} not divisible by {heads} heads")
    d_k = w_q.shape[1] // heads
    d_v = w_v.shape[1] // heads

    def split(x: Tensor, n: int, width: int) -> Tensor:
        return x.reshape(b, n, heads, width).transpose(0, 2, 1, 3)

    q = split(F.matmul(q_tokens, w_q), n_q, d_k)
    k = split(F.matmul(kv_tokens, w_k), n_kv, d_k)
    v = split(F.matmul(kv_tokens, w_v), n_kv, d_v)
    scores = F.scale(F.matmul(q, k.transpose(0, 1, 3, 2)), 1.0 / np.sqrt(d_k))
    weights = F.softmax(scores, axis=-1)
    mixed = F.matmul(weights, v).transpose(0, 2, 1, 3).reshape(b, n_q, heads * d_v)
    out = F.matmul(mixed, w_o)
    if squeeze:
        out = out.reshape(n_q, out.shape[-1])
    return out, weights.data


class MultiHeadAttention(Module):
    """Bias-free attention projections; ``d_k = d_v = d / heads``."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        if d % heads:
            raise ValueError(f"width {d} not divisible by {heads} heads")
        self.heads = heads
        self.w_q = Parameter(uniform_fan_in(rng, d, (d, d)))
        self.w_k = Parameter(uniform_fan_in(rng, d, (d, d)))
        self.w_v = Parameter(uniform_fan_in(rng, d, (d, d)))
        self.w_o = Parameter(uniform_fan_in(rng, d, (d, d)))
        self.last_weights: np.ndarray | None = None

    def __call__(self, q_tokens: Tensor, kv_tokens: Tensor) -> Tensor:
        out, self.last_weights = multi_head_attention(
            q_tokens, kv_tokens, self.w_q, self.w_k, self.w_v, self.w_o, self.heads
        )
        return out
