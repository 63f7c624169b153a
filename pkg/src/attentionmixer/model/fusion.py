"""Cross-attention fusion, channel-mixing refinement, pooling and the sigmoid head."""

from __future__ import annotations

import numpy as np

from ..autodiff import F, LayerNorm, MLP, Module, Parameter, Tensor, uniform_fan_in
from .attention import MultiHeadAttention


class CrossAttention(MultiHeadAttention):
    """HCT tokens query, metadata tokens supply keys and values."""


def cross_attention_fuse(f_hct: Tensor, f_meta: Tensor, ca: CrossAttention) -> Tensor:
    if f_meta.shape[-2] == 0:
        raise ValueError("no metadata tokens; a fully missing record must be replaced by e_m upstream")
    if f_hct.shape[-1] != f_meta.shape[-1]:
        raise ValueError(f"token widths differ: {f_hct.shape} vs {f_meta.shape}")
    return ca(f_hct, f_meta)


class MixerBlock(Module):
    """``U + MLP_ch(LayerNorm(U))``; the MLP output layer starts at zero."""

    def __init__(self, d: int, hidden: int, rng: np.random.Generator):
        self.ln = LayerNorm(d)
        self.mlp = MLP(d, hidden, rng, zero_output=True)

    def __call__(self, u: Tensor) -> Tensor:
        return u + self.mlp(self.ln(u))


def mixer_block_apply(u: Tensor, blk: MixerBlock) -> Tensor:
    return blk(u)


def gap_pool(x: Tensor) -> Tensor:
    """Mean over the token axis: (B, T, d) -> (B, d), or (T, d) -> (d,)."""
    if x.shape[-2] < 1:
        raise ValueError("cannot pool zero tokens")
    return F.mean(x, axis=-2)


class ClassifierHead(Module):
    def __init__(self, d: int, rng: np.random.Generator):
        self.w_cls = Parameter(uniform_fan_in(rng, d, (1, d)))
        self.b_cls = Parameter(np.zeros(1))

    def __call__(self, pooled: Tensor) -> Tensor:
        """(B, d) -> probabilities (B,)."""
        logits = F.matmul(pooled, self.w_cls.T) + self.b_cls
        return F.sigmoid(logits).reshape(pooled.shape[0])


def classify(pooled: Tensor, head: ClassifierHead) -> Tensor:
    single = pooled.ndim == 1
    if single:
        pooled = pooled.reshape(1, pooled.shape[0])
    p = head(pooled)
    return p.reshape(()) if single else p
