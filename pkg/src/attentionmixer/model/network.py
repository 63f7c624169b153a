"""The AttentionMixer classifier and its ablation variants.

Variant routing (all end in mean pooling and the sigmoid head):

=============  ==========================================================
full           cross-attention(HCT query, metadata keys/values) -> mixer
no_ca          HCT token + metadata token (elementwise) -> mixer
no_mixer       cross-attention, pooled straight to the head
early_fusion   concat(HCT token, metadata token) -> linear to d_f
meta_only      metadata token only
hct_only       HCT token only
=============  ==========================================================

With a single metadata token the softmax weight is exactly 1, so raw
cross-attention returns ``F_meta W_V W_O`` whatever the HCT query is. With
``query_residual`` (the default) the HCT token is added back to the
attention output, the usual transformer cross-attention block, so imaging
evidence reaches the head. ``query_residual=False`` gives the bare
attention output.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ..autodiff import F, Linear, Module, Tensor
from .encoder import EncoderConfig, ViTEncoder
from .fusion import ClassifierHead, CrossAttention, MixerBlock, cross_attention_fuse, gap_pool
from .metadata_encoder import MetadataEncoder

VARIANTS = ("full", "no_ca", "no_mixer", "early_fusion", "meta_only", "hct_only")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelVariantConfig:
    variant: str = "full"
    d_m: int = 10
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    heads: int = 4
    mixer_blocks: int = 2
    mixer_hidden: int | None = None
    query_residual: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}")
        if self.d_f % self.heads:
            raise ConfigError(f"d_f {self.d_f} not divisible by {self.heads} heads")

    @property
    def d_f(self) -> int:
        return self.encoder.d_f

    @property
    def uses_hct(self) -> bool:
        return self.variant != "meta_only"

    @property
    def uses_meta(self) -> bool:
        return self.variant != "hct_only"

    def with_variant(self, variant: str) -> "ModelVariantConfig":
        return replace(self, variant=variant)

    def to_json(self) -> dict:
        return {
            "variant": self.variant,
            "d_m": self.d_m,
            "encoder": self.encoder.to_json(),
            "heads": self.heads,
            "mixer_blocks": self.mixer_blocks,
            "mixer_hidden": self.mixer_hidden,
            "query_residual": self.query_residual,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ModelVariantConfig":
        obj = dict(obj)
        obj["encoder"] = EncoderConfig(**obj.get("encoder", {}))
        return cls(**obj)


@dataclass
class Batch:
    tokens: np.ndarray | None  # (B, n_patches, patch**3)
    meta: np.ndarray | None  # (B, d_m)
    missing: np.ndarray | None  # (B,) bool
    labels: np.ndarray | None = None

    def __len__(self) -> int:
        for x in (self.tokens, self.meta, self.labels):
            if x is not None:
                return len(x)
        return 0


class AttentionMixer(Module):
    def __init__(self, cfg: ModelVariantConfig, rng: np.random.Generator):
        self.cfg = cfg
        d_f = cfg.d_f
        v = cfg.variant
        if cfg.uses_hct:
            self.encoder = ViTEncoder(cfg.encoder, rng)
        if cfg.uses_meta:
            self.meta = MetadataEncoder(cfg.d_m, d_f, rng)
        if v in ("full", "no_mixer"):
            self.cross = CrossAttention(d_f, cfg.heads, rng)
        if v in ("full", "no_ca"):
            hidden = cfg.mixer_hidden or 2 * d_f
            self.mixer = [MixerBlock(d_f, hidden, rng) for _ in range(cfg.mixer_blocks)]
        if v == "early_fusion":
            self.early = Linear(2 * d_f, d_f, rng)
        self.head = ClassifierHead(d_f, rng)

    @property
    def attention_weights(self) -> np.ndarray | None:
        return self.cross.last_weights if hasattr(self, "cross") else None

    def hct_token(self, tokens) -> Tensor:
        return self.encoder(tokens)

    def meta_token(self, values, missing) -> Tensor:
        return self.meta(values, missing)

    def fuse(self, f_hct: Tensor | None, f_meta: Tensor | None) -> Tensor:
        """Stages after the two modality encoders -> probabilities (B,)."""
        v = self.cfg.variant
        if v == "meta_only":
            x = f_meta
        elif v == "hct_only":
            x = f_hct
        elif v == "early_fusion":
            x = self.early(F.concat([f_hct, f_meta], axis=-1))
        elif v == "no_ca":
            x = f_hct + f_meta
        else:
            x = cross_attention_fuse(f_hct, f_meta, self.cross)
            if self.cfg.query_residual:
                x = f_hct + x
        if v in ("full", "no_ca"):
            for blk in self.mixer:
                x = blk(x)
        return self.head(gap_pool(x))

    def forward(self, batch: Batch) -> Tensor:
        f_hct = self.hct_token(batch.tokens) if self.cfg.uses_hct else None
        f_meta = self.meta_token(batch.meta, batch.missing) if self.cfg.uses_meta else None
        return self.fuse(f_hct, f_meta)

    __call__ = forward

    def encoder_parameters(self):
        return self.encoder.parameters() if self.cfg.uses_hct else []

    def freeze_encoder(self, flag: bool = True) -> None:
        """Freeze the ViT backbone; the projection ``W_HCT`` stays trainable."""
        if not self.cfg.uses_hct:
            return
        for name, p in self.encoder.named_parameters():
            if name != "w_hct":
                p.requires_grad = not flag
                p.grad = None

    @property
    def encoder_frozen(self) -> bool:
        return self.cfg.uses_hct and not self.encoder.patch_embed.weight.requires_grad

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]


def build_model(cfg: ModelVariantConfig, seed: int) -> AttentionMixer:
    return AttentionMixer(cfg, np.random.default_rng(seed))
