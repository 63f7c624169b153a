from .encoder import EncoderConfig, ViTEncoder, mae_pretrain_step, mask_patches, patchify, project_hct, unpatchify
from .fusion import ClassifierHead, CrossAttention, MixerBlock, classify, cross_attention_fuse, gap_pool
from .metadata_encoder import MetadataEncoder, embed_metadata
from .network import VARIANTS, AttentionMixer, Batch, ConfigError, ModelVariantConfig, build_model
