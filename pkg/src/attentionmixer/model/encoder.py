"""3D patch ViT encoder, masked-patch pretraining and the flatten + projection to d_f.

Patches are taken in lexicographic (D, H, W) block order and each patch is
flattened row-major. The encoder output (n_patches x d_enc) is vectorised
token-major before the projection ``W_HCT``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..autodiff import F, LayerNorm, Linear, MLP, Module, Parameter, Tensor, uniform_fan_in
from ..data.volume import Volume
from .attention import MultiHeadAttention


@dataclass(frozen=True)
class EncoderConfig:
    side: int = 16
    patch: int = 4
    d_enc: int = 32
    depth: int = 2
    heads: int = 4
    mask_ratio: float = 0.75
    d_f: int = 64
    mlp_ratio: int = 2

    def __post_init__(self):
        if self.side % self.patch:
            raise ValueError(f"patch {self.patch} does not divide side {self.side}")
        if self.d_enc % self.heads:
            raise ValueError(f"d_enc {self.d_enc} not divisible by {self.heads} heads")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ValueError("mask_ratio must lie in [0, 1)")

    @property
    def n_patches(self) -> int:
        return (self.side // self.patch) ** 3

    @property
    def patch_dim(self) -> int:
        return self.patch**3

    def to_json(self) -> dict:
        return asdict(self)


def patchify(v, patch: int) -> np.ndarray:
    """(D, H, W) or (B, D, H, W) -> (n_patches, patch**3) or (B, n_patches, patch**3)."""
    arr = v.voxels if isinstance(v, Volume) else np.asarray(v)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    b, d, h, w = arr.shape
    if d % patch or h % patch or w % patch:
        raise ValueError(f"patch {patch} does not divide volume dims {(d, h, w)}")
    x = arr.reshape(b, d // patch, patch, h // patch, patch, w // patch, patch)
    x = x.transpose(0, 1, 3, 5, 2, 4, 6).reshape(b, -1, patch**3)
    return x[0] if single else x


def unpatchify(tokens: np.ndarray, patch: int, dims: tuple[int, int, int]) -> np.ndarray:
    tokens = np.asarray(tokens)
    single = tokens.ndim == 2
    if single:
        tokens = tokens[None]
    d, h, w = dims
    b = tokens.shape[0]
    x = tokens.reshape(b, d // patch, h // patch, w // patch, patch, patch, patch)
    x = x.transpose(0, 1, 4, 2, 5, 3, 6).reshape(b, d, h, w)
    return x[0] if single else x


def mask_patches(n_patches: int, mask_ratio: float, seed) -> tuple[np.ndarray, np.ndarray]:
    """Uniformly random split into (visible, masked) index arrays, both sorted."""
    if not 0.0 <= mask_ratio < 1.0:
        raise ValueError("mask_ratio must lie in [0, 1)")
    n_masked = int(round(mask_ratio * n_patches))
    if n_masked >= n_patches:
        raise ValueError(f"mask_ratio {mask_ratio} leaves no visible patch out of {n_patches}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    perm = rng.permutation(n_patches)
    return np.sort(perm[n_masked:]), np.sort(perm[:n_masked])


class EncoderBlock(Module):
    """Pre-norm transformer block."""

    def __init__(self, d: int, heads: int, mlp_ratio: int, rng: np.random.Generator):
        self.ln1 = LayerNorm(d)
        self.attn = MultiHeadAttention(d, heads, rng)
        self.ln2 = LayerNorm(d)
        self.mlp = MLP(d, mlp_ratio * d, rng)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.ln1(x)
        x = x + self.attn(h, h)
        return x + self.mlp(self.ln2(x))


class ViTEncoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        d = cfg.d_enc
        self.patch_embed = Linear(cfg.patch_dim, d, rng)
        self.pos = Parameter(0.02 * rng.standard_normal((cfg.n_patches, d)))
        self.blocks = [EncoderBlock(d, cfg.heads, cfg.mlp_ratio, rng) for _ in range(cfg.depth)]
        self.mask_token = Parameter(0.02 * rng.standard_normal(d))
        self.decoder = Linear(d, cfg.patch_dim, rng)
        self.decoder.weight.data = (0.02 * rng.standard_normal((d, cfg.patch_dim))).astype(
            self.decoder.weight.dtype
        )
        fan_in = cfg.n_patches * d
        self.w_hct = Parameter(uniform_fan_in(rng, fan_in, (cfg.d_f, fan_in)))

    def encode(self, tokens, mask: np.ndarray | None = None) -> Tensor:
        """(B, n_patches, patch**3) -> (B, n_patches, d_enc).

        ``mask`` (B, n_patches) bool replaces the embedding of masked patches
        with the mask token, so their voxel content never enters the network.
        """
        tokens = F.as_tensor(tokens, like=self.pos)
        if tokens.shape[-1] != self.cfg.patch_dim or tokens.shape[-2] != self.cfg.n_patches:
            raise ValueError(
                f"token shape {tokens.shape} does not match "
                f"({self.cfg.n_patches}, {self.cfg.patch_dim})"
            )
        x = self.patch_embed(tokens)
        if mask is not None:
            m = mask.astype(x.dtype)[..., None]
            x = x * (1.0 - m) + F.as_tensor(m, like=x) * self.mask_token
        x = x + self.pos
        for blk in self.blocks:
            x = blk(x)
        return x

    def project(self, enc: Tensor) -> Tensor:
        return project_hct(enc, self.w_hct)

    def __call__(self, tokens) -> Tensor:
        return self.project(self.encode(tokens))


def project_hct(enc: Tensor, w_hct: Tensor) -> Tensor:
    """Flatten (B, n, d) token-major and apply ``W_HCT`` (d_f, n*d) -> (B, 1, d_f).

    A single (n, d) sequence gives one (1, d_f) token.
    """
    single = enc.ndim == 2
    if single:
        enc = enc.reshape(1, *enc.shape)
    b, n, d = enc.shape
    if w_hct.shape[1] != n * d:
        raise ValueError(f"W_HCT shape {w_hct.shape} does not match flattened width {n * d}")
    flat = enc.reshape(b, n * d)
    out = F.matmul(flat, w_hct.T)
    return out.reshape(1, w_hct.shape[0]) if single else out.reshape(b, 1, w_hct.shape[0])


def masked_reconstruction_loss(decoded: Tensor, target: np.ndarray, masked: np.ndarray) -> Tensor:
    """MSE between decoded and true patches over masked positions only.

    ``masked`` is (B, K) indices into the patch axis.
    """
    pred = F.gather_rows(decoded, masked)
    batch = np.arange(target.shape[0])[:, None]
    return F.mse_loss(pred, target[batch, masked])


def mae_pretrain_step(
    tokens: np.ndarray, enc: ViTEncoder, mask_ratio: float, rng: np.random.Generator
) -> tuple[Tensor, np.ndarray]:
    """Forward pass of one masked-reconstruction step on (B, n_patches, patch**3).

    Returns the loss (call ``backward`` on it) and the (B, K) masked indices.
    """
    tokens = np.asarray(tokens)
    if tokens.ndim == 2:
        tokens = tokens[None]
    b, n, _ = tokens.shape
    masked = np.stack([mask_patches(n, mask_ratio, rng)[1] for _ in range(b)])
    if masked.shape[1] == 0:
        raise ValueError("mask_ratio masks no patch; nothing to reconstruct")
    flags = np.zeros((b, n), dtype=bool)
    flags[np.arange(b)[:, None], masked] = True
    decoded = enc.decoder(enc.encode(tokens, mask=flags))
    return masked_reconstruction_loss(decoded, tokens.astype(enc.pos.dtype), masked), masked
