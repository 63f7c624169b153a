import numpy as np
import pytest

from attentionmixer.autodiff import Parameter, Tensor
from attentionmixer.model import EncoderConfig, ViTEncoder, mae_pretrain_step, mask_patches, patchify, project_hct, unpatchify
from attentionmixer.model.checkpoint import CheckpointError, load_encoder_state, save_encoder
from attentionmixer.model.encoder import masked_reconstruction_loss
from attentionmixer.model.network import ModelVariantConfig, build_model
from attentionmixer.training import pretrain_encoder


def small(**kw):
    base = dict(side=8, patch=4, d_enc=8, depth=1, heads=2, d_f=8)
    base.update(kw)
    return EncoderConfig(**base)


class TestPatchify:
    def test_counts(self):
        assert patchify(np.zeros((4, 4, 4)), 2).shape == (8, 8)

    def test_full_scale_count(self):
        assert patchify(np.zeros((128, 128, 128), dtype=np.float32), 16).shape == (512, 4096)

    def test_round_trip(self, rng):
        v = rng.normal(size=(8, 12, 4))
        np.testing.assert_array_equal(unpatchify(patchify(v, 4), 4, v.shape), v)

    def test_lexicographic_block_order(self):
        v = np.zeros((4, 4, 4))
        v[0:2, 2:4, 0:2] = 1.0  # block (0, 1, 0)
        tokens = patchify(v, 2)
        assert np.flatnonzero(tokens.sum(axis=1)).tolist() == [0 * 4 + 1 * 2 + 0]

    def test_not_divisible(self):
        with pytest.raises(ValueError):
            patchify(np.zeros((5, 4, 4)), 2)


class TestMasking:
    def test_counts(self):
        vis, msk = mask_patches(8, 0.75, 0)
        assert len(msk) == 6 and len(vis) == 2
        assert sorted(np.concatenate([vis, msk]).tolist()) == list(range(8))

    def test_zero_ratio(self):
        vis, msk = mask_patches(8, 0.0, 0)
        assert len(msk) == 0 and len(vis) == 8

    def test_deterministic(self):
        a, b = mask_patches(64, 0.5, 7), mask_patches(64, 0.5, 7)
        assert all(np.array_equal(x, y) for x, y in zip(a, b))

    def test_no_visible(self):
        with pytest.raises(ValueError):
            mask_patches(2, 0.9, 0)


class TestEncode:
    def test_depth_zero_is_embed_plus_pos(self, rng):
        enc = ViTEncoder(small(depth=0), rng)
        tok = rng.normal(size=(8, 64))
        want = tok @ enc.patch_embed.weight.data + enc.patch_embed.bias.data + enc.pos.data
        np.testing.assert_allclose(enc.encode(tok[None]).data[0], want, rtol=1e-5, atol=1e-6)

    def test_zero_blocks_pass_residual(self, rng):
        enc = ViTEncoder(small(depth=2), rng)
        for blk in enc.blocks:
            for p in (blk.attn.w_o, blk.mlp.fc2.weight, blk.mlp.fc2.bias):
                p.data[...] = 0
        tok = rng.normal(size=(1, 8, 64))
        base = enc.patch_embed(Tensor(tok)).data + enc.pos.data
        np.testing.assert_allclose(enc.encode(tok).data, base, rtol=1e-6)

    def test_shape_and_finite(self, rng):
        enc = ViTEncoder(small(), rng)
        out = enc.encode(rng.normal(size=(3, 8, 64)))
        assert out.shape == (3, 8, 8) and np.all(np.isfinite(out.data))

    def test_permutation_sensitive(self, rng):
        enc = ViTEncoder(small(), rng)
        tok = rng.normal(size=(1, 8, 64))
        perm = rng.permutation(8)
        a = enc.encode(tok).data[0]
        b = enc.encode(tok[:, perm]).data[0]
        assert not np.allclose(a[perm], b, atol=1e-6)

    def test_wrong_token_width(self, rng):
        with pytest.raises(ValueError):
            ViTEncoder(small(), rng).encode(np.zeros((1, 8, 63)))


class TestProjection:
    def test_zero_weight(self, rng):
        out = project_hct(Tensor(rng.normal(size=(4, 3))), Tensor(np.zeros((5, 12))))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_identity(self):
        x = np.array([[1.0, 2.0, 3.0]])
        np.testing.assert_array_equal(project_hct(Tensor(x), Tensor(np.eye(3))).data, x)

    def test_hand_case(self):
        enc = np.array([[1.0, 2.0], [3.0, 4.0]])  # vec (token-major) = [1, 2, 3, 4]
        w = np.array([[1, 0, 0, 0], [0, 1, 1, 0], [1, 1, 1, 1]], dtype=float)
        np.testing.assert_allclose(project_hct(Tensor(enc), Tensor(w)).data, [[1.0, 5.0, 10.0]])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            project_hct(Tensor(np.zeros((2, 2))), Tensor(np.zeros((3, 5))))


class TestPretraining:
    def test_zero_everything_gives_zero_loss(self, rng):
        enc = ViTEncoder(small(), rng)
        enc.decoder.weight.data[...] = 0
        enc.decoder.bias.data[...] = 0
        loss, _ = mae_pretrain_step(np.zeros((2, 8, 64)), enc, 0.75, rng)
        assert loss.item() == 0.0

    def test_untrained_loss_near_target_variance(self, rng):
        enc = ViTEncoder(EncoderConfig(), rng)
        target = rng.standard_normal((16, 64, 64))
        loss, _ = mae_pretrain_step(target, enc, 0.75, rng)
        assert abs(loss.item() - 1.0) < 0.2

    def test_loss_ignores_visible_positions(self, rng):
        decoded = Parameter(rng.normal(size=(1, 8, 4)))
        target = rng.normal(size=(1, 8, 4))
        masked = np.array([[1, 5, 6]])
        before = masked_reconstruction_loss(decoded, target, masked).item()
        decoded.data[0, [0, 2, 3, 4, 7]] += 100.0
        assert masked_reconstruction_loss(decoded, target, masked).item() == before

    def test_gradients_reach_encoder(self, rng):
        enc = ViTEncoder(small(), rng)
        loss, _ = mae_pretrain_step(rng.normal(size=(2, 8, 64)), enc, 0.5, rng)
        loss.backward()
        for name, p in enc.named_parameters():
            if name != "w_hct":
                assert p.grad is not None and np.any(p.grad != 0), name

    def test_masked_content_is_hidden(self, rng):
        enc = ViTEncoder(small(), rng)
        tok = rng.normal(size=(1, 8, 64))
        mask = np.zeros((1, 8), dtype=bool)
        mask[0, 3] = True
        changed = tok.copy()
        changed[0, 3] += 50.0
        np.testing.assert_array_equal(enc.encode(tok, mask).data, enc.encode(changed, mask).data)

    def test_pretraining_reduces_loss(self, rng):
        enc = ViTEncoder(small(), np.random.default_rng(0))
        x = np.linspace(0, 1, 8)
        vols = np.stack([np.add.outer(np.add.outer(x, x), x) * s for s in rng.uniform(0.5, 1.5, 16)])
        losses = pretrain_encoder(enc, patchify(vols, 4), steps=60, seed=0, lr=3e-3)
        assert np.mean(losses[-5:]) < 0.5 * losses[0]


class TestEncoderCheckpoint:
    def test_strict_load_into_classifier(self, tmp_path, rng):
        cfg = small()
        enc = ViTEncoder(cfg, rng)
        save_encoder(enc, tmp_path / "e.ckpt")
        model = build_model(ModelVariantConfig(d_m=4, encoder=cfg, heads=2), 0)
        model.encoder.load_state_dict(load_encoder_state(tmp_path / "e.ckpt", cfg), strict=True)
        for name, p in enc.named_parameters():
            np.testing.assert_array_equal(dict(model.encoder.named_parameters())[name].data, p.data)

    def test_config_mismatch(self, tmp_path, rng):
        save_encoder(ViTEncoder(small(), rng), tmp_path / "e.ckpt")
        with pytest.raises(CheckpointError):
            load_encoder_state(tmp_path / "e.ckpt", small(d_enc=16))

    def test_shape_mismatch_names_parameter(self, rng):
        enc = ViTEncoder(small(), rng)
        state = enc.state_dict()
        state["pos"] = np.zeros((3, 3))
        with pytest.raises(ValueError, match="pos"):
            enc.load_state_dict(state)
