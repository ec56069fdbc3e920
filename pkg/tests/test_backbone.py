"""Backbone: embedding, attention, blocks, pretraining, checkpoint I/O."""
import numpy as np
import pytest

from preprompt.backbone import (BackboneConfig, BackboneParams, block_forward,
                                attention_heads, extract_feature, load_backbone,
                                msa, patch_embed, patchify, pretrain_and_freeze,
                                save_backbone)
from preprompt.data import gen_synthetic
from preprompt.errors import ConfigError, DomainError

from oracles import naive_block, naive_layer_norm, naive_msa


def tiny_config(**kw):
    base = dict(image_h=8, image_w=8, channels=1, patch=4, embed_dim=16,
                heads=2, depth=2)
    base.update(kw)
    return BackboneConfig(**base)


class TestConfig:
    def test_sequence_length(self):
        cfg = BackboneConfig()
        assert cfg.n_patches == 16
        assert cfg.seq_len == 17

    def test_divisibility_errors(self):
        with pytest.raises(ConfigError):
            BackboneConfig(image_h=28, image_w=28, patch=5)
        with pytest.raises(ConfigError):
            BackboneConfig(embed_dim=64, heads=5)
        with pytest.raises(ConfigError):
            BackboneConfig(depth=-1)
        with pytest.raises(ConfigError):
            BackboneConfig(mlp_ratio=0.0)

    def test_depth_zero_allowed(self):
        assert tiny_config(depth=0).depth == 0


class TestPatchEmbed:
    def test_patch_flattening_order(self):
        # pixel value encodes its own (row, col); patches must come out
        # row-major over the grid, row-major within a patch, channel-minor
        cfg = tiny_config()
        img = np.arange(64, dtype=float).reshape(8, 8, 1)
        patches = patchify(img[None], cfg)[0]
        assert patches.shape == (4, 16)
        # patch (0, 1) covers rows 0..3, cols 4..7 -> starts at value 4
        assert patches[1][0] == 4.0
        # within-patch row-major: element (1, 0) of patch (0, 0) is pixel (1, 0)
        assert patches[0][4] == 8.0
        # patch grid row-major: patch index 2 is grid (1, 0) -> pixel (4, 0)
        assert patches[2][0] == 32.0

    def test_channel_minor_order(self):
        cfg = tiny_config(channels=2)
        img = np.zeros((8, 8, 2))
        img[0, 0, 0] = 1.0
        img[0, 0, 1] = 2.0
        patches = patchify(img[None], cfg)[0]
        assert patches[0][0] == 1.0
        assert patches[0][1] == 2.0

    def test_zero_image_zero_projection(self):
        cfg = tiny_config()
        params = BackboneParams.init_random(cfg, 0)
        params.tensors["proj"][:] = 0.0
        tok = patch_embed(np.zeros((8, 8, 1)), params)
        expected = np.vstack([params.tensors["cls"],
                              np.zeros((cfg.n_patches, cfg.embed_dim))])
        expected = expected + params.tensors["pos"]
        assert np.array_equal(tok, expected)

    def test_desk_scale_sequence_length(self):
        cfg = BackboneConfig()
        params = BackboneParams.init_random(cfg, 0)
        tok = patch_embed(np.zeros((28, 28, 1)), params)
        assert tok.shape == (17, 64)

    def test_one_hot_patch_selects_projection_row(self):
        cfg = tiny_config()
        params = BackboneParams.init_random(cfg, 1)
        img = np.zeros((8, 8, 1))
        img[1, 2, 0] = 1.0  # patch (0,0), within-patch offset 1*4+2=6
        tok = patch_embed(img, params)
        expected = params.tensors["proj"][6] + params.tensors["pos"][1]
        assert np.allclose(tok[1], expected, atol=1e-15)

    def test_dimension_mismatch(self):
        cfg = tiny_config()
        params = BackboneParams.init_random(cfg, 0)
        with pytest.raises(DomainError):
            patch_embed(np.zeros((9, 8, 1)), params)


class TestAttention:
    def test_msa_matches_naive_oracle(self):
        rng = np.random.default_rng(7)
        cfg = tiny_config()
        params = BackboneParams.init_random(cfg, 2)
        blk = params.block(0)
        for _ in range(20):
            n = int(rng.integers(1, 5))
            h = rng.normal(0, 1, (n, 16))
            ours = msa(h, params, 0)
            theirs = naive_msa(h, h, h, blk["wq"], blk["wk"], blk["wv"], blk["wo"])
            assert np.allclose(ours, theirs, atol=1e-12)

    def test_single_head_is_head_output_times_wo(self):
        rng = np.random.default_rng(8)
        cfg = tiny_config(heads=1)
        params = BackboneParams.init_random(cfg, 3)
        blk = params.block(0)
        h = rng.normal(0, 1, (3, 16))
        heads = attention_heads(h, h, h, blk["wq"], blk["wk"], blk["wv"])
        assert len(heads) == 1
        assert np.allclose(msa(h, params, 0), heads[0] @ blk["wo"], atol=1e-12)

    def test_identity_wo_concatenates_heads(self):
        rng = np.random.default_rng(9)
        cfg = tiny_config()
        params = BackboneParams.init_random(cfg, 4)
        params.tensors["b0.wo"][:] = np.eye(16)
        blk = params.block(0)
        h = rng.normal(0, 1, (4, 16))
        heads = attention_heads(h, h, h, blk["wq"], blk["wk"], blk["wv"])
        assert np.allclose(msa(h, params, 0), np.concatenate(heads, axis=1),
                           atol=1e-12)

    def test_zero_queries_average_values(self):
        rng = np.random.default_rng(10)
        cfg = tiny_config()
        params = BackboneParams.init_random(cfg, 5)
        blk = params.block(0)
        hq = np.zeros((3, 16))
        hk = rng.normal(0, 1, (3, 16))
        hv = rng.normal(0, 1, (3, 16))
        heads = attention_heads(hq, hk, hv, blk["wq"], blk["wk"], blk["wv"])
        for i, out in enumerate(heads):
            sl = slice(i * 8, (i + 1) * 8)
            expected = (hv[:, sl] @ blk["wv"][i]).mean(axis=0)
            assert np.allclose(out, np.tile(expected, (3, 1)), atol=1e-12)

    def test_dominating_key_saturates(self):
        cfg = tiny_config(heads=1)
        params = BackboneParams.init_random(cfg, 6)
        m = np.eye(16)
        params.tensors["b0.wq"][:] = m[None]
        params.tensors["b0.wk"][:] = m[None]
        params.tensors["b0.wv"][:] = m[None]
        blk = params.block(0)
        hq = np.zeros((1, 16))
        hq[0, 0] = 1.0
        hk = np.zeros((2, 16))
        hk[0, 0] = 400.0  # logit gap 400/sqrt(16) = 100 >= 50
        hv = np.vstack([np.full(16, 3.0), np.full(16, -1.0)])
        out = attention_heads(hq, hk, hv, blk["wq"], blk["wk"], blk["wv"])[0]
        assert np.allclose(out[0], hv[0], atol=1e-12)

    def test_head_width_mismatch(self):
        cfg = tiny_config()
        params = BackboneParams.init_random(cfg, 0)
        with pytest.raises(DomainError):
            msa(np.zeros((3, 12)), params, 0)


class TestBlock:
    def test_zero_values_and_mlp_make_identity(self):
        cfg = tiny_config()
        params = BackboneParams.init_random(cfg, 11)
        for name in ("b0.wv", "b0.w1", "b0.b1", "b0.w2", "b0.b2"):
            params.tensors[name][:] = 0.0
        h = np.random.default_rng(12).normal(0, 1, (5, 16))
        assert np.array_equal(block_forward(h, params, 0), h)

    def test_block_matches_naive_oracle(self):
        rng = np.random.default_rng(13)
        cfg = tiny_config()
        params = BackboneParams.init_random(cfg, 14)
        blk = params.block(1)
        for _ in range(10):
            h = rng.normal(0, 1, (4, 16))
            assert np.allclose(block_forward(h, params, 1), naive_block(h, blk),
                               atol=1e-12)

    def test_depth_zero_feature_is_layernormed_cls(self):
        cfg = tiny_config(depth=0)
        params = BackboneParams.init_random(cfg, 15)
        img = np.random.default_rng(16).random((8, 8, 1))
        tok = patch_embed(img, params)
        expected = naive_layer_norm(tok[:1], params.tensors["lnfg"],
                                    params.tensors["lnfb"])[0]
        assert np.allclose(extract_feature(img, params), expected, atol=1e-12)


class TestFeatureExtraction:
    def test_determinism(self):
        cfg = tiny_config()
        params = BackboneParams.init_random(cfg, 17)
        img = np.random.default_rng(18).random((8, 8, 1))
        assert np.array_equal(extract_feature(img, params),
                              extract_feature(img, params))

    def test_freeze_locks_arrays(self):
        params = BackboneParams.init_random(tiny_config(), 19)
        checksum = params.freeze()
        assert params.frozen
        with pytest.raises(ValueError):
            params.tensors["proj"][0, 0] = 1.0
        assert params.checksum() == checksum

    def test_feature_is_1d(self):
        params = BackboneParams.init_random(tiny_config(), 20)
        feat = extract_feature(np.zeros((8, 8, 1)), params)
        assert feat.shape == (16,)


class TestPretrain:
    def test_epochs_zero_returns_frozen_seeded_init(self):
        data = gen_synthetic(3, 4, image_h=8, image_w=8, seed=1)
        cfg = tiny_config()
        p1, acc1 = pretrain_and_freeze(data.images, data.labels, cfg, 0, seed=5)
        p2, _ = pretrain_and_freeze(data.images, data.labels, cfg, 0, seed=5)
        assert p1.frozen and acc1 == 0.0
        assert p1.checksum() == p2.checksum()

    def test_different_seed_different_checksum(self):
        data = gen_synthetic(3, 4, image_h=8, image_w=8, seed=1)
        cfg = tiny_config()
        p1, _ = pretrain_and_freeze(data.images, data.labels, cfg, 0, seed=5)
        p2, _ = pretrain_and_freeze(data.images, data.labels, cfg, 0, seed=6)
        assert p1.checksum() != p2.checksum()

    def test_same_seed_same_checksum_after_training(self):
        data = gen_synthetic(3, 10, image_h=8, image_w=8, seed=2)
        cfg = tiny_config()
        p1, _ = pretrain_and_freeze(data.images, data.labels, cfg, 2, seed=5)
        p2, _ = pretrain_and_freeze(data.images, data.labels, cfg, 2, seed=5)
        assert p1.checksum() == p2.checksum()

    def test_five_class_smoke_accuracy(self):
        data = gen_synthetic(5, 40, image_h=8, image_w=8, noise=0.08, seed=3)
        cfg = tiny_config(depth=3)
        params, acc = pretrain_and_freeze(data.images, data.labels, cfg,
                                          epochs=20, seed=0, batch_size=32)
        assert params.frozen
        assert acc > 0.9

    def test_empty_dataset_rejected(self):
        with pytest.raises(DomainError):
            pretrain_and_freeze(np.zeros((0, 8, 8, 1)), np.zeros(0, dtype=int),
                                tiny_config(), 1, seed=0)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        params = BackboneParams.init_random(tiny_config(), 21)
        params.freeze()
        path = tmp_path / "bb.ppvt"
        save_backbone(params, path)
        loaded = load_backbone(path)
        assert loaded.frozen
        assert loaded.config == params.config
        assert loaded.checksum() == params.checksum()
        for name, t in params.tensors.items():
            assert np.array_equal(loaded.tensors[name], t)

    def test_unfrozen_round_trip(self, tmp_path):
        params = BackboneParams.init_random(tiny_config(), 22)
        path = tmp_path / "bb.ppvt"
        save_backbone(params, path)
        assert not load_backbone(path).frozen

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ppvt"
        path.write_bytes(b"XXXX" + b"\x00" * 64)
        with pytest.raises(DomainError, match="offset 0"):
            load_backbone(path)

    def test_truncated(self, tmp_path):
        params = BackboneParams.init_random(tiny_config(), 23)
        path = tmp_path / "bb.ppvt"
        save_backbone(params, path)
        data = path.read_bytes()
        path.write_bytes(data[:len(data) // 2])
        with pytest.raises(DomainError):
            load_backbone(path)

    def test_corrupted_payload_fails_checksum(self, tmp_path):
        params = BackboneParams.init_random(tiny_config(), 24)
        path = tmp_path / "bb.ppvt"
        save_backbone(params, path)
        data = bytearray(path.read_bytes())
        data[100] ^= 0xFF
        path.write_bytes(bytes(data))
        with pytest.raises(DomainError, match="checksum"):
            load_backbone(path)
