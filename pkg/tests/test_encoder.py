import math

import numpy as np
import pytest

from pat_reid import autodiff as ad
from pat_reid.autodiff import Tensor
from pat_reid.config import ModelConfig
from pat_reid.encoder import (
    EncoderParams,
    assemble_tokens,
    default_part_regions,
    encoder_forward,
    fused_attention_map,
    global_attention,
    init_encoder_params,
    params_from_named,
    part_attention,
    patch_embed,
)
from pat_reid.errors import ConfigError, NumericalError, StateError


def micro_config(**overrides) -> ModelConfig:
    base = dict(image_h=8, image_w=8, channels=1, patch_size=4, embed_dim=8,
                heads=2, blocks=1, num_parts=2, num_classes=3, mlp_ratio=2)
    base.update(overrides)
    return ModelConfig(**base)


def toy_config(**overrides) -> ModelConfig:
    base = dict(image_h=64, image_w=32, channels=3, patch_size=8, embed_dim=64,
                heads=4, blocks=4, num_parts=3, num_classes=20)
    base.update(overrides)
    return ModelConfig(**base)


def dense_attention_oracle(z: np.ndarray, wq, bq, wk, bk, wv, bv, rows: list[int]) -> np.ndarray:
    """Single-head attention over a row subset, straight from the formula."""
    q = (z @ wq + bq)[rows]
    k = (z @ wk + bk)[rows]
    v = (z @ wv + bv)[rows]
    scores = q @ k.T / math.sqrt(z.shape[-1])
    e = np.exp(scores - scores.max(axis=-1, keepdims=True))
    probs = e / e.sum(axis=-1, keepdims=True)
    return probs @ v


def masked_dense_oracle(z: np.ndarray, wq, bq, wk, bk, wv, bv,
                        query_row: int, allowed: list[int]) -> np.ndarray:
    """Attention over the whole sequence with -inf scores off the allowed set."""
    q = (z @ wq + bq)
    k = (z @ wk + bk)
    v = (z @ wv + bv)
    scores = q @ k.T / math.sqrt(z.shape[-1])
    mask = np.full(scores.shape[-1], -1e30)
    mask[allowed] = 0.0
    row = scores[query_row] + mask
    e = np.exp(row - row.max())
    probs = e / e.sum()
    return probs @ v


class TestPatchEmbed:
    def test_paper_scale_token_counts(self):
        cfg = ModelConfig(image_h=256, image_w=128, patch_size=16, embed_dim=16,
                          heads=2, blocks=1, num_parts=3, num_classes=4)
        assert cfg.num_patches == 128
        assert cfg.seq_len == 132

    def test_toy_token_counts(self):
        cfg = toy_config()
        assert cfg.num_patches == 32
        assert cfg.seq_len == 36

    def test_zero_image_gives_bias_only_rows(self):
        cfg = micro_config()
        params = init_encoder_params(cfg, seed=1)
        params.patch_b.data = np.arange(cfg.embed_dim, dtype=np.float32)
        out = patch_embed(np.zeros((cfg.channels, cfg.image_h, cfg.image_w), np.float32),
                          params, cfg)
        assert out.shape == (cfg.num_patches, cfg.embed_dim)
        for row in out.data:
            np.testing.assert_array_equal(row, params.patch_b.data)

    def test_row_major_patch_order(self):
        cfg = micro_config()
        params = init_encoder_params(cfg, seed=1)
        img = np.zeros((1, 8, 8), np.float32)
        img[0, 4:, :4] = 1.0  # only the bottom-left patch is non-zero
        out = patch_embed(img, params, cfg).data
        base = patch_embed(np.zeros_like(img), params, cfg).data
        changed = [i for i in range(4) if not np.array_equal(out[i], base[i])]
        assert changed == [2]  # grid position (1, 0) in row-major order


class TestDefaultPartRegions:
    def test_sixteen_by_eight_grid(self):
        spec = default_part_regions(16, 8, 3)
        tops = [min(r) // 8 for r in spec.regions]
        assert tops == [0, 4, 8]
        assert all(len(r) == 64 for r in spec.regions)

    def test_eight_by_four_grid(self):
        spec = default_part_regions(8, 4, 3)
        rows = [sorted({t // 4 for t in r}) for r in spec.regions]
        assert rows == [[0, 1, 2, 3], [2, 3, 4, 5], [4, 5, 6, 7]]
        assert all(len(r) == 16 for r in spec.regions)

    def test_single_part_on_square_grid(self):
        spec = default_part_regions(8, 8, 1)
        assert len(spec.regions) == 1
        assert len(spec.regions[0]) == 64

    def test_wide_grid_rejected(self):
        with pytest.raises(ConfigError):
            default_part_regions(4, 8, 3)

    def test_uncovered_rows_rejected(self):
        with pytest.raises(ConfigError, match="uncovered"):
            default_part_regions(16, 8, 1)


class TestGlobalAttention:
    def test_rows_sum_to_one_with_single_image_token(self):
        cfg = micro_config(image_h=4, image_w=4, patch_size=4, num_parts=1)
        params = init_encoder_params(cfg, seed=3)
        regions = default_part_regions(cfg.grid_h, cfg.grid_w, 1)
        img = np.random.default_rng(0).random((1, cfg.channels, 4, 4)).astype(np.float32)
        out = encoder_forward(img, params, regions, cfg, retain_attention=True)
        probs = out.attention[0].global_probs
        assert probs.shape[-2:] == (2, 2)  # class + one image token
        np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-6)

    def test_identical_key_rows_give_uniform_attention(self):
        cfg = micro_config()
        params = init_encoder_params(cfg, seed=4, dtype=np.float64)
        z = Tensor(np.tile(np.random.default_rng(1).standard_normal((1, 1, cfg.embed_dim)),
                           (1, cfg.seq_len, 1)))
        _, probs = global_attention(z, params.blocks[0], cfg.heads, cfg.num_parts)
        np.testing.assert_allclose(probs, 1.0 / probs.shape[-1], atol=1e-12)

    def test_single_head_matches_direct_formula(self):
        cfg = micro_config(heads=1, num_parts=2)
        params = init_encoder_params(cfg, seed=5, dtype=np.float64)
        rng = np.random.default_rng(2)
        z = rng.standard_normal((1, cfg.seq_len, cfg.embed_dim))
        blk = params.blocks[0]
        rows_out, _ = global_attention(Tensor(z), blk, 1, cfg.num_parts)
        rows = [0] + list(range(1 + cfg.num_parts, cfg.seq_len))
        expected = dense_attention_oracle(
            z[0], blk.wq.data, blk.bq.data, blk.wk.data, blk.bk.data,
            blk.wv.data, blk.bv.data, rows)
        np.testing.assert_allclose(rows_out.data[0], expected, atol=1e-10)

    def test_no_part_token_columns(self):
        cfg = micro_config()
        params = init_encoder_params(cfg, seed=6)
        regions = default_part_regions(cfg.grid_h, cfg.grid_w, cfg.num_parts)
        img = np.random.default_rng(3).random(
            (1, cfg.channels, cfg.image_h, cfg.image_w)).astype(np.float32)
        out = encoder_forward(img, params, regions, cfg, retain_attention=True)
        for block in out.attention:
            # the global matrix is exactly (1+N)x(1+N): no room for part columns
            assert block.global_probs.shape[-1] == 1 + cfg.num_patches


class TestPartAttention:
    def test_single_token_region_is_convex_combination(self):
        cfg = ModelConfig(image_h=8, image_w=8, channels=1, patch_size=8, embed_dim=8,
                          heads=1, blocks=1, num_parts=1, num_classes=2, mlp_ratio=2)
        params = init_encoder_params(cfg, seed=7, dtype=np.float64)
        regions = default_part_regions(1, 1, 1)
        rng = np.random.default_rng(4)
        z = rng.standard_normal((1, cfg.seq_len, cfg.embed_dim))
        blk = params.blocks[0]
        rows, probs = part_attention(Tensor(z), blk, 1, regions)
        v = z @ blk.wv.data + blk.bv.data
        w = probs[0][0, 0, 0]
        np.testing.assert_allclose(w.sum(), 1.0, atol=1e-12)
        expected = w[0] * v[0, 1] + w[1] * v[0, 2]
        np.testing.assert_allclose(rows.data[0, 0], expected, atol=1e-12)

    def test_single_head_matches_masked_dense_oracle(self):
        cfg = micro_config(heads=1)
        params = init_encoder_params(cfg, seed=8, dtype=np.float64)
        regions = default_part_regions(cfg.grid_h, cfg.grid_w, cfg.num_parts)
        rng = np.random.default_rng(5)
        z = rng.standard_normal((1, cfg.seq_len, cfg.embed_dim))
        blk = params.blocks[0]
        rows, _ = part_attention(Tensor(z), blk, 1, regions)
        for i, region in enumerate(regions.regions):
            allowed = [1 + i] + [1 + cfg.num_parts + t for t in region]
            expected = masked_dense_oracle(
                z[0], blk.wq.data, blk.bq.data, blk.wk.data, blk.bk.data,
                blk.wv.data, blk.bv.data, query_row=1 + i, allowed=allowed)
            np.testing.assert_allclose(rows.data[0, i], expected, atol=1e-10)

    def test_out_of_region_weight_is_exactly_zero(self):
        cfg = toy_config(blocks=1)
        params = init_encoder_params(cfg, seed=9)
        regions = default_part_regions(cfg.grid_h, cfg.grid_w, cfg.num_parts)
        img = np.random.default_rng(6).random(
            (1, cfg.channels, cfg.image_h, cfg.image_w)).astype(np.float32)
        out = encoder_forward(img, params, regions, cfg, retain_attention=True)
        for i, region in enumerate(regions.regions):
            probs = out.attention[0].part_probs[i][0]  # [heads, 1, 1+|R|]
            full = np.zeros((cfg.heads, cfg.seq_len))
            full[:, 1 + i] = probs[:, 0, 0]
            cols = [1 + cfg.num_parts + t for t in region]
            full[:, cols] = probs[:, 0, 1:]
            outside = np.delete(full, [1 + i] + cols, axis=1)
            assert np.all(outside == 0.0)
            np.testing.assert_allclose(full.sum(axis=1), 1.0, atol=1e-6)

    def test_out_of_region_pixels_leave_part_feature_bitwise_unchanged(self):
        cfg = toy_config(blocks=1)
        params = init_encoder_params(cfg, seed=10)
        regions = default_part_regions(cfg.grid_h, cfg.grid_w, cfg.num_parts)
        rng = np.random.default_rng(7)
        img = rng.random((1, cfg.channels, cfg.image_h, cfg.image_w)).astype(np.float32)
        bumped = img.copy()
        bumped[:, :, 56:, :] += 0.25  # bottom pixel row block: grid row 7, outside regions 1 and 2
        base = encoder_forward(img, params, regions, cfg)
        pert = encoder_forward(bumped, params, regions, cfg)
        assert base.local_feats[0].data.tobytes() == pert.local_feats[0].data.tobytes()
        assert base.local_feats[1].data.tobytes() == pert.local_feats[1].data.tobytes()
        assert not np.array_equal(base.local_feats[2].data, pert.local_feats[2].data)
        assert not np.array_equal(base.global_feat.data, pert.global_feat.data)


class TestEncoderForward:
    def test_zero_blocks_is_identity_on_tokens(self):
        cfg = micro_config(blocks=0)
        params = init_encoder_params(cfg, seed=11)
        regions = default_part_regions(cfg.grid_h, cfg.grid_w, cfg.num_parts)
        img = np.random.default_rng(8).random(
            (1, cfg.channels, cfg.image_h, cfg.image_w)).astype(np.float32)
        tokens = assemble_tokens(img, params, cfg).data
        out = encoder_forward(img, params, regions, cfg)
        np.testing.assert_array_equal(out.global_feat.data[0], tokens[0, 0])
        for i in range(cfg.num_parts):
            np.testing.assert_array_equal(out.local_feats[i].data[0], tokens[0, 1 + i])

    def test_swapping_tokens_outside_two_regions_preserves_their_features(self):
        cfg = toy_config(blocks=1)
        params = init_encoder_params(cfg, seed=12)
        regions = default_part_regions(cfg.grid_h, cfg.grid_w, cfg.num_parts)
        rng = np.random.default_rng(9)
        img = rng.random((1, cfg.channels, cfg.image_h, cfg.image_w)).astype(np.float32)
        swapped = img.copy()
        # swap two bottom-row patches (grid row 7): members of region 3 only
        swapped[:, :, 56:, 0:8], swapped[:, :, 56:, 8:16] = (
            img[:, :, 56:, 8:16].copy(), img[:, :, 56:, 0:8].copy())
        base = encoder_forward(img, params, regions, cfg)
        pert = encoder_forward(swapped, params, regions, cfg)
        assert base.local_feats[0].data.tobytes() == pert.local_feats[0].data.tobytes()
        assert base.local_feats[1].data.tobytes() == pert.local_feats[1].data.tobytes()
        assert not np.array_equal(base.local_feats[2].data, pert.local_feats[2].data)

    def test_batch_equals_concatenated_singles(self):
        cfg = micro_config(blocks=2)
        params = init_encoder_params(cfg, seed=13)
        regions = default_part_regions(cfg.grid_h, cfg.grid_w, cfg.num_parts)
        rng = np.random.default_rng(10)
        batch = rng.random((3, cfg.channels, cfg.image_h, cfg.image_w)).astype(np.float32)
        joint = encoder_forward(batch, params, regions, cfg)
        for s in range(3):
            single = encoder_forward(batch[s : s + 1], params, regions, cfg)
            np.testing.assert_allclose(joint.global_feat.data[s],
                                       single.global_feat.data[0], atol=1e-6)
            for i in range(cfg.num_parts):
                np.testing.assert_allclose(joint.local_feats[i].data[s],
                                           single.local_feats[i].data[0], atol=1e-6)

    def test_sequence_length_invariant(self):
        cfg = toy_config()
        params = init_encoder_params(cfg, seed=14)
        img = np.zeros((2, cfg.channels, cfg.image_h, cfg.image_w), np.float32)
        tokens = assemble_tokens(img, params, cfg)
        assert tokens.shape == (2, cfg.num_patches + 1 + cfg.num_parts, cfg.embed_dim)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_activation_names_block(self):
        cfg = micro_config(blocks=2)
        params = init_encoder_params(cfg, seed=15)
        params.blocks[1].ffn_w2.data = np.full_like(params.blocks[1].ffn_w2.data, 1e30)
        params.blocks[1].ffn_w1.data = np.full_like(params.blocks[1].ffn_w1.data, 1e30)
        regions = default_part_regions(cfg.grid_h, cfg.grid_w, cfg.num_parts)
        img = np.random.default_rng(11).random(
            (1, cfg.channels, cfg.image_h, cfg.image_w)).astype(np.float32)
        with pytest.raises(NumericalError, match="block 1"):
            encoder_forward(img, params, regions, cfg)

    def test_full_forward_gradient_matches_finite_differences(self):
        cfg = micro_config()
        regions = default_part_regions(cfg.grid_h, cfg.grid_w, cfg.num_parts)
        ref = init_encoder_params(cfg, seed=16, dtype=np.float64)
        names = list(ref.named().keys())
        arrays = [ref.named()[n].data for n in names]
        rng = np.random.default_rng(12)
        images = rng.random((2, cfg.channels, cfg.image_h, cfg.image_w))
        labels = np.array([0, 2])

        def loss_op(*leaves):
            params = params_from_named(cfg, dict(zip(names, leaves)))
            out = encoder_forward(images, params, regions, cfg)
            loss = ad.cross_entropy(out.logits, labels)
            for lf in out.local_feats:
                loss = ad.add(loss, ad.scale(ad.reduce_sum(ad.mul(lf, lf)), 0.05))
            return loss

        err = ad.finite_diff_check(loss_op, arrays, max_coords=6, seed=99, name="encoder")
        assert err <= 1e-4


class TestFusedAttentionMap:
    def _forward(self, blocks=1, heads=1):
        cfg = toy_config(blocks=blocks, heads=heads)
        params = init_encoder_params(cfg, seed=17)
        regions = default_part_regions(cfg.grid_h, cfg.grid_w, cfg.num_parts)
        img = np.random.default_rng(13).random(
            (1, cfg.channels, cfg.image_h, cfg.image_w)).astype(np.float32)
        return cfg, regions, encoder_forward(img, params, regions, cfg, retain_attention=True)

    def test_part_map_zero_outside_region(self):
        cfg, regions, out = self._forward(blocks=2, heads=2)
        m = fused_attention_map(out, "p1", cfg, regions)
        assert m.shape == (cfg.grid_h, cfg.grid_w)
        rows_in = {t // cfg.grid_w for t in regions.regions[0]}
        for r in range(cfg.grid_h):
            if r not in rows_in:
                assert np.all(m[r] == 0.0)

    def test_single_block_single_head_equals_raw_row(self):
        cfg, regions, out = self._forward(blocks=1, heads=1)
        m = fused_attention_map(out, "cls", cfg, regions)
        raw = out.attention[0].global_probs[0, 0, 0, 1:].reshape(cfg.grid_h, cfg.grid_w)
        np.testing.assert_array_equal(m, raw)

    def test_matches_hand_average_of_retained_blocks(self):
        cfg, regions, out = self._forward(blocks=4, heads=2)
        m = fused_attention_map(out, "cls", cfg, regions)
        byhand = np.mean(
            [blk.global_probs[0, :, 0, 1:].mean(axis=0) for blk in out.attention[:2]], axis=0
        ).reshape(cfg.grid_h, cfg.grid_w)
        np.testing.assert_allclose(m, byhand, atol=1e-6)

    def test_requires_retained_attention(self):
        cfg = micro_config()
        params = init_encoder_params(cfg, seed=18)
        regions = default_part_regions(cfg.grid_h, cfg.grid_w, cfg.num_parts)
        img = np.zeros((1, cfg.channels, cfg.image_h, cfg.image_w), np.float32)
        out = encoder_forward(img, params, regions, cfg)
        with pytest.raises(StateError):
            fused_attention_map(out, "cls", cfg, regions)
