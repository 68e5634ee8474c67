import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attention_oracle import dense_attention, grid_covering_plan, sampled_attention
from roidepth.attention import (
    AttentionConfig,
    AttentionLayer,
    AttentionLayerParams,
    RoiFormerBlock,
    deformable_attention,
    dense_attention_weights,
    dense_cross_attention,
    generate_roi,
    multi_head_merge,
    roi_attention,
    roi_extents,
    roi_sample_positions,
    roiformer_block,
)
from roidepth.tensor import Parameter, ShapeError, conv2d_3x3, count_taps, elu


def random_params(rng, c, heads, points, variant, scale=0.5):
    p = AttentionLayerParams.init(c, heads, points, variant, rng, np.float64)
    for par in p.named().values():
        par.value[...] = rng.normal(size=par.shape) * scale
    return p


class TestDense:
    def test_identical_keys_share_weight(self):
        rng = np.random.default_rng(0)
        p = random_params(rng, 4, 1, 1, "dense")
        guidance = np.repeat(rng.normal(size=(4, 1, 1)), 2, axis=2)
        w = dense_attention_weights(rng.normal(size=(4, 2, 2)), guidance, p)
        np.testing.assert_allclose(w, 0.5)

    def test_single_key(self):
        rng = np.random.default_rng(1)
        c = 4
        p = random_params(rng, c, 2, 1, "dense")
        p.w_o.value[...] = np.eye(c)
        p.b_o.value[...] = 0
        g = rng.normal(size=(c, 1, 1))
        out = dense_cross_attention(rng.normal(size=(c, 3, 2)), g, p, heads=2)
        v = g[:, 0, 0] @ p.w_v.value + p.b_v.value
        np.testing.assert_allclose(out, np.broadcast_to(v[:, None, None], out.shape), atol=1e-12)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(2)
        p = random_params(rng, 8, 2, 1, "dense")
        q, g = rng.normal(size=(8, 3, 4)), rng.normal(size=(8, 5, 3))
        np.testing.assert_allclose(dense_cross_attention(q, g, p, heads=2), dense_attention(q, g, p, 2), atol=1e-10)


class TestDeformable:
    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(3)
        p = random_params(rng, 8, 2, 3, "deformable")
        q, g = rng.normal(size=(8, 4, 4)), rng.normal(size=(8, 6, 6))
        out = deformable_attention(q, g, p, heads=2, points=3)
        np.testing.assert_allclose(out, sampled_attention(q, g, p, "deformable", 2, 3), atol=1e-10)

    def test_zero_offset_single_point_reads_own_position(self):
        rng = np.random.default_rng(4)
        c = 4
        p = random_params(rng, c, 2, 1, "deformable")
        g = rng.normal(size=(c, 3, 3))
        out = deformable_attention(rng.normal(size=(c, 3, 3)), g, p, 2, 1, raw_offsets=np.zeros((9, 2, 1, 2)))
        v = np.einsum("chw,cd->dhw", g, p.w_v.value) + p.b_v.value[:, None, None]
        expected = np.einsum("dhw,de->ehw", v, p.w_o.value) + p.b_o.value[:, None, None]
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_uniform_weights_over_grid_mean_pool(self):
        rng = np.random.default_rng(5)
        c, hg, wg = 4, 3, 3
        p = random_params(rng, c, 1, 9, "deformable")
        p.w_o.value[...] = np.eye(c)
        p.b_o.value[...] = 0
        g = rng.normal(size=(c, hg, wg))
        q = rng.normal(size=(c, 2, 2))
        ref = np.array([[(j + 0.5) * wg / 2 - 0.5, (i + 0.5) * hg / 2 - 0.5] for i in range(2) for j in range(2)])
        keys = np.array([[x, y] for y in range(hg) for x in range(wg)], dtype=float)
        offsets = (keys[None] - ref[:, None])[:, None]  # (Q,1,K,2)
        weights = np.full((4, 1, 9), 1 / 9)
        out = deformable_attention(q, g, p, 1, 9, raw_offsets=offsets, weights=weights)
        v = np.einsum("chw,cd->dhw", g, p.w_v.value) + p.b_v.value[:, None, None]
        np.testing.assert_allclose(out, np.broadcast_to(v.mean(axis=(1, 2))[:, None, None], out.shape), atol=1e-12)


class TestRoi:
    def test_zero_raw_gives_midpoint_box(self):
        sides, _ = roi_extents(np.zeros(4), (0.3, 0.3), (0.7, 0.7))
        np.testing.assert_allclose(sides, 0.25)

    def test_saturated_raw_gives_max(self):
        box = generate_roi(np.ones(4), Parameter(np.full((4, 4), 1e3)), Parameter(np.zeros(4)), (0.3, 0.3), (0.7, 0.7))[0]
        assert box.width == pytest.approx(0.7)
        assert box.height == pytest.approx(0.7)

    @settings(max_examples=50)
    @given(st.integers(0, 100_000), st.floats(0.05, 0.5), st.floats(0.0, 0.5))
    def test_extent_and_containment(self, seed, lo, span):
        rng = np.random.default_rng(seed)
        r_min, r_max = (lo, lo), (lo + span, lo + span)
        raw = rng.normal(size=(50, 2, 4)) * 10
        sides, _ = roi_extents(raw, r_min, r_max)
        w = sides[..., 0] + sides[..., 2]
        assert np.all((w >= r_min[0] - 1e-12) & (w <= r_max[0] + 1e-12))
        ref = rng.uniform(0, 10, size=(50, 2))
        px = sides * 16
        pos, _, _ = roi_sample_positions(ref, px, rng.normal(size=(50, 2, 5, 2)) * 20)
        lo_x = ref[:, None, None, 0] - px[:, :, None, 0]
        hi_x = ref[:, None, None, 0] + px[:, :, None, 2]
        assert np.all((pos[..., 0] >= lo_x - 1e-9) & (pos[..., 0] <= hi_x + 1e-9))

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(6)
        cfg = AttentionConfig(heads=2, points=3)
        p = random_params(rng, 8, 2, 3, "roi")
        q, g = rng.normal(size=(8, 4, 4)), rng.normal(size=(8, 8, 8))
        out = roi_attention(q, g, p, cfg)
        np.testing.assert_allclose(out, sampled_attention(q, g, p, "roi", 2, 3, residual=True), atol=1e-10)

    def test_single_point_symmetric_box_reads_query(self):
        rng = np.random.default_rng(7)
        c = 4
        cfg = AttentionConfig(heads=1, points=1)
        p = random_params(rng, c, 1, 1, "roi")
        q, g = rng.normal(size=(c, 3, 3)), rng.normal(size=(c, 3, 3))
        boxes = np.ones((9, 1, 4))
        out = roi_attention(q, g, p, cfg, raw_offsets=np.zeros((9, 1, 1, 2)), boxes=boxes)
        v = np.einsum("chw,cd->dhw", g, p.w_v.value) + p.b_v.value[:, None, None]
        merged = np.einsum("dhw,de->ehw", v, p.w_o.value) + p.b_o.value[:, None, None]
        pre = q + merged
        mu = pre.mean(axis=0)
        sd = np.sqrt(pre.var(axis=0) + 1e-5)
        expected = (pre - mu) / sd * p.ln_g.value[:, None, None] + p.ln_b.value[:, None, None]
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_grid_mode_reproduces_dense(self):
        rng = np.random.default_rng(8)
        c, heads = 8, 2
        p_roi = random_params(rng, c, heads, 16, "roi")
        p_dense = random_params(rng, c, heads, 1, "dense")
        p_dense.w_v, p_dense.b_v, p_dense.w_o, p_dense.b_o = p_roi.w_v, p_roi.b_v, p_roi.w_o, p_roi.b_o
        q, g = rng.normal(size=(c, 3, 3)), rng.normal(size=(c, 4, 4))
        probs = dense_attention_weights(q, g, p_dense, heads)  # (M,Q,K)
        boxes, raw = grid_covering_plan(3, 3, 4, 4, heads)
        cfg = AttentionConfig(heads=heads, points=16)
        out = roi_attention(q, g, p_roi, cfg, residual=False, boxes=boxes, raw_offsets=raw, weights=probs.transpose(1, 0, 2))
        np.testing.assert_allclose(out, dense_cross_attention(q, g, p_dense, heads), atol=1e-10)


class TestTapCounts:
    @pytest.mark.parametrize("size", [8, 64])
    @pytest.mark.parametrize("variant", ["roi", "deformable"])
    def test_sampled_taps_independent_of_map(self, variant, size):
        rng = np.random.default_rng(0)
        cfg = AttentionConfig(heads=4, points=8, variant=variant)
        layer = AttentionLayer(AttentionLayerParams.init(16, 4, 8, variant, rng, np.float64), cfg)
        with count_taps() as counter:
            layer.forward(rng.normal(size=(16, 4, 4)), rng.normal(size=(16, size, size)))
        assert counter.per_query == 4 * 8 * 4

    @pytest.mark.parametrize("size", [8, 64])
    def test_dense_taps_scale_with_map(self, size):
        rng = np.random.default_rng(0)
        p = AttentionLayerParams.init(16, 4, 1, "dense", rng, np.float64)
        with count_taps() as counter:
            dense_cross_attention(rng.normal(size=(16, 4, 4)), rng.normal(size=(16, size, size)), p, heads=4)
        assert counter.per_query == size * size


class TestMerge:
    def test_single_head_identity(self):
        u = np.random.default_rng(0).normal(size=(3, 2, 2))
        np.testing.assert_array_equal(multi_head_merge([u], Parameter(np.eye(3))), u)

    def test_stacked_identities_sum_heads(self):
        rng = np.random.default_rng(1)
        u, v = rng.normal(size=(2, 3, 3)), rng.normal(size=(2, 3, 3))
        w = Parameter(np.vstack([np.eye(2), np.eye(2)]))
        np.testing.assert_allclose(multi_head_merge([u, v], w), u + v)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            multi_head_merge([np.zeros((2, 2, 2))], Parameter(np.eye(3)))


class TestBlock:
    @pytest.mark.parametrize("layers", [0, 1, 2, 3])
    def test_shapes_preserved(self, layers):
        rng = np.random.default_rng(layers)
        block = RoiFormerBlock(8, AttentionConfig(heads=2, points=3, layers=layers), rng, np.float64)
        d, s = rng.normal(size=(8, 4, 6)), rng.normal(size=(8, 4, 6))
        od, os_ = roiformer_block(d, s, block)
        assert od.shape == d.shape and os_.shape == s.shape

    def test_zero_layers_is_concat_conv(self):
        rng = np.random.default_rng(9)
        block = RoiFormerBlock(4, AttentionConfig(layers=0), rng, np.float64)
        d, s = rng.normal(size=(4, 3, 3)), rng.normal(size=(4, 3, 3))
        mem = elu(conv2d_3x3(np.concatenate([d, s]), block.mem_w, block.mem_b))
        od, os_ = block.forward(d, s)
        np.testing.assert_allclose(od, d + mem)
        np.testing.assert_allclose(os_, s + mem)

    def test_default_two_layers(self):
        assert AttentionConfig().layers == 2

    def test_tied_branches_share_parameters(self):
        rng = np.random.default_rng(0)
        tied = RoiFormerBlock(8, AttentionConfig(heads=2, tie_branches=True), rng)
        free = RoiFormerBlock(8, AttentionConfig(heads=2), rng)
        assert len(free.parameters()) - 2 == 2 * (len(tied.parameters()) - 2)

    def test_mismatched_inputs(self):
        block = RoiFormerBlock(4, AttentionConfig(layers=1, heads=2), np.random.default_rng(0))
        with pytest.raises(ShapeError):
            block.forward(np.zeros((4, 2, 2)), np.zeros((4, 2, 3)))


class TestConfig:
    @pytest.mark.parametrize(
        "kwargs",
        [{"heads": 0}, {"layers": -1}, {"r_min": (0.8, 0.3)}, {"variant": "global"}, {"levels": ("P9",)}],
    )
    def test_rejects_invalid(self, kwargs):
        with pytest.raises(ValueError):
            AttentionConfig(**kwargs)

    def test_heads_must_divide_channels(self):
        with pytest.raises(ValueError):
            AttentionLayerParams.init(6, 4, 2, "roi", np.random.default_rng(0))
