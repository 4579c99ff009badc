import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from weatherfuse.bafam import (
    AttentionMaps,
    B2aCascade,
    B2aParams,
    BevFeature,
    CaafParams,
    alignment_loss,
    b2a_align,
    b2a_stage,
    build_supervision,
    caaf_fuse,
    cross_attention,
    offsets_to_grid,
)
from weatherfuse.numerics import ConvStack, FunctionMap, LinearMap, grad_check, grid_sample_bilinear, identity_grid, make_rng


def eye_maps(c):
    eye = np.concatenate([np.eye(c).ravel(), np.zeros(c)])
    return AttentionMaps(*(LinearMap(c, c, params=eye) for _ in range(3)), None)


def zero_net(c_in):
    return ConvStack([c_in, 2], n_inputs=2)


class TestCrossAttention:
    def test_single_kv_token(self):
        maps = AttentionMaps.build(3, 4, make_rng(0))
        q = make_rng(1).normal(size=(5, 3))
        kv = make_rng(2).normal(size=(1, 3))
        out = cross_attention(q, kv, kv, maps, 2)
        np.testing.assert_allclose(out, np.tile(maps.o(maps.v(kv)), (5, 1)), atol=1e-12)

    def test_zero_query_averages_values(self):
        maps = AttentionMaps.build(3, 4, make_rng(3))
        maps.q = LinearMap(3, 4)
        kv = make_rng(4).normal(size=(6, 3))
        out = cross_attention(np.ones((2, 3)), kv, kv, maps, 1)
        np.testing.assert_allclose(out, np.tile(maps.o(maps.v(kv).mean(axis=0, keepdims=True)), (2, 1)), atol=1e-12)

    def test_two_tokens_by_hand(self):
        maps = eye_maps(1)
        out = cross_attention([[1.0]], [[0.0], [math.log(2.0)]], [[3.0], [6.0]], maps, 1)
        # scores 0 and ln2 -> weights 1/3, 2/3 after exp(ln2 * 1) = 2
        w1 = 1 / (1 + math.exp(math.log(2.0)))
        assert out[0, 0] == pytest.approx(w1 * 3 + (1 - w1) * 6)

    def test_bad_heads(self):
        with pytest.raises(ValueError):
            cross_attention(np.ones((1, 3)), np.ones((1, 3)), np.ones((1, 3)), AttentionMaps.build(3, 4), 3)


class TestCaaf:
    def test_zero_params(self):
        rng = make_rng(5)
        fc, fl = rng.normal(size=(2, 4, 8, 8))
        out = caaf_fuse(BevFeature(fc, "camera"), BevFeature(fl, "lidar"), CaafParams.build(4))
        assert np.array_equal(out.data, fc + fl) and out.modality == "fused"

    def test_zero_camera(self):
        fl = make_rng(6).normal(size=(4, 8, 8))
        assert np.array_equal(caaf_fuse(np.zeros_like(fl), fl, CaafParams.build(4)).data, fl)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            caaf_fuse(np.zeros((4, 8, 8)), np.zeros((4, 8, 6)), CaafParams.build(4))

    @settings(max_examples=5, deadline=None)
    @given(st.integers(0, 10_000), st.sampled_from([(8, 8), (6, 10), (3, 5)]), st.sampled_from([(8, 8), (4, 4), (2, 3)]))
    def test_matches_oracle(self, seed, hw, pool):
        rng = make_rng(seed)
        p = CaafParams.build(4, dim=8, heads=2, pool=pool, hidden=6, rng=rng, scale=0.5)
        fc, fl = rng.normal(size=(2, 4) + hw)
        got = caaf_fuse(fc, fl, p).data
        assert np.max(np.abs(got - oracles.caaf(fc, fl, p))) < 1e-9


class TestOffsets:
    def test_zero_is_identity(self):
        np.testing.assert_array_equal(offsets_to_grid(np.zeros((2, 5, 7))), identity_grid(5, 7))

    def test_one_cell_shift(self):
        ramp = np.tile(np.arange(6.0), (1, 4, 1))
        off = np.zeros((2, 4, 6))
        off[0] = 1.0
        out = grid_sample_bilinear(ramp, offsets_to_grid(off))
        np.testing.assert_allclose(out[0, :, :5], ramp[0, :, 1:], atol=1e-12)
        # the last column is clamped back onto the border
        np.testing.assert_allclose(out[0, :, 5], 5.0, atol=1e-12)

    def test_huge_offsets_clamped(self):
        grid = offsets_to_grid(np.full((2, 3, 3), 1e6))
        assert grid.max() == 1.0


class TestB2a:
    def test_zero_offsets_self_weight(self):
        a = make_rng(7).normal(size=(3, 5, 5))
        out, off = b2a_stage(np.zeros((2, 5, 5)), a, zero_net(5), ConvStack.identity(3))
        assert np.array_equal(out, a * a) and not off.any()

    def test_constant_feature(self):
        a = np.full((2, 4, 4), 1.5)
        out, _ = b2a_stage(a, a, zero_net(4), ConvStack.identity(2))
        np.testing.assert_allclose(out, 2.25)

    def test_hand_two_by_two(self):
        a = np.array([[[1.0, 2.0], [3.0, 4.0]]])

        def shift(q, x):
            off = np.zeros((2, 2, 2))
            off[0] = 0.5
            return off

        out, _ = b2a_stage(a, a, FunctionMap(shift), ConvStack.identity(1))
        # column 0 samples halfway to column 1; column 1 clamps onto itself
        np.testing.assert_allclose(out[0], [[1.0 * 1.5, 2.0 * 2.0], [3.0 * 3.5, 4.0 * 4.0]])

    def test_identity_cascade_squares_lidar(self):
        rng = make_rng(8)
        fl, fc = rng.normal(size=(2, 3, 6, 6))
        twin = make_rng(8)
        twin.normal(size=(2, 3, 6, 6))
        res = b2a_align(fl, fc, B2aParams.build(3, 3), rng)
        # inference draws nothing
        assert rng.random() == twin.random()
        assert np.array_equal(res.aligned.data, fl * fl)
        assert np.array_equal(res.intermediate, fl)

    def test_train_mode_reproducible(self):
        p = B2aParams.build(2, 2, rng=make_rng(9))
        fl, fc = make_rng(10).normal(size=(2, 2, 6, 6))
        a = b2a_align(fl, fc, p, make_rng(11), train_mode=True)
        b = b2a_align(fl, fc, p, make_rng(11), train_mode=True)
        assert a.shift == b.shift and np.array_equal(a.aligned.data, b.aligned.data)
        with pytest.raises(ValueError):
            b2a_align(fl, fc, p, None, train_mode=True)

    @settings(max_examples=5, deadline=None)
    @given(st.integers(0, 10_000))
    def test_matches_oracle(self, seed):
        rng = make_rng(seed)
        p = B2aParams.build(4, 4, hidden=4, rng=rng, scale=0.3)
        fl, fc = rng.normal(size=(2, 4, 8, 8))
        res = b2a_align(fl, fc, p)
        lidar, inter = oracles.b2a(fl, fc, p)
        assert np.max(np.abs(res.aligned.data - lidar)) < 1e-9
        assert np.max(np.abs(res.intermediate - inter)) < 1e-9


class TestSupervisionAndLoss:
    def test_select_lidar(self):
        p = B2aParams.build(2, 3)
        fl = make_rng(12).normal(size=(3, 4, 4))
        fc = make_rng(13).normal(size=(2, 4, 4))
        assert np.array_equal(build_supervision(fl, fc, p.supervision), fl)

    def test_random_map_channels(self):
        p = B2aParams.build(2, 3, rng=make_rng(14))
        fl = make_rng(15).normal(size=(3, 4, 4))
        fc = make_rng(16).normal(size=(2, 4, 4))
        out = build_supervision(fl, fc, p.supervision)
        assert out.shape == fl.shape and np.array_equal(out, build_supervision(fl, fc, p.supervision))

    def test_loss_weights(self):
        fs = np.zeros((1, 2, 2))
        assert alignment_loss(fs, fs, fs) == 0.0
        assert alignment_loss(fs, fs + 1.0, fs) == pytest.approx(0.3, abs=1e-15)
        assert alignment_loss(fs, fs, fs + 1.0) == pytest.approx(0.7, abs=1e-15)

    def test_grad_check_through_cascade(self):
        p = B2aParams.build(2, 2, hidden=3, rng=make_rng(17), scale=0.3)
        cascade = B2aCascade(p)
        rng = make_rng(18)
        fl, fc, fs = rng.normal(size=(3, 2, 5, 5))

        def loss(out):
            v, (g1, g2) = alignment_loss(fs, out[:2], out[2:], return_grad=True)
            return v, np.concatenate([g1, g2])

        assert grad_check(cascade, loss, (fl, fc)) < 1e-4
