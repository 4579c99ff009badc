import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from weatherfuse.errors import EmptyRegionError
from weatherfuse.lidar_geom import ProjectionConfig, RangeImage, project, unproject
from weatherfuse.numerics import ConvStack, FunctionMap, grad_check, make_rng
from weatherfuse.pcr import (
    Box2D,
    CenterHead,
    HeadOutputs,
    OracleCompensator,
    RestorePatch,
    aux_loss,
    boxes_from_points,
    compose_restore,
    decode_centernet,
    default_perceptual_map,
    extract_region,
    gradient_loss,
    heatmap_targets,
    nms_2d,
    restoration_loss,
    restore_pointcloud,
    upsample_with_mask,
)
from weatherfuse.pipeline.synth import synth_scene


def head_with(heat, size=(0.0, 0.0)):
    H, W = heat.shape
    sz = np.zeros((2, H, W))
    sz[0], sz[1] = size
    return HeadOutputs(heat[None], sz, np.zeros((2, H, W)))


class TestDecode:
    def test_all_zero(self):
        assert decode_centernet(head_with(np.zeros((8, 8)), (2, 2))) == []

    def test_single_cell(self):
        heat = np.zeros((10, 10))
        heat[4, 7] = 0.9
        (b,) = decode_centernet(head_with(heat, (6, 4)))
        assert (b.cx, b.cy, b.w, b.h, b.score) == (7, 4, 6, 4, 0.9)

    def test_adjacent_cells(self):
        heat = np.zeros((10, 10))
        heat[4, 4], heat[4, 5] = 0.9, 0.8
        (b,) = decode_centernet(head_with(heat, (2, 2)))
        assert (b.cx, b.cy) == (4, 4)

    def test_k_max(self):
        heat = np.zeros((10, 10))
        heat[1, 1], heat[5, 5], heat[8, 8] = 0.5, 0.9, 0.7
        boxes = decode_centernet(head_with(heat, (2, 2)), k_max=2)
        assert [b.score for b in boxes] == [0.9, 0.7]


class TestNms:
    def test_identical(self):
        out = nms_2d([Box2D(5, 5, 4, 4, 0.6), Box2D(5, 5, 4, 4, 0.9)])
        assert out == [Box2D(5, 5, 4, 4, 0.9)]

    def test_disjoint(self):
        boxes = [Box2D(0, 0, 2, 2, 0.5), Box2D(10, 10, 2, 2, 0.7)]
        assert len(nms_2d(boxes)) == 2

    def test_hand_chain(self):
        # a-b overlap 0.6, b-c overlap 0.6, a-c overlap 1/3: greedy keeps a and c
        a = Box2D(0.0, 0, 4, 1, 0.9)
        b = Box2D(1.0, 0, 4, 1, 0.8)
        c = Box2D(2.0, 0, 4, 1, 0.7)
        assert oracles.box_iou_2d(a, b) == pytest.approx(0.6)
        assert oracles.box_iou_2d(a, c) == pytest.approx(1 / 3)
        assert nms_2d([a, b, c]) == [a, c] == oracles.nms_subsets([a, b, c], 0.5)

    def test_tie_keeps_input_order(self):
        a, b = Box2D(0, 0, 2, 2, 0.5), Box2D(0.1, 0, 2, 2, 0.5)
        assert nms_2d([a, b]) == [a]
        assert nms_2d([b, a]) == [b]


class TestTargets:
    def test_empty(self):
        t = heatmap_targets([], 8, 8)
        assert not t.heatmap.any() and not t.size.any() and not t.mask.any()

    def test_peak_is_one(self):
        t = heatmap_targets([Box2D(3, 4, 12, 12)], 10, 10)
        assert t.heatmap[0, 4, 3] == 1.0 and t.heatmap.max() == 1.0

    def test_fractional_offset(self):
        t = heatmap_targets([Box2D(4.5, 7.25, 6, 6)], 12, 12)
        assert tuple(t.offset[:, 7, 4]) == (0.5, 0.25)
        assert tuple(t.size[:, 7, 4]) == (6, 6)

    def test_outside_grid(self):
        with pytest.raises(ValueError):
            heatmap_targets([Box2D(20, 2, 2, 2)], 8, 8)

    def test_decode_round_trip(self):
        gt = [Box2D(3.5, 2.25, 6, 4), Box2D(12.0, 9.75, 8, 6)]
        boxes = decode_centernet(heatmap_targets(gt, 16, 16), 0.3)
        got = sorted((b.cx, b.cy, b.w, b.h) for b in boxes)
        assert got == sorted((b.cx, b.cy, b.w, b.h) for b in gt)


class TestAuxLoss:
    def test_optimum_is_tiny(self):
        t = heatmap_targets([Box2D(4.5, 5.25, 6, 6), Box2D(10, 11, 7, 5)], 16, 16)
        assert aux_loss(t, t) < 1e-3
        # the focal term is minimised by a hard 0/1 map, where only the clamp remains
        hard = HeadOutputs(t.mask[None].astype(float), t.size, t.offset)
        assert aux_loss(hard, t) < 1e-8

    def test_nonnegative(self):
        rng = make_rng(0)
        t = heatmap_targets([Box2D(8, 8, 6, 6)], 16, 16)
        pred = HeadOutputs(rng.random((1, 16, 16)), rng.random((2, 16, 16)), rng.random((2, 16, 16)))
        assert aux_loss(pred, t) >= 0

    def test_grad_check_through_head(self):
        head = CenterHead(in_channels=3, hidden=4).init_params(make_rng(1), 0.3)
        feat = make_rng(2).normal(size=(3, 8, 8))
        t = heatmap_targets([Box2D(3, 3, 4, 4), Box2D(6.5, 5.5, 3, 5)], 8, 8)

        def loss(out):
            v, g = aux_loss(CenterHead.split(out), t, return_grad=True)
            return v, CenterHead.pack(g)

        assert grad_check(head, loss, (feat,)) < 1e-4


def small_ri():
    cfg = ProjectionConfig(4, 6, -0.2, 0.2)
    ri = RangeImage.empty(cfg)
    ri.range[:] = np.arange(24, dtype=float).reshape(4, 6) + 1
    ri.valid[:] = True
    return ri


class TestRegions:
    def test_whole_image(self):
        ri = small_ri()
        reg = extract_region(ri, Box2D(2.5, 1.5, 6, 4))
        assert np.array_equal(reg.range, ri.range) and (reg.row0, reg.col0) == (0, 0)

    def test_corner(self):
        ri = small_ri()
        reg = extract_region(ri, Box2D(0.5, 0.5, 2, 2))
        assert np.array_equal(reg.range, [[1, 2], [7, 8]])

    def test_clipped(self):
        reg = extract_region(small_ri(), Box2D(5, 3, 4, 4))
        # rows floor(1.5)=1 .. 4 (clipped from 5), cols 3 .. 6 (clipped from 7)
        assert reg.range.shape == (3, 3) and (reg.row0, reg.col0) == (1, 3)

    def test_no_overlap(self):
        with pytest.raises(EmptyRegionError):
            extract_region(small_ri(), Box2D(30, 30, 2, 2))


class TestUpsampleCompose:
    def test_single(self):
        rp = upsample_with_mask([[5.0]])
        assert np.array_equal(rp.values, [[5, 0], [0, 0]]) and np.array_equal(rp.mask, [[1, 0], [0, 0]])

    def test_nonzero_positions(self):
        rp = upsample_with_mask(np.ones((2, 2)))
        assert np.argwhere(rp.values).tolist() == [[0, 0], [0, 2], [2, 0], [2, 2]]

    @given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 1000))
    def test_sum_preserved(self, h, w, seed):
        x = make_rng(seed).random((h, w))
        assert upsample_with_mask(x).values.sum() == pytest.approx(x.sum())

    def test_all_ones_mask(self):
        v = make_rng(3).random((4, 4))
        assert np.array_equal(compose_restore(RestorePatch(v, np.ones((4, 4))), lambda x: x + 1), v)

    def test_zero_and_constant(self):
        rp = upsample_with_mask(make_rng(4).random((3, 3)))
        assert np.array_equal(compose_restore(rp, np.zeros_like), rp.values * rp.mask)
        out = compose_restore(rp, lambda x: np.full_like(x, 7.0))
        assert np.all(out[rp.mask == 0] == 7.0) and np.array_equal(out[rp.mask == 1], rp.values[rp.mask == 1])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            compose_restore(upsample_with_mask(np.ones((2, 2))), lambda x: np.zeros((3, 3)))


class TestLosses:
    def test_gradient_loss_examples(self):
        gt = np.array([[0.0, 1.0], [0.0, 1.0]])
        assert gradient_loss(np.zeros((2, 2)), gt) == 2.0
        x = make_rng(5).random((5, 5))
        assert gradient_loss(x, x) == 0.0
        assert gradient_loss(x + 3.0, x) == pytest.approx(0.0, abs=1e-12)

    def test_gradient_loss_too_small(self):
        with pytest.raises(ValueError):
            gradient_loss(np.zeros((1, 3)), np.zeros((1, 3)))

    def test_restoration_loss(self):
        fmap = default_perceptual_map()
        rng = make_rng(6)
        gt, gen = rng.random((2, 6, 6))
        assert restoration_loss(gt, gt, fmap) == 0.0
        assert restoration_loss(gen, gt, fmap) >= gradient_loss(gen, gt)

    def test_restoration_grad_check(self):
        fmap = default_perceptual_map()
        gen_net = ConvStack([1, 3, 1], activation="tanh").init_params(make_rng(7), 0.4)
        rng = make_rng(8)
        x, gt = rng.random((2, 1, 6, 6))

        def loss(out):
            v, g = restoration_loss(out[0], gt[0], fmap, return_grad=True)
            return v, g[None]

        assert grad_check(gen_net, loss, (x,)) < 1e-4


CFG = ProjectionConfig(32, 256)


def scene_points():
    return synth_scene(3, 3, CFG).points


class TestRestorePointcloud:
    def test_no_boxes(self):
        pts = scene_points()
        assert np.array_equal(restore_pointcloud(pts, CFG, [], None), unproject(project(pts, CFG)))

    def test_zero_compensator(self):
        pts = scene_points()
        boxes = [Box2D(128, 16, 40, 20)]
        out = restore_pointcloud(pts, CFG, boxes, FunctionMap(np.zeros_like))
        assert np.array_equal(out, unproject(project(pts, CFG)))

    def test_oracle_densifies_and_keeps_originals(self):
        frame = synth_scene(4, 3, CFG)
        rng = make_rng(9)
        sparse = frame.points[rng.random(len(frame.points)) < 0.5]
        boxes = [b for b in frame.gt2d]
        base = unproject(project(sparse, CFG))
        out = restore_pointcloud(sparse, CFG, boxes, OracleCompensator(frame.points, CFG))
        assert len(out) >= len(base)
        kept = {tuple(p) for p in out}
        assert all(tuple(p) in kept for p in base)

    def test_more_boxes_never_fewer_points(self):
        frame = synth_scene(5, 4, CFG)
        comp = OracleCompensator(frame.points, CFG)
        counts = [len(restore_pointcloud(frame.points, CFG, frame.gt2d[:k], comp)) for k in range(len(frame.gt2d) + 1)]
        assert counts == sorted(counts)

    def test_boxes_from_points(self):
        assert boxes_from_points(np.zeros((0, 4)), CFG) is None
        b = boxes_from_points([[10.0, 0.0, -1.0, 0.5]], CFG)
        assert (b.w, b.h) == (1.0, 1.0)


def blob_case(seed, H=16, W=16):
    rng = make_rng(seed)
    heat = np.zeros((H, W))
    yy, xx = np.mgrid[0:H, 0:W]
    for _ in range(rng.integers(0, 9)):
        r, c = rng.integers(0, H), rng.integers(0, W)
        amp = rng.uniform(0.2, 1.0)
        sig = rng.uniform(0.5, 1.5)
        heat = np.maximum(heat, amp * np.exp(-((yy - r) ** 2 + (xx - c) ** 2) / (2 * sig * sig)))
    size = rng.uniform(1, 6, (2, H, W))
    offset = rng.uniform(0, 1, (2, H, W))
    return HeadOutputs(heat[None], size, offset)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 100_000))
def test_decode_matches_brute_force(seed):
    h = blob_case(seed)
    got = decode_centernet(h, 0.3, 6)
    want = oracles.peaks(h.heatmap[0], 0.3, 6)
    expect = [(c + h.offset[0, r, c], r + h.offset[1, r, c], h.size[0, r, c], h.size[1, r, c], s) for r, c, s in want]
    assert [(b.cx, b.cy, b.w, b.h, b.score) for b in got] == expect
    assert oracles.nms_subsets(got, 0.3) == nms_2d(got, 0.3)
