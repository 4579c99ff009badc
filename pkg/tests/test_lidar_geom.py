import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from weatherfuse.lidar_geom import (
    FULL_SCALE_VOXEL,
    BevExtent,
    ProjectionConfig,
    RangeImage,
    azimuth_to_column,
    bev_shape,
    empty_cloud,
    project,
    quantization_bound,
    unproject,
    voxelize_bev,
)
from weatherfuse.numerics import make_rng

SYM64 = ProjectionConfig(64, 64, -math.radians(10), math.radians(10))


def random_cloud(rng, n, cfg=ProjectionConfig()):
    r = rng.uniform(1.0, 80.0, n)
    phi = rng.uniform(-math.pi, math.pi, n)
    theta = rng.uniform(cfg.theta_min, cfg.theta_max, n)
    xyz = np.column_stack([r * np.cos(theta) * np.cos(phi), r * np.cos(theta) * np.sin(phi), r * np.sin(theta)])
    return np.column_stack([xyz, rng.random(n)])


class TestProject:
    def test_forward_axis_hits_centre(self):
        ri = project([[1.0, 0.0, 0.0, 0.5]], SYM64)
        assert ri.valid[32, 32] and ri.valid.sum() == 1
        assert ri.range[32, 32] == 1.0 and ri.intensity[32, 32] == 0.5

    def test_just_below_minus_pi(self):
        # phi = -pi + 1e-9: u = floor((1 + 1 - tiny) * 32) = 63
        ri = project([[-1.0, -1e-9, 0.0, 0.0]], SYM64)
        assert np.argwhere(ri.valid).tolist() == [[32, 63]]

    def test_nearest_wins(self):
        ri = project([[9.0, 0.0, 0.0, 0.1], [5.0, 0.0, 0.0, 0.7]], SYM64)
        assert ri.range[32, 32] == 5.0 and ri.intensity[32, 32] == 0.7

    def test_empty(self):
        ri = project(empty_cloud(), SYM64)
        assert not ri.valid.any()

    def test_out_of_band_dropped(self):
        assert not project([[1.0, 0.0, 1.0, 0.0]], SYM64).valid.any()

    @given(st.floats(-math.pi + 1e-6, math.pi - 1e-6))
    def test_wrap(self, phi):
        assert azimuth_to_column(phi, 512) == azimuth_to_column(phi + 2 * math.pi, 512)

    @settings(max_examples=20)
    @given(st.integers(0, 10_000), st.integers(1, 400))
    def test_valid_count_bounded(self, seed, n):
        pts = random_cloud(make_rng(seed), n)
        assert project(pts, ProjectionConfig()).valid.sum() <= n


class TestUnproject:
    def test_all_invalid(self):
        assert unproject(RangeImage.empty(SYM64)).shape == (0, 4)

    def test_single_pixel(self):
        ri = RangeImage.empty(SYM64)
        ri.range[32, 32] = 10.0
        ri.valid[32, 32] = True
        p = unproject(ri)[0]
        assert np.linalg.norm(p[:3]) == 10.0
        # pixel centre is half a pixel right/up of the optical axis
        half_az = math.pi / 64
        half_el = SYM64.fov / 128
        assert p[0] == pytest.approx(10 * math.cos(half_el) * math.cos(half_az), abs=1e-12)
        assert p[1] == pytest.approx(-10 * math.cos(half_el) * math.sin(half_az), abs=1e-12)
        assert p[2] == pytest.approx(-10 * math.sin(half_el), abs=1e-12)

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 10_000))
    def test_round_trip_idempotent_and_bounded(self, seed):
        cfg = ProjectionConfig()
        pts = random_cloud(make_rng(seed), 2000)
        ri, idx = project(pts, cfg, return_index=True)
        back = unproject(ri)
        assert project(back, cfg) == ri
        # ranges are stored exactly
        rows, cols = np.nonzero(ri.valid)
        np.testing.assert_array_equal(np.linalg.norm(back[:, :3], axis=1), ri.range[rows, cols])
        src = pts[idx[rows, cols], :3]
        err = np.linalg.norm(back[:, :3] - src, axis=1)
        assert np.all(err <= quantization_bound(cfg, ri.range[rows, cols]) * (1 + 1e-9))


class TestBev:
    def test_shape(self):
        assert bev_shape(BevExtent(), FULL_SCALE_VOXEL) == (820, 820)
        assert bev_shape(BevExtent(), (0.32, 0.32, 0.1)) == (128, 128)

    def test_empty(self):
        g = voxelize_bev(empty_cloud(), BevExtent(), (0.32, 0.32, 0.1))
        assert not g.features.any()

    def test_single_point_at_centre(self):
        e = BevExtent()
        c = [(e.x_min + e.x_max) / 2, (e.y_min + e.y_max) / 2, 0.0, 0.5]
        g = voxelize_bev([c], e, (0.32, 0.32, 0.1))
        assert np.count_nonzero(g.features.any(axis=0)) == 1

    def test_mean_intensity(self):
        g = voxelize_bev([[10.0, 0.01, 0.0, 0.2], [10.01, 0.02, 0.0, 0.4]], BevExtent(), (0.32, 0.32, 0.1))
        nz = np.argwhere(g.features[0] > 0)
        assert len(nz) == 1
        assert g.features[1][tuple(nz[0])] == pytest.approx(0.3)

    def test_degenerate_extent(self):
        with pytest.raises(ValueError):
            BevExtent(x_min=1.0, x_max=1.0)

    @settings(max_examples=20)
    @given(st.integers(0, 10_000))
    def test_permutation_invariant(self, seed):
        rng = make_rng(seed)
        pts = np.column_stack([rng.uniform(0, 40, 300), rng.uniform(-20, 20, 300), rng.uniform(-1.5, 1, 300), rng.random(300)])
        a = voxelize_bev(pts, BevExtent(), (0.64, 0.64, 0.1)).features
        b = voxelize_bev(pts[rng.permutation(300)], BevExtent(), (0.64, 0.64, 0.1)).features
        assert np.array_equal(a, b)
