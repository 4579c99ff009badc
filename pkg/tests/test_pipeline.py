import dataclasses
import json

import numpy as np
import pytest

from weatherfuse.evaluation import Box3D, ap_r40
from weatherfuse.lidar_geom import BevExtent, ProjectionConfig, voxelize_bev
from weatherfuse.numerics import make_rng
from weatherfuse.pipeline import PipelineConfig, run_pipeline, synth_scene
from weatherfuse.pipeline import io, run
from weatherfuse.pipeline.cli import main
from weatherfuse.pipeline.config import DESK_VOXEL
from weatherfuse.pipeline.synth import GROUND_Z, car_points, points_in_box


class TestSynth:
    def test_empty_scene(self):
        f = synth_scene(0, 0)
        assert f.gt == [] and f.gt2d == []
        assert np.all(f.points[:, 2] == GROUND_Z)

    def test_deterministic(self):
        a, b = synth_scene(3, 4), synth_scene(3, 4)
        assert np.array_equal(a.points, b.points) and np.array_equal(a.image, b.image) and a.gt == b.gt

    def test_frames_differ(self):
        assert synth_scene(3, 4, frame_id=0).gt != synth_scene(3, 4, frame_id=1).gt

    @pytest.mark.parametrize("seed", range(5))
    def test_clusters_dense_enough(self, seed):
        f = synth_scene(seed, 4)
        for box in f.gt:
            assert points_in_box(f.points, box).sum() >= 50
            assert box.dims == pytest.approx((3.9, 1.6, 1.56), rel=0.06)

    def test_car_points_inside(self):
        box = Box3D((10.0, 2.0, -0.95), (3.9, 1.6, 1.56), 0.3)
        pts = car_points(box, make_rng(0))
        assert points_in_box(pts, box).all()

    def test_image_in_unit_range(self):
        img = synth_scene(1, 3).image
        assert img.shape == (3, 64, 512) and img.min() >= 0 and img.max() <= 1


class TestConfig:
    def test_defaults_valid(self):
        cfg = PipelineConfig().validate()
        assert tuple(cfg.bev.voxel) == DESK_VOXEL

    def test_round_trip(self):
        cfg = PipelineConfig(seed=5)
        assert PipelineConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg

    def test_unknown_key(self):
        with pytest.raises(ValueError, match="unknown"):
            PipelineConfig.from_dict({"stages": {"restore_imgae": False}})

    def test_bad_values(self):
        with pytest.raises(ValueError):
            PipelineConfig.from_dict({"weather": {"kind": "snow"}})
        with pytest.raises(ValueError):
            PipelineConfig.from_dict({"components": {"caaf": "/nonexistent/params.awtf"}})


class TestHead:
    def test_finds_isolated_cars(self):
        cfg = PipelineConfig()
        gt = [Box3D((15.0, -4.0, -0.95), (3.9, 1.6, 1.56), 0.0), Box3D((25.0, 6.0, -0.95), (3.9, 1.6, 1.56), 1.5)]
        pts = np.vstack([car_points(b, make_rng(i)) for i, b in enumerate(gt)])
        feat = voxelize_bev(pts, BevExtent(), DESK_VOXEL).features
        acfg = run.AnchorConfig(extent=(0.0, 40.96, -20.48, 20.48))
        score, reg = run.occupancy_head(feat, DESK_VOXEL, acfg)
        dets = run.anchor_decode_3d(score, reg, acfg)
        assert len(dets) == 2
        assert ap_r40(dets, gt, cfg.eval.iou_thresh) == 1.0

    def test_empty_map(self):
        acfg = run.AnchorConfig(extent=(0.0, 40.96, -20.48, 20.48))
        score, _ = run.occupancy_head(np.zeros((4, 128, 128)), DESK_VOXEL, acfg)
        assert not score.any()


def small_cfg(**kw):
    cfg = PipelineConfig(n_frames=3, n_objects=3, workers=2)
    cfg.weather.severities = [0]
    return dataclasses.replace(cfg, **kw)


class TestRun:
    def test_severity_zero_is_perfect(self):
        report = run_pipeline(small_cfg())
        assert report.per_condition["fog"][0] == 1.0
        assert report.skipped_frames == []

    def test_deterministic_report(self):
        cfg = small_cfg()
        cfg.weather.severities = [2]
        a = run.report_json(run_pipeline(cfg), cfg)
        b = run.report_json(run_pipeline(cfg), cfg)
        assert a == b

    def test_failing_frame_is_recorded(self, monkeypatch):
        real = run.process_frame

        def flaky(frame, *args, **kw):
            if frame.frame_id == 1:
                raise ValueError("boom")
            return real(frame, *args, **kw)

        monkeypatch.setattr(run, "process_frame", flaky)
        report = run_pipeline(small_cfg())
        assert report.skipped_frames == [{"frame": 1, "condition": "fog/0", "error": "ValueError: boom"}]
        assert report.per_condition["fog"][0] == 1.0

    def test_persisted_tensors_reload(self, tmp_path):
        cfg = small_cfg(n_frames=1, persist=True)
        run_pipeline(cfg, tmp_path)
        d = tmp_path / "frames" / "fog_0" / "000000"
        bev = io.load_tensor(d / "bev_lidar.awtf")
        assert bev.shape == (3, 128, 128) and bev.any()
        assert np.array_equal(bev.astype(np.float32).astype(np.float64), bev)
        assert (d / "image_restored.png").exists() and (d / "range_restored.png").exists()


@pytest.fixture(scope="module")
def scene(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    f = synth_scene(2, 3)
    io.write_velodyne(d / "clean.bin", f.points)
    io.save_tensor(d / "image.awtf", f.image)
    (d / "boxes.txt").write_text("".join(f"{b.cx} {b.cy} {b.w} {b.h}\n" for b in f.gt2d))
    objs = []
    for b in f.gt:
        o = io.box3d_to_kitti(b, with_score=False)
        objs.append(dataclasses.replace(o, bbox=(0.0, 0.0, 100.0, 50.0)))
    io.write_label(d / "gt.txt", objs)
    return d, f


class TestCli:
    def run(self, d, *args):
        return main(["--seed", "1", "--out-dir", str(d / "out"), *args])

    def test_full_chain(self, scene):
        d, f = scene
        out = d / "out"
        assert self.run(d, "project", str(d / "clean.bin")) == 0
        assert io.load_tensor(out / "range.awtf").shape == (3, 64, 512)
        assert self.run(d, "corrupt", "--points", str(d / "clean.bin"), "--image", str(d / "image.awtf"), "--kind", "fog", "--severity", "3") == 0
        assert self.run(d, "restore-image", str(out / "image_corrupted.awtf"), "--clean", str(d / "image.awtf")) == 0
        restored = io.load_tensor(out / "image_restored.awtf")
        assert np.max(np.abs(restored - f.image)) < 1e-6
        code = self.run(d, "restore-points", str(out / "points_corrupted.bin"), "--boxes", str(d / "boxes.txt"), "--clean", str(d / "clean.bin"))
        assert code == 0
        pts = io.read_velodyne(out / "points_restored.bin")
        fc = voxelize_bev(run.image_to_points(restored, ProjectionConfig()), BevExtent(), DESK_VOXEL).features
        fl = voxelize_bev(pts, BevExtent(), DESK_VOXEL).features
        io.save_tensor(d / "bev_c.awtf", fc)
        io.save_tensor(d / "bev_l.awtf", fl)
        assert self.run(d, "fuse", str(d / "bev_c.awtf"), str(d / "bev_l.awtf")) == 0
        assert self.run(d, "detect", str(out / "bev_fused.awtf")) == 0
        assert self.run(d, "eval", "--det", str(out / "detections.txt"), "--gt", str(d / "gt.txt")) == 0
        doc = json.loads((out / "eval.json").read_text())
        assert 0.0 <= doc["AP"] <= 1.0 and doc["frames"] == 1

    def test_demo(self, tmp_path):
        assert main(["--out-dir", str(tmp_path), "demo", "--frames", "1"]) == 0
        doc = json.loads((tmp_path / "report.json").read_text())
        assert set(doc["per_condition"]["fog"]) == {"1", "2", "3", "4", "5"}

    def test_errors_are_nonzero(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text('{"sead": 3}')
        assert main(["--config", str(bad), "--out-dir", str(tmp_path), "demo"]) != 0
        assert not (tmp_path / "report.json").exists()
        junk = tmp_path / "junk.bin"
        junk.write_bytes(b"\0" * 7)
        assert main(["--out-dir", str(tmp_path), "project", str(junk)]) != 0
        assert main(["--out-dir", str(tmp_path), "restore-image", str(junk)]) != 0
        assert main(["no-such-command"]) != 0
