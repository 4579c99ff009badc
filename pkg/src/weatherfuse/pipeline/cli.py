"""Command line interface.

Global options come before the subcommand::

    weatherfuse --seed 7 --out-dir out demo
    weatherfuse --config run.json --out-dir out demo
    weatherfuse --out-dir out project scan.bin

Tensors are read and written in the AWTF container; point clouds in the
KITTI velodyne layout; boxes as KITTI label lines.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np

from ..bafam import BevFeature, b2a_align, caaf_fuse
from ..diffusion_restore import ddim_sample, make_schedule, make_subsequence
from ..errors import FormatError
from ..evaluation import AnchorConfig, anchor_decode_3d, ap_r40_frames, gate_for_level
from ..lidar_geom import project
from ..numerics import make_rng
from ..pcr import Box2D, OracleCompensator, restore_pointcloud
from ..weather_sim import KINDS, WeatherSpec, corrupt_image, corrupt_points
from . import io
from .config import PipelineConfig
from .run import _compensator, _denoiser, load_b2a, load_caaf, occupancy_head, report_json, run_pipeline

REPORT_NAME = "report.json"


class Context:
    def __init__(self, seed, config, out_dir):
        self.cfg = PipelineConfig.load(config) if config else PipelineConfig()
        if seed is not None:
            self.cfg.seed = seed
        self.out = Path(out_dir)

    def path(self, name):
        self.out.mkdir(parents=True, exist_ok=True)
        return self.out / name


@click.group()
@click.option("--seed", type=int, default=None, help="Overrides the config seed.")
@click.option("--config", type=click.Path(exists=True, dir_okay=False), default=None, help="JSON pipeline config.")
@click.option("--out-dir", type=click.Path(file_okay=False), default="weatherfuse_out", show_default=True)
@click.pass_context
def cli(ctx, seed, config, out_dir):
    """Adverse-weather camera/LiDAR restoration, fusion and detection."""
    try:
        ctx.obj = Context(seed, config, out_dir)
    except (ValueError, OSError) as exc:
        raise click.ClickException(f"config: {exc}") from exc


def _echo_written(*paths):
    for p in paths:
        click.echo(str(p))


@cli.command("project")
@click.argument("points", type=click.Path(exists=True, dir_okay=False))
@click.pass_obj
def project_cmd(obj, points):
    """Spherical projection of a velodyne scan to a range image."""
    ri = project(io.read_velodyne(points), obj.cfg.projection.build())
    a, b = obj.path("range.awtf"), obj.path("range.png")
    io.save_tensor(a, io.range_image_tensor(ri))
    io.save_range_png(b, ri)
    _echo_written(a, b)


@cli.command()
@click.option("--points", type=click.Path(exists=True, dir_okay=False))
@click.option("--image", type=click.Path(exists=True, dir_okay=False), help="[3,H,W] AWTF image in [0,1].")
@click.option("--kind", type=click.Choice(KINDS), default=None)
@click.option("--severity", type=click.IntRange(0, 5), default=3, show_default=True)
@click.pass_obj
def corrupt(obj, points, image, kind, severity):
    """Apply synthetic weather to a scan and/or an image."""
    if not points and not image:
        raise click.UsageError("give --points and/or --image")
    spec = WeatherSpec(kind or obj.cfg.weather.kind, severity)
    if points:
        out = obj.path("points_corrupted.bin")
        io.write_velodyne(out, corrupt_points(io.read_velodyne(points), spec, make_rng(obj.cfg.seed, 1)))
        _echo_written(out)
    if image:
        out = obj.path("image_corrupted.awtf")
        io.save_tensor(out, corrupt_image(io.load_tensor(image), spec, make_rng(obj.cfg.seed, 2)))
        _echo_written(out)


@cli.command("restore-image")
@click.argument("image", type=click.Path(exists=True, dir_okay=False))
@click.option("--clean", type=click.Path(exists=True, dir_okay=False), help="Clean image for the oracle denoiser.")
@click.pass_obj
def restore_image(obj, image, clean):
    """Conditional DDIM restoration of a degraded image.

    Uses the denoiser named in the config; ``oracle`` needs --clean.
    """
    d = obj.cfg.diffusion
    sched = make_schedule(d.T, d.beta_start, d.beta_end)
    x_tilde = io.load_tensor(image)
    spec = obj.cfg.components.denoiser
    if spec == "oracle" and not clean:
        raise click.UsageError("the oracle denoiser needs --clean")
    den = _denoiser(spec, io.load_tensor(clean) if clean else x_tilde, sched)
    x_T = make_rng(obj.cfg.seed, 3).standard_normal(x_tilde.shape)
    out = obj.path("image_restored.awtf")
    restored = np.clip(ddim_sample(x_T, x_tilde, make_subsequence(d.T, d.S), den, sched), 0.0, 1.0)
    io.save_tensor(out, restored)
    if restored.ndim == 3 and restored.shape[0] == 3:
        io.save_image_png(obj.path("image_restored.png"), restored)
    _echo_written(out)


def _read_boxes2d(path):
    boxes = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            vals = [float(v) for v in line.split()]
            boxes.append(Box2D(*vals))
        except (TypeError, ValueError) as exc:
            raise io.ParseError(f"bad box line ({exc})", lineno) from None
    return boxes


@cli.command("restore-points")
@click.argument("points", type=click.Path(exists=True, dir_okay=False))
@click.option("--boxes", type=click.Path(exists=True, dir_okay=False), help="Range-image boxes, 'cx cy w h [score]' per line.")
@click.option("--clean", type=click.Path(exists=True, dir_okay=False), help="Clean scan for the oracle compensator.")
@click.pass_obj
def restore_points(obj, points, boxes, clean):
    """Densify a degraded scan inside 2D boxes on the range image."""
    proj = obj.cfg.projection.build()
    spec = obj.cfg.components.compensator
    if spec == "oracle":
        if not clean:
            raise click.UsageError("the oracle compensator needs --clean")
        comp = OracleCompensator(io.read_velodyne(clean), proj)
    else:
        comp = _compensator(spec, None, proj)
    out = obj.path("points_restored.bin")
    io.write_velodyne(out, restore_pointcloud(io.read_velodyne(points), proj, _read_boxes2d(boxes) if boxes else [], comp))
    _echo_written(out)


@cli.command()
@click.argument("camera", type=click.Path(exists=True, dir_okay=False))
@click.argument("lidar", type=click.Path(exists=True, dir_okay=False))
@click.option("--no-align", is_flag=True, help="Stop after the cross-attention fusion.")
@click.pass_obj
def fuse(obj, camera, lidar, no_align):
    """Fuse camera and LiDAR BEV maps, then run the two-stage alignment."""
    fc, fl = io.load_tensor(camera), io.load_tensor(lidar)
    fused = caaf_fuse(BevFeature(fc, "camera"), BevFeature(fl, "lidar"), load_caaf(obj.cfg.components.caaf, fc.shape[0]))
    result = fused.data
    if not no_align:
        b2a = load_b2a(obj.cfg.components.b2a, fc.shape[0])
        result = b2a_align(fused, BevFeature(fc, "camera"), b2a).aligned.data
    out = obj.path("bev_fused.awtf")
    io.save_tensor(out, result)
    _echo_written(out)


@cli.command()
@click.argument("bev", type=click.Path(exists=True, dir_okay=False))
@click.pass_obj
def detect(obj, bev):
    """Decode 3D car boxes from a BEV map; writes KITTI label lines."""
    ext = obj.cfg.bev.build_extent()
    acfg = AnchorConfig(
        extent=(ext.x_min, ext.x_max, ext.y_min, ext.y_max),
        score_thresh=obj.cfg.eval.score_thresh,
        nms_thresh=obj.cfg.eval.nms_thresh,
    )
    score, reg = occupancy_head(io.load_tensor(bev), tuple(obj.cfg.bev.voxel), acfg)
    boxes = anchor_decode_3d(score, reg, acfg)
    out = obj.path("detections.txt")
    io.write_label(out, [io.box3d_to_kitti(b) for b in boxes])
    _echo_written(out)


@cli.command("eval")
@click.option("--det", "dets", multiple=True, required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--gt", "gts", multiple=True, required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--level", type=click.Choice(["easy", "moderate", "hard"]), default="moderate", show_default=True)
@click.pass_obj
def eval_cmd(obj, dets, gts, level):
    """AP(R40) of detection label files against ground-truth label files,
    paired in the given order."""
    if len(dets) != len(gts):
        raise click.UsageError("--det and --gt must be given the same number of times")
    frames = []
    for d, g in zip(dets, gts):
        det_boxes = [o.to_box3d() for o in io.read_label(d) if o.type == "Car"]
        frames.append((det_boxes, gate_for_level(io.gt_boxes(io.read_label(g)), level)))
    ap = ap_r40_frames(frames, obj.cfg.eval.iou_thresh, obj.cfg.eval.mode)
    doc = {"AP": ap, "level": level, "iou_thresh": obj.cfg.eval.iou_thresh, "mode": obj.cfg.eval.mode, "frames": len(frames)}
    out = obj.path("eval.json")
    out.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    click.echo(f"AP_R40 {level}: {ap:.4f}")
    _echo_written(out)


@cli.command()
@click.option("--frames", type=int, default=None, help="Overrides n_frames.")
@click.option("--kind", type=click.Choice(KINDS), default=None, help="Overrides weather.kind.")
@click.pass_obj
def demo(obj, frames, kind):
    """Full pipeline on a generated synthetic set; writes report.json."""
    cfg = obj.cfg
    if frames is not None:
        cfg.n_frames = frames
    if kind is not None:
        cfg.weather.kind = kind
    report = run_pipeline(cfg, out_dir=obj.out)
    out = obj.path(REPORT_NAME)
    out.write_text(report_json(report, cfg))
    for k, v in sorted(report.mean_ap.items()):
        click.echo(f"mAP {k}: {v:.4f}")
    if report.skipped_frames:
        click.echo(f"skipped frames: {len(report.skipped_frames)}", err=True)
    _echo_written(out)


def main(argv=None):
    try:
        cli.main(args=argv, prog_name="weatherfuse", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.ClickException as exc:
        exc.show()
        return exc.exit_code
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    except (FormatError, ValueError, OSError) as exc:
        click.echo(f"error: {exc}", err=True)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
