"""Procedural driving scenes: a ground grid plus box-shaped cars.

The camera image is rendered on the range-image grid, so both modalities
see each car at the same pixels. Channels: return intensity, range / 80 m,
and point height mapped from [-2 m, 1 m] to [0, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..evaluation import ANCHOR_SIZE, Box3D
from ..lidar_geom import ProjectionConfig, as_cloud, empty_cloud, project, unproject_at
from ..numerics import make_rng
from ..pcr import boxes_from_points
from .io import Calib

GROUND_Z = -1.73  # sensor height above the road
GROUND_STEP = 0.5
GROUND_X = (0.0, 45.0)
GROUND_Y = (-22.0, 22.0)
GROUND_INTENSITY = 0.2

CAR_X = (6.0, 38.0)
CAR_Y = (-15.0, 15.0)
CAR_MIN_GAP = 6.0  # centre distance, keeps footprints apart
CAR_DIM_JITTER = 0.05
CAR_YAW_JITTER = 0.05
CAR_DENSITY = 40.0  # points per square metre of surface
CAR_INSET = 0.01  # keep samples strictly inside the box

IMAGE_RANGE = 80.0
IMAGE_Z = (-2.0, 1.0)

SYNTH_STREAM = 101


@dataclass
class Frame:
    frame_id: int
    points: np.ndarray
    image: np.ndarray
    calib: Calib = field(default_factory=Calib)
    gt: list = field(default_factory=list)  # Box3D, LiDAR frame
    gt2d: list = field(default_factory=list)  # Box2D on the range-image grid
    cluster_sizes: list = field(default_factory=list)


def ground_points():
    xs = np.arange(GROUND_X[0], GROUND_X[1] + 1e-9, GROUND_STEP)
    ys = np.arange(GROUND_Y[0], GROUND_Y[1] + 1e-9, GROUND_STEP)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    n = gx.size
    pts = np.column_stack([gx.ravel(), gy.ravel(), np.full(n, GROUND_Z), np.full(n, GROUND_INTENSITY)])
    return pts[np.hypot(pts[:, 0], pts[:, 1]) > 1.0]


def car_points(box: Box3D, rng, density=CAR_DENSITY, intensity=0.7):
    """Points on the four sides and the roof of ``box``."""
    l, w, h = (d - 2 * CAR_INSET for d in box.dims)
    faces = [  # (area, sampler in local coords)
        (l * h, lambda u, v: (u * l - l / 2, np.full_like(u, w / 2), v * h - h / 2)),
        (l * h, lambda u, v: (u * l - l / 2, np.full_like(u, -w / 2), v * h - h / 2)),
        (w * h, lambda u, v: (np.full_like(u, l / 2), u * w - w / 2, v * h - h / 2)),
        (w * h, lambda u, v: (np.full_like(u, -l / 2), u * w - w / 2, v * h - h / 2)),
        (l * w, lambda u, v: (u * l - l / 2, v * w - w / 2, np.full_like(u, h / 2))),
    ]
    parts = []
    for area, sample in faces:
        n = max(1, int(round(density * area)))
        x, y, z = sample(rng.random(n), rng.random(n))
        parts.append(np.column_stack([x, y, z]))
    local = np.concatenate(parts)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    xyz = np.column_stack(
        [
            box.center[0] + c * local[:, 0] - s * local[:, 1],
            box.center[1] + s * local[:, 0] + c * local[:, 1],
            box.center[2] + local[:, 2],
        ]
    )
    return np.column_stack([xyz, np.full(len(xyz), intensity)])


def points_in_box(points, box: Box3D):
    pts = as_cloud(points)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    dx, dy = pts[:, 0] - box.center[0], pts[:, 1] - box.center[1]
    lx, ly = c * dx + s * dy, -s * dx + c * dy
    lz = pts[:, 2] - box.center[2]
    l, w, h = box.dims
    return (np.abs(lx) <= l / 2) & (np.abs(ly) <= w / 2) & (np.abs(lz) <= h / 2)


def _sample_boxes(rng, n_objects):
    boxes = []
    attempts = 0
    while len(boxes) < n_objects:
        attempts += 1
        if attempts > 1000 * max(1, n_objects):
            raise RuntimeError(f"could not place {n_objects} cars without overlap")
        x = rng.uniform(*CAR_X)
        y = rng.uniform(*CAR_Y)
        dims = tuple(d * rng.uniform(1 - CAR_DIM_JITTER, 1 + CAR_DIM_JITTER) for d in ANCHOR_SIZE)
        yaw = (math.pi / 2 if rng.random() < 0.5 else 0.0) + rng.uniform(-CAR_YAW_JITTER, CAR_YAW_JITTER)
        if any(math.hypot(x - b.center[0], y - b.center[1]) < CAR_MIN_GAP for b in boxes):
            continue
        boxes.append(Box3D((x, y, GROUND_Z + dims[2] / 2), dims, yaw, 1.0, "moderate"))
    return boxes


def render_image(points, cfg: ProjectionConfig):
    """``[3, H, W]`` image of the cloud on the range-image grid."""
    pts = as_cloud(points)
    ri, idx = project(pts, cfg, return_index=True)
    img = np.zeros((3, cfg.H, cfg.W))
    v = ri.valid
    img[0][v] = np.clip(ri.intensity[v], 0.0, 1.0)
    img[1][v] = np.clip(ri.range[v] / IMAGE_RANGE, 0.0, 1.0)
    z = pts[idx[v], 2]
    img[2][v] = np.clip((z - IMAGE_Z[0]) / (IMAGE_Z[1] - IMAGE_Z[0]), 0.0, 1.0)
    return img


def image_to_points(img, cfg: ProjectionConfig):
    """Lift every pixel with a positive depth channel to a 3D point."""
    img = np.asarray(img, dtype=np.float64)
    rows, cols = np.nonzero(img[1] > 0)
    if rows.size == 0:
        return empty_cloud()
    r = img[1, rows, cols] * IMAGE_RANGE
    return unproject_at(rows + 0.5, cols + 0.5, r, img[0, rows, cols], cfg)


def synth_scene(seed, n_objects=4, cfg: ProjectionConfig = ProjectionConfig(), frame_id=0):
    if n_objects < 0:
        raise ValueError("n_objects must be >= 0")
    rng = make_rng(seed, SYNTH_STREAM, frame_id)
    boxes = _sample_boxes(rng, n_objects)
    clusters = [car_points(b, rng, intensity=rng.uniform(0.6, 0.9)) for b in boxes]
    points = np.concatenate([ground_points()] + clusters) if clusters else ground_points()
    gt2d = [b2 for b2 in (boxes_from_points(c, cfg) for c in clusters) if b2 is not None]
    return Frame(
        frame_id=frame_id,
        points=points,
        image=render_image(points, cfg),
        gt=boxes,
        gt2d=gt2d,
        cluster_sizes=[int(points_in_box(c, b).sum()) for b, c in zip(boxes, clusters)],
    )
