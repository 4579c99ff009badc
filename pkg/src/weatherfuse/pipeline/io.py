"""File formats: KITTI velodyne / label / calib, the AWTF tensor container,
parameter files and PNG dumps."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from ..errors import FormatError, ParseError
from ..evaluation import Box3D, kitti_difficulty
from ..lidar_geom import RangeImage, as_cloud

TENSOR_MAGIC = b"AWTF"
TENSOR_VERSION = 1
PNG_RANGE_SCALE = 120.0  # metres mapped to the full 16-bit range

# ------------------------------------------------------------------ velodyne


def read_velodyne(path):
    raw = Path(path).read_bytes()
    if len(raw) % 16:
        raise FormatError(f"{path}: size {len(raw)} is not a multiple of 16 bytes")
    return np.frombuffer(raw, dtype="<f4").reshape(-1, 4).astype(np.float64)


def write_velodyne(path, points):
    pts = as_cloud(points)
    Path(path).write_bytes(pts.astype("<f4").tobytes())


# -------------------------------------------------------------------- labels


@dataclass
class KittiObject:
    type: str
    truncated: float
    occluded: int
    alpha: float
    bbox: tuple  # left, top, right, bottom (pixels)
    dimensions: tuple  # h, w, l (metres)
    location: tuple  # x, y, z camera frame, bottom centre
    rotation_y: float
    score: float | None = None

    @property
    def dont_care(self):
        return self.type == "DontCare"

    @property
    def difficulty(self):
        return kitti_difficulty(self.bbox[3] - self.bbox[1], self.occluded, self.truncated)

    def to_box3d(self, calib=None, ignore=False):
        """Box in the LiDAR frame.

        Without calibration the camera axes are mapped by the fixed KITTI
        convention (x_lidar = z_cam, y_lidar = -x_cam, z_lidar = -y_cam).
        """
        h, w, l = self.dimensions
        x, y, z = self.location
        center_cam = np.array([x, y - h / 2.0, z])
        if calib is None:
            center = (center_cam[2], -center_cam[0], -center_cam[1])
        else:
            center = tuple(calib.cam_to_lidar(center_cam[None])[0])
        return Box3D(
            center,
            (l, w, h),
            -self.rotation_y - math.pi / 2,
            1.0 if self.score is None else self.score,
            self.difficulty or "unknown",
            ignore=ignore or self.dont_care,
        )


def gt_boxes(objs, calib=None, cls="Car"):
    """Boxes for car-class evaluation: cars kept, vans kept but ignored
    (KITTI's neighbouring class), everything else dropped. DontCare regions
    carry no 3D box and are dropped as well."""
    out = []
    for o in objs:
        if o.type == cls:
            out.append(o.to_box3d(calib, ignore=o.difficulty is None))
        elif cls == "Car" and o.type == "Van":
            out.append(o.to_box3d(calib, ignore=True))
    return out


def box3d_to_kitti(box: Box3D, type_="Car", with_score=True):
    """Inverse of :meth:`KittiObject.to_box3d` under the fixed axis mapping.
    The 2D bbox, truncation and occlusion are unknown and written as zeros."""
    x, y, z = box.center
    l, w, h = box.dims
    ry = -box.yaw - math.pi / 2
    ry = math.atan2(math.sin(ry), math.cos(ry))
    return KittiObject(
        type=type_,
        truncated=0.0,
        occluded=0,
        alpha=0.0,
        bbox=(0.0, 0.0, 0.0, 0.0),
        dimensions=(h, w, l),
        location=(-y, -z + h / 2.0, x),
        rotation_y=ry,
        score=box.score if with_score else None,
    )


def parse_label_line(line, lineno=None):
    f = line.split()
    if len(f) not in (15, 16):
        raise ParseError(f"expected 15 or 16 fields, got {len(f)}", lineno)
    try:
        nums = [float(v) for v in f[1:]]
    except ValueError as exc:
        raise ParseError(str(exc), lineno) from None
    return KittiObject(
        type=f[0],
        truncated=nums[0],
        occluded=int(nums[1]),
        alpha=nums[2],
        bbox=tuple(nums[3:7]),
        dimensions=tuple(nums[7:10]),
        location=tuple(nums[10:13]),
        rotation_y=nums[13],
        score=nums[14] if len(nums) == 15 else None,
    )


def read_label(path):
    objs = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if line.strip():
            objs.append(parse_label_line(line, lineno))
    return objs


def format_label(obj: KittiObject):
    vals = [obj.truncated, obj.occluded, obj.alpha, *obj.bbox, *obj.dimensions, *obj.location, obj.rotation_y]
    if obj.score is not None:
        vals.append(obj.score)
    return " ".join([obj.type] + [f"{v:.6g}" for v in vals])


def write_label(path, objs):
    Path(path).write_text("".join(format_label(o) + "\n" for o in objs))


# --------------------------------------------------------------------- calib


@dataclass
class Calib:
    P2: np.ndarray = field(default_factory=lambda: np.eye(3, 4))
    R0: np.ndarray = field(default_factory=lambda: np.eye(3))
    Tr: np.ndarray = field(default_factory=lambda: np.eye(3, 4))

    def lidar_to_cam(self, pts):
        pts = np.asarray(pts, dtype=np.float64)[:, :3]
        return (self.R0 @ (pts @ self.Tr[:, :3].T + self.Tr[:, 3]).T).T

    def cam_to_lidar(self, pts):
        pts = np.asarray(pts, dtype=np.float64)
        ref = np.linalg.solve(self.R0, pts.T).T
        return np.linalg.solve(self.Tr[:, :3], (ref - self.Tr[:, 3]).T).T


_CALIB_KEYS = {"P2": (3, 4), "R0_rect": (3, 3), "R_rect": (3, 3), "Tr_velo_to_cam": (3, 4), "Tr_velo_cam": (3, 4)}


def read_calib(path):
    mats = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        if ":" not in line:
            raise ParseError("expected 'key: values'", lineno)
        key, rest = line.split(":", 1)
        key = key.strip()
        if key not in _CALIB_KEYS:
            continue
        try:
            vals = np.array([float(v) for v in rest.split()])
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from None
        shape = _CALIB_KEYS[key]
        if vals.size != shape[0] * shape[1]:
            raise ParseError(f"{key} needs {shape[0] * shape[1]} values, got {vals.size}", lineno)
        mats[key] = vals.reshape(shape)
    calib = Calib()
    if "P2" in mats:
        calib.P2 = mats["P2"]
    for k in ("R0_rect", "R_rect"):
        if k in mats:
            calib.R0 = mats[k]
    for k in ("Tr_velo_to_cam", "Tr_velo_cam"):
        if k in mats:
            calib.Tr = mats[k]
    return calib


# ------------------------------------------------------------------- tensors


def tensor_bytes(t):
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        t = t.reshape(1)
    header = TENSOR_MAGIC + struct.pack("<HH", TENSOR_VERSION, t.ndim) + struct.pack(f"<{t.ndim}Q", *t.shape)
    return header + np.ascontiguousarray(t, dtype="<f4").tobytes()


def tensor_from_bytes(raw, source="<bytes>"):
    if len(raw) < 8 or raw[:4] != TENSOR_MAGIC:
        raise FormatError(f"{source}: bad magic")
    version, ndim = struct.unpack_from("<HH", raw, 4)
    if version != TENSOR_VERSION:
        raise FormatError(f"{source}: unsupported version {version}")
    end = 8 + 8 * ndim
    if len(raw) < end:
        raise FormatError(f"{source}: truncated header")
    shape = struct.unpack_from(f"<{ndim}Q", raw, 8)
    n = int(np.prod(shape)) if ndim else 1
    if len(raw) != end + 4 * n:
        raise FormatError(f"{source}: payload has {len(raw) - end} bytes, expected {4 * n}")
    return np.frombuffer(raw, dtype="<f4", offset=end).reshape(shape).astype(np.float64)


def save_tensor(path, t):
    Path(path).write_bytes(tensor_bytes(t))


def load_tensor(path):
    return tensor_from_bytes(Path(path).read_bytes(), str(path))


def save_params(path, fmap):
    save_tensor(path, fmap.params)


def load_params(path, fmap):
    """Load a flat parameter file into a copy of ``fmap``."""
    p = load_tensor(path).reshape(-1)
    if p.size != fmap.params.size:
        raise FormatError(f"{path}: {p.size} parameters, {type(fmap).__name__} needs {fmap.params.size}")
    return fmap.with_params(p)


def range_image_tensor(ri: RangeImage):
    return np.stack([ri.range, ri.intensity, ri.valid.astype(np.float64)])


def range_image_from_tensor(t, cfg):
    t = np.asarray(t)
    if t.shape != (3, cfg.H, cfg.W):
        raise FormatError(f"range image tensor must be [3, {cfg.H}, {cfg.W}], got {t.shape}")
    valid = t[2] > 0.5
    return RangeImage(cfg, np.where(valid, t[0], 0.0), np.where(valid, t[1], 0.0), valid)


# ----------------------------------------------------------------------- PNG


def save_image_png(path, img):
    img = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    arr = np.rint(np.moveaxis(img, 0, -1) * 255).astype(np.uint8)
    Image.fromarray(arr, "RGB").save(path)


def save_range_png(path, ri: RangeImage):
    """16-bit grayscale with ``value = r / 120 m`` scaled to 65535."""
    scaled = np.clip(np.where(ri.valid, ri.range, 0.0) / PNG_RANGE_SCALE, 0.0, 1.0)
    arr = np.rint(scaled * 65535).astype(np.uint16)
    Image.fromarray(arr).save(path)


def load_range_png(path):
    arr = np.asarray(Image.open(path), dtype=np.float64)
    return arr / 65535.0 * PNG_RANGE_SCALE
