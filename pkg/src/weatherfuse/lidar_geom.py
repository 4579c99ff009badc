"""Spherical range-image projection, its inverse, and BEV voxelisation.

A point cloud is an ``[N, 4]`` float array of ``(x, y, z, intensity)`` in the
LiDAR frame (metres, x forward, z up).

Column ``u`` follows azimuth, row ``v`` follows elevation::

    u = floor((1 - phi / pi) * W / 2)  (mod W)
    v = floor((1 - (theta - theta_min) / (theta_max - theta_min)) * H)

with ``phi = atan2(y, x)`` and ``theta = asin(z / r)``. Indices are floored;
points outside the elevation band are dropped and, when several points land
in one pixel, the nearest one wins.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# axis-aligned BEV cells of this size are used for the full-scale configuration
FULL_SCALE_VOXEL = (0.05, 0.05, 0.1)


def empty_cloud():
    return np.zeros((0, 4))


def as_cloud(points):
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        return empty_cloud()
    if pts.ndim != 2 or pts.shape[1] != 4:
        raise ValueError("point cloud must have shape [N, 4]")
    if not np.all(np.isfinite(pts)):
        raise ValueError("point cloud contains non-finite values")
    return pts


@dataclass(frozen=True)
class ProjectionConfig:
    H: int = 64
    W: int = 512
    theta_min: float = math.radians(-25.0)
    theta_max: float = math.radians(3.0)

    def __post_init__(self):
        if self.H < 1 or self.W < 1:
            raise ValueError("H and W must be >= 1")
        if not self.theta_min < self.theta_max:
            raise ValueError("theta_min must be below theta_max")

    @property
    def fov(self):
        return self.theta_max - self.theta_min

    def scaled(self, factor):
        return ProjectionConfig(self.H * factor, self.W * factor, self.theta_min, self.theta_max)


@dataclass
class RangeImage:
    config: ProjectionConfig
    range: np.ndarray
    intensity: np.ndarray
    valid: np.ndarray

    @classmethod
    def empty(cls, cfg):
        shape = (cfg.H, cfg.W)
        return cls(cfg, np.zeros(shape), np.zeros(shape), np.zeros(shape, dtype=bool))

    def copy(self):
        return RangeImage(self.config, self.range.copy(), self.intensity.copy(), self.valid.copy())

    def __eq__(self, other):
        return (
            isinstance(other, RangeImage)
            and self.config == other.config
            and np.array_equal(self.range, other.range)
            and np.array_equal(self.intensity, other.intensity)
            and np.array_equal(self.valid, other.valid)
        )


def azimuth_to_column(phi, W):
    u = np.floor((1.0 - np.asarray(phi) / np.pi) * W / 2.0).astype(np.int64)
    return np.mod(u, W)


def elevation_to_row(theta, cfg):
    v = np.floor((1.0 - (np.asarray(theta) - cfg.theta_min) / cfg.fov) * cfg.H).astype(np.int64)
    return np.clip(v, 0, cfg.H - 1)


def pixel_angles(rows, cols, cfg):
    """Azimuth/elevation of (possibly fractional) pixel coordinates.

    ``rows``/``cols`` are measured in pixels from the top-left image corner,
    so the centre of pixel ``(i, j)`` is ``(i + 0.5, j + 0.5)``.
    """
    phi = np.pi * (1.0 - 2.0 * np.asarray(cols, dtype=np.float64) / cfg.W)
    theta = cfg.theta_min + (1.0 - np.asarray(rows, dtype=np.float64) / cfg.H) * cfg.fov
    return phi, theta


def project(points, cfg: ProjectionConfig, return_index=False):
    """Project a cloud onto a range image (nearest return per pixel).

    With ``return_index`` also returns an ``[H, W]`` map of the source row in
    ``points`` for each valid pixel (``-1`` elsewhere).
    """
    pts = as_cloud(points)
    ri = RangeImage.empty(cfg)
    index = np.full((cfg.H, cfg.W), -1, dtype=np.int64)
    if len(pts):
        x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
        r = _norm3(pts)
        keep = np.flatnonzero(r > 0)
        theta = np.arcsin(np.clip(z[keep] / r[keep], -1.0, 1.0))
        inband = (theta >= cfg.theta_min) & (theta <= cfg.theta_max)
        keep, theta = keep[inband], theta[inband]
        phi = np.arctan2(y[keep], x[keep])
        u = azimuth_to_column(phi, cfg.W)
        v = elevation_to_row(theta, cfg)
        # nearest first, then input order; the first entry per pixel wins
        order = np.lexsort((keep, r[keep]))
        flat = v[order] * cfg.W + u[order]
        _, first = np.unique(flat, return_index=True)
        win = order[first]
        vv, uu, src = v[win], u[win], keep[win]
        ri.range[vv, uu] = r[src]
        ri.intensity[vv, uu] = pts[src, 3]
        ri.valid[vv, uu] = True
        index[vv, uu] = src
    if return_index:
        return ri, index
    return ri


def _points_on_rays(phi, theta, r):
    ct = np.cos(theta)
    d = np.stack([ct * np.cos(phi), ct * np.sin(phi), np.sin(theta)], axis=-1)
    p = d * r[:, None]
    # the direction is only known to a few ulps, so search small per-coordinate
    # ulp steps until the Euclidean norm reproduces the stored range exactly
    rows = np.arange(len(p))
    k = np.argmax(np.abs(p), axis=1)
    for _ in range(4):
        n = _norm3(p)
        off = n != r
        if not off.any():
            break
        i, kk = rows[off], k[off]
        grow = (n[off] < r[off]) == (p[i, kk] > 0)
        p[i, kk] = np.nextafter(p[i, kk], np.where(grow, np.inf, -np.inf))
    n = _norm3(p)
    for i in np.flatnonzero(n != r):
        p[i] = _snap_norm(p[i], r[i])
    return p


def _norm3(p):
    p = np.atleast_2d(p)
    return np.sqrt(p[:, 0] * p[:, 0] + p[:, 1] * p[:, 1] + p[:, 2] * p[:, 2])


def _snap_norm(q, target):
    # the norm is monotone in each |coordinate|, so bisect over the float
    # lattice of one coordinate (trying each in turn, then with the others
    # perturbed by one ulp) for a value whose norm hits the target exactly
    for base in _neighbours(q):
        for k in np.argsort(-np.abs(base)):
            hit = _bisect_coordinate(base, k, target)
            if hit is not None:
                return hit
    return q


def _neighbours(q):
    yield q
    for k in range(3):
        for direction in (np.inf, -np.inf):
            c = q.copy()
            c[k] = np.nextafter(c[k], direction)
            yield c


def _bisect_coordinate(q, k, target):
    mag = abs(q[k])
    if mag == 0.0:
        return None
    lo = int(np.float64(mag * (1 - 1e-6)).view(np.int64))
    hi = int(np.float64(mag * (1 + 1e-6)).view(np.int64))

    def norm_with(bits):
        c = q.copy()
        c[k] = np.copysign(np.int64(bits).view(np.float64), q[k])
        return _norm3(c)[0], c

    if norm_with(lo)[0] > target or norm_with(hi)[0] < target:
        return None
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if norm_with(mid)[0] < target:
            lo = mid
        else:
            hi = mid
    n, c = norm_with(hi)
    return c if n == target else None


def unproject(ri: RangeImage):
    """Points at the pixel-centre directions of every valid pixel."""
    rows, cols = np.nonzero(ri.valid)
    if rows.size == 0:
        return empty_cloud()
    phi, theta = pixel_angles(rows + 0.5, cols + 0.5, ri.config)
    r = ri.range[rows, cols]
    p = _points_on_rays(phi, theta, r)
    return np.column_stack([p, ri.intensity[rows, cols]])


def unproject_at(rows, cols, r, intensity, cfg):
    """Points at arbitrary fractional pixel coordinates with given ranges."""
    phi, theta = pixel_angles(rows, cols, cfg)
    p = _points_on_rays(np.atleast_1d(phi), np.atleast_1d(theta), np.atleast_1d(np.asarray(r, dtype=np.float64)))
    return np.column_stack([p, np.atleast_1d(intensity)])


def quantization_bound(cfg: ProjectionConfig, r):
    """Largest displacement a point at range ``r`` can suffer when snapped to
    its pixel centre: the chord for half a pixel in both angles."""
    half_az = np.pi / cfg.W
    half_el = cfg.fov / (2.0 * cfg.H)
    return 2.0 * np.asarray(r) * np.sqrt(np.sin(half_el / 2) ** 2 + np.sin(half_az / 2) ** 2)


# ------------------------------------------------------------------ BEV grid


@dataclass(frozen=True)
class BevExtent:
    x_min: float = 0.0
    x_max: float = 40.96
    y_min: float = -20.48
    y_max: float = 20.48
    z_min: float = -1.5
    z_max: float = 1.0

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max and self.z_min < self.z_max):
            raise ValueError(f"degenerate BEV extent {self}")

    def as_tuple(self):
        return (self.x_min, self.x_max, self.y_min, self.y_max, self.z_min, self.z_max)


def bev_shape(extent: BevExtent, voxel):
    dx, dy, _ = voxel
    # tolerate extents that are a whole number of cells up to rounding
    H = math.ceil((extent.x_max - extent.x_min) / dx - 1e-9)
    W = math.ceil((extent.y_max - extent.y_min) / dy - 1e-9)
    return H, W


@dataclass
class BevGrid:
    extent: BevExtent
    voxel: tuple
    features: np.ndarray

    def cell_center(self, row, col):
        dx, dy, _ = self.voxel
        return (self.extent.x_min + (row + 0.5) * dx, self.extent.y_min + (col + 0.5) * dy)


def voxelize_bev(points, extent: BevExtent | tuple = BevExtent(), voxel=FULL_SCALE_VOXEL):
    """Rasterise a cloud into a 3-channel BEV grid.

    Channels: point count normalised by the busiest cell, mean intensity,
    and the highest point's height normalised to the z-extent. Rows index x,
    columns index y. Points outside the extent are ignored.
    """
    if not isinstance(extent, BevExtent):
        extent = BevExtent(*extent)
    if min(voxel) <= 0:
        raise ValueError("voxel sizes must be positive")
    H, W = bev_shape(extent, voxel)
    feat = np.zeros((3, H, W))
    pts = as_cloud(points)
    if len(pts) == 0:
        return BevGrid(extent, tuple(voxel), feat)
    # canonical order makes the float accumulations independent of input order
    pts = pts[np.lexsort(pts.T[::-1])]
    x, y, z, inten = pts.T
    ix = np.floor((x - extent.x_min) / voxel[0]).astype(np.int64)
    iy = np.floor((y - extent.y_min) / voxel[1]).astype(np.int64)
    inside = (
        (x >= extent.x_min) & (x < extent.x_max)
        & (y >= extent.y_min) & (y < extent.y_max)
        & (z >= extent.z_min) & (z < extent.z_max)
        & (ix >= 0) & (ix < H) & (iy >= 0) & (iy < W)
    )
    if not inside.any():
        return BevGrid(extent, tuple(voxel), feat)
    flat = ix[inside] * W + iy[inside]
    count = np.bincount(flat, minlength=H * W).astype(np.float64)
    isum = np.bincount(flat, weights=inten[inside], minlength=H * W)
    height = np.zeros(H * W)
    np.maximum.at(height, flat, (z[inside] - extent.z_min) / (extent.z_max - extent.z_min))
    occupied = count > 0
    feat[0] = (count / count.max()).reshape(H, W)
    mean_i = np.zeros(H * W)
    mean_i[occupied] = isum[occupied] / count[occupied]
    feat[1] = mean_i.reshape(H, W)
    feat[2] = height.reshape(H, W)
    return BevGrid(extent, tuple(voxel), feat)
