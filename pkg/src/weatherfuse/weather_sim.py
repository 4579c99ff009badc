"""Seeded rain / fog / sunlight corruption of point clouds and images.

Every severity table below is indexed by severity 0..5; severity 0 is always
the identity. The numbers are chosen so level 5 visibly wrecks a 64x512
scene while level 1 is mild. They are not calibrated against any benchmark.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lidar_geom import as_cloud

KINDS = ("rain", "fog", "sunlight")

FOG_BETA = (0.0, 0.02, 0.04, 0.07, 0.11, 0.16)  # extinction per metre
FOG_SCATTER_P = (0.0, 0.05, 0.10, 0.15, 0.20, 0.25)
RAIN_DROPOUT = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)
RAIN_JITTER = (0.0, 0.02, 0.04, 0.06, 0.08, 0.10)  # metres
SUN_INTENSITY_GAIN = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)

SCATTER_MAX_RANGE = 10.0
SCATTER_INTENSITY = 0.1

AIRLIGHT = 0.9
FOG_DEFAULT_DEPTH = 20.0
RAIN_STREAKS_PER_KPIX = (0.0, 1.0, 2.0, 4.0, 6.0, 8.0)
RAIN_STREAK_VALUE = 0.6
RAIN_ANGLE_DEG = 100.0
RAIN_ANGLE_JITTER_DEG = 10.0
SUN_GAIN = (1.0, 1.1, 1.2, 1.3, 1.4, 1.5)
SUN_BIAS = (0.0, 0.05, 0.10, 0.15, 0.20, 0.25)


@dataclass(frozen=True)
class WeatherSpec:
    kind: str = "fog"
    severity: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown weather kind {self.kind!r}; expected one of {KINDS}")
        if not 0 <= int(self.severity) <= 5 or int(self.severity) != self.severity:
            raise ValueError(f"severity must be an integer in 0..5, got {self.severity}")


def corrupt_points(points, spec: WeatherSpec, rng: np.random.Generator):
    pts = as_cloud(points)
    s = spec.severity
    if s == 0 or len(pts) == 0:
        return pts.copy()
    r = np.linalg.norm(pts[:, :3], axis=1)
    if spec.kind == "fog":
        # attenuation: far returns die, a share of the dead ones come back as
        # near-sensor particle reflections along the same ray
        u_keep = rng.random(len(pts))
        u_scat = rng.random(len(pts))
        u_range = rng.random(len(pts))
        survive = u_keep < np.exp(-FOG_BETA[s] * r)
        scatter = ~survive & (u_scat < FOG_SCATTER_P[s]) & (r > 0)
        kept = pts[survive]
        sp = pts[scatter]
        sr = r[scatter]
        upper = np.minimum(sr, SCATTER_MAX_RANGE)
        lower = np.minimum(1.0, upper)
        new_r = lower + (upper - lower) * u_range[scatter]
        scattered = np.column_stack([sp[:, :3] * (new_r / sr)[:, None], np.full(len(sp), SCATTER_INTENSITY)])
        return np.concatenate([kept, scattered])
    if spec.kind == "rain":
        keep = rng.random(len(pts)) >= RAIN_DROPOUT[s]
        jitter = rng.normal(0.0, RAIN_JITTER[s], len(pts))
        out = pts[keep].copy()
        rk = r[keep]
        scale = np.ones_like(rk)
        nz = rk > 0
        scale[nz] = np.maximum(rk[nz] + jitter[keep][nz], 0.0) / rk[nz]
        out[:, :3] *= scale[:, None]
        return out
    out = pts.copy()
    out[:, 3] = np.minimum(1.0, out[:, 3] + SUN_INTENSITY_GAIN[s])
    return out


def _rain_layer(H, W, severity, rng):
    layer = np.zeros((H, W))
    n = int(round(RAIN_STREAKS_PER_KPIX[severity] * H * W / 1000.0))
    length = max(3, min(H, W) // 4)
    x0 = rng.uniform(0, W, n)
    y0 = rng.uniform(0, H, n)
    ang = np.deg2rad(RAIN_ANGLE_DEG + rng.uniform(-RAIN_ANGLE_JITTER_DEG, RAIN_ANGLE_JITTER_DEG, n))
    t = np.arange(length)
    xs = np.rint(x0[:, None] + np.cos(ang)[:, None] * t).astype(np.int64)
    ys = np.rint(y0[:, None] + np.sin(ang)[:, None] * t).astype(np.int64)
    ok = (xs >= 0) & (xs < W) & (ys >= 0) & (ys < H)
    layer[ys[ok], xs[ok]] = RAIN_STREAK_VALUE
    return layer


def corrupt_image(img, spec: WeatherSpec, rng: np.random.Generator, depth_proxy=None):
    """Corrupt a ``[3, H, W]`` image with values in ``[0, 1]``.

    Fog blends towards the airlight with transmission ``exp(-beta * d)``
    where ``d`` is ``depth_proxy`` (metres, ``[H, W]``) or 20 m everywhere.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError("image must have shape [3, H, W]")
    if img.size and (img.min() < 0.0 or img.max() > 1.0):
        raise ValueError("image values must lie in [0, 1]")
    s = spec.severity
    if s == 0:
        return img.copy()
    _, H, W = img.shape
    if spec.kind == "fog":
        d = FOG_DEFAULT_DEPTH if depth_proxy is None else np.asarray(depth_proxy, dtype=np.float64)
        t = np.exp(-FOG_BETA[s] * d)
        out = img * t + AIRLIGHT * (1.0 - t)
    elif spec.kind == "rain":
        out = img + _rain_layer(H, W, s, rng)[None]
    else:
        out = SUN_GAIN[s] * img + SUN_BIAS[s]
    return np.clip(out, 0.0, 1.0)
