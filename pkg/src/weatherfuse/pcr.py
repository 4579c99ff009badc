"""Object-level point cloud restoration on the range image.

A CenterNet-style head (heatmap / size / offset) yields 2D boxes; each box
region of the range image is upsampled 2x with the original pixels on even
rows and columns, a ray compensator fills the zero slots, and the densified
canvas is lifted back to 3D.

Box coordinates are in pixel-index units: the centre of pixel ``(row, col)``
is ``(cx, cy) = (col, row)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyRegionError
from .lidar_geom import ProjectionConfig, RangeImage, as_cloud, empty_cloud, project, unproject_at
from .numerics import ConvStack, FunctionMap, ParametricMap, as_tensor, make_rng

FOCAL_ALPHA = 2
FOCAL_BETA = 4
HEATMAP_CLAMP = 1e-4
R_MAX = 120.0


@dataclass(frozen=True)
class Box2D:
    cx: float
    cy: float
    w: float
    h: float
    score: float = 1.0

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError("box width and height must be positive")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError("score must lie in [0, 1]")

    def corners(self):
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)


@dataclass
class HeadOutputs:
    heatmap: np.ndarray  # [1, H, W] in [0, 1]
    size: np.ndarray  # [2, H, W] (w, h) >= 0
    offset: np.ndarray  # [2, H, W] (dx, dy)
    mask: np.ndarray | None = field(default=None)  # GT centre cells, targets only


def box_iou(a: Box2D, b: Box2D):
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a.w * a.h + b.w * b.h - inter
    return inter / union if union > 0 else 0.0


# ------------------------------------------------------------ decode / NMS


def _max3x3(x):
    p = np.pad(x, 1, constant_values=-np.inf)
    H, W = x.shape
    return np.max([p[i : i + H, j : j + W] for i in range(3) for j in range(3)], axis=0)


def decode_centernet(h: HeadOutputs, score_thresh=0.3, k_max=100):
    """Peaks of the heatmap (equal to their 3x3 max, above threshold) as boxes,
    best ``k_max`` first; ties keep row-major order."""
    heat = as_tensor(h.heatmap)[0]
    peak = (heat == _max3x3(heat)) & (heat >= score_thresh) & (heat > 0)
    rows, cols = np.nonzero(peak)
    scores = heat[rows, cols]
    order = np.argsort(-scores, kind="stable")[:k_max]
    boxes = []
    for i in order:
        r, c = rows[i], cols[i]
        w, hh = h.size[0, r, c], h.size[1, r, c]
        if w <= 0 or hh <= 0:
            continue
        boxes.append(Box2D(c + h.offset[0, r, c], r + h.offset[1, r, c], float(w), float(hh), float(min(1.0, scores[i]))))
    return boxes


def nms_2d(boxes, iou_thresh=0.5):
    """Greedy suppression in descending score; stable for equal scores."""
    order = sorted(range(len(boxes)), key=lambda i: -boxes[i].score)
    kept = []
    for i in order:
        if all(box_iou(boxes[i], boxes[k]) <= iou_thresh for k in kept):
            kept.append(i)
    return [boxes[i] for i in kept]


# ------------------------------------------------------------ head training


def gaussian_radius(w, h):
    return max(1, int(np.floor(min(w, h) / 6.0)))


def heatmap_targets(gt, H, W):
    """Gaussian heatmap splats plus size/offset targets at the centre cells.

    The splat for a box of radius ``r`` has ``sigma = r / 3``.
    """
    heat = np.zeros((1, H, W))
    size = np.zeros((2, H, W))
    offset = np.zeros((2, H, W))
    mask = np.zeros((H, W), dtype=bool)
    yy, xx = np.mgrid[0:H, 0:W]
    for b in gt:
        if not (0 <= b.cx < W and 0 <= b.cy < H):
            raise ValueError(f"box centre ({b.cx}, {b.cy}) outside the {H}x{W} grid")
        c, r = int(np.floor(b.cx)), int(np.floor(b.cy))
        rad = gaussian_radius(b.w, b.h)
        sigma = rad / 3.0
        g = np.exp(-((xx - c) ** 2 + (yy - r) ** 2) / (2 * sigma * sigma))
        g[(np.abs(xx - c) > rad) | (np.abs(yy - r) > rad)] = 0.0
        heat[0] = np.maximum(heat[0], g)
        size[:, r, c] = (b.w, b.h)
        offset[:, r, c] = (b.cx - c, b.cy - r)
        mask[r, c] = True
    return HeadOutputs(heat, size, offset, mask)


def aux_loss(pred: HeadOutputs, targets: HeadOutputs, return_grad=False):
    """Penalty-reduced focal loss on the heatmap plus L1 on size and offset at
    GT centres, both normalised by the number of objects."""
    if pred.heatmap.shape != targets.heatmap.shape or pred.size.shape != targets.size.shape:
        raise ValueError("prediction and target shapes differ")
    raw = as_tensor(pred.heatmap)
    y = np.clip(raw, HEATMAP_CLAMP, 1 - HEATMAP_CLAMP)
    t = targets.heatmap
    mask = targets.mask if targets.mask is not None else (t[0] == 1.0)
    pos = np.zeros_like(t, dtype=bool)
    pos[0] = mask
    n = max(1, int(mask.sum()))
    a, b = FOCAL_ALPHA, FOCAL_BETA
    pos_term = -((1 - y) ** a) * np.log(y)
    neg_w = (1 - t) ** b
    neg_term = -neg_w * y**a * np.log(1 - y)
    cls = float(np.sum(np.where(pos, pos_term, neg_term))) / n
    ds = pred.size - targets.size
    do = pred.offset - targets.offset
    reg = float(np.sum(np.abs(ds) * mask) + np.sum(np.abs(do) * mask)) / n
    loss = cls + reg
    if not return_grad:
        return loss
    d_pos = a * (1 - y) ** (a - 1) * np.log(y) - (1 - y) ** a / y
    d_neg = -neg_w * (a * y ** (a - 1) * np.log(1 - y) - y**a / (1 - y))
    g_heat = np.where(pos, d_pos, d_neg) / n
    g_heat = g_heat * ((raw > HEATMAP_CLAMP) & (raw < 1 - HEATMAP_CLAMP))
    return loss, HeadOutputs(g_heat, np.sign(ds) * mask / n, np.sign(do) * mask / n)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class CenterHead(ParametricMap):
    """Conv trunk with three parallel 1-layer heads: sigmoid heatmap, ReLU
    size, linear offset. Output is packed as ``[5, H, W]``; use
    :meth:`split` to get :class:`HeadOutputs`."""

    def __init__(self, in_channels=64, hidden=16, params=None):
        self.trunk = ConvStack([in_channels, hidden], activation="relu", final_activation="relu")
        self.heads = ConvStack([hidden, 5])
        super().__init__(params)

    def n_params(self):
        return self.trunk.params.size + self.heads.params.size

    def _split_params(self, params):
        n = self.trunk.params.size
        return params[:n], params[n:]

    def apply(self, params, feat):
        pt, ph = self._split_params(params)
        z = self.heads.apply(ph, self.trunk.apply(pt, feat))
        return np.concatenate([_sigmoid(z[:1]), np.maximum(z[1:3], 0.0), z[3:]])

    @staticmethod
    def split(out):
        return HeadOutputs(out[:1], out[1:3], out[3:5])

    @staticmethod
    def pack(grad: HeadOutputs):
        return np.concatenate([grad.heatmap, grad.size, grad.offset])

    def vjp(self, params, inputs, grad_out):
        (feat,) = inputs
        pt, ph = self._split_params(params)
        hid = self.trunk.apply(pt, feat)
        z = self.heads.apply(ph, hid)
        out = self.apply(params, feat)
        gz = np.concatenate([grad_out[:1] * out[:1] * (1 - out[:1]), grad_out[1:3] * (z[1:3] > 0), grad_out[3:]])
        gh, (ghid,) = self.heads.vjp(ph, (hid,), gz)
        gt, (gfeat,) = self.trunk.vjp(pt, (feat,), ghid)
        return np.concatenate([gt, gh]), (gfeat,)


# --------------------------------------------------------- region handling


@dataclass
class Region:
    range: np.ndarray
    intensity: np.ndarray
    valid: np.ndarray
    row0: int
    col0: int


def box_window(box: Box2D, H, W):
    """Clipped pixel window ``(r0, r1, c0, c1)`` (end-exclusive) of a box."""
    c0 = int(np.floor(box.cx - box.w / 2 + 0.5))
    c1 = int(np.floor(box.cx + box.w / 2 + 0.5))
    r0 = int(np.floor(box.cy - box.h / 2 + 0.5))
    r1 = int(np.floor(box.cy + box.h / 2 + 0.5))
    r0, r1 = max(r0, 0), min(r1, H)
    c0, c1 = max(c0, 0), min(c1, W)
    if r1 <= r0 or c1 <= c0:
        raise EmptyRegionError(f"box {box} does not intersect the {H}x{W} image")
    return r0, r1, c0, c1


def extract_region(ri: RangeImage, box: Box2D) -> Region:
    r0, r1, c0, c1 = box_window(box, ri.config.H, ri.config.W)
    win = (slice(r0, r1), slice(c0, c1))
    return Region(ri.range[win].copy(), ri.intensity[win].copy(), ri.valid[win].copy(), r0, c0)


@dataclass
class RestorePatch:
    values: np.ndarray
    mask: np.ndarray


def upsample_with_mask(patch) -> RestorePatch:
    patch = as_tensor(patch)
    if patch.ndim != 2 or min(patch.shape) < 1:
        raise ValueError("patch must be a non-empty 2D array")
    h, w = patch.shape
    values = np.zeros((2 * h, 2 * w))
    mask = np.zeros((2 * h, 2 * w))
    values[::2, ::2] = patch
    mask[::2, ::2] = 1.0
    return RestorePatch(values, mask)


def compose_restore(rp: RestorePatch, compensator):
    """``values * M + U(values) * (1 - M)``; cells with ``M = 1`` are returned
    bit-for-bit."""
    filled = as_tensor(compensator(rp.values))
    if filled.shape != rp.values.shape:
        raise ValueError(f"compensator returned {filled.shape}, expected {rp.values.shape}")
    return np.where(rp.mask == 1, rp.values, filled)


# ----------------------------------------------------------------- losses


def _forward_diffs(a):
    return a[:, 1:] - a[:, :-1], a[1:, :] - a[:-1, :]


def gradient_loss(gen, gt, return_grad=False):
    gen, gt = as_tensor(gen), as_tensor(gt)
    if gen.shape != gt.shape:
        raise ValueError("shape mismatch")
    if gen.ndim != 2 or min(gen.shape) < 2:
        raise ValueError("gradient loss needs at least a 2x2 patch")
    gx_gen, gy_gen = _forward_diffs(gen)
    gx_gt, gy_gt = _forward_diffs(gt)
    dx = gx_gt - gx_gen
    dy = gy_gt - gy_gen
    loss = float(np.abs(dx).sum() + np.abs(dy).sum())
    if not return_grad:
        return loss
    sx, sy = -np.sign(dx), -np.sign(dy)
    g = np.zeros_like(gen)
    g[:, 1:] += sx
    g[:, :-1] -= sx
    g[1:, :] += sy
    g[:-1, :] -= sy
    return loss, g


def default_perceptual_map(seed=0):
    """Frozen 2-layer conv feature extractor standing in for a pretrained
    perceptual network."""
    return ConvStack([1, 4, 4], activation="tanh").init_params(make_rng(seed), scale=0.3)


def restoration_loss(gen, gt, feat_fn: ParametricMap, return_grad=False):
    """Gradient loss + mean absolute error + mean absolute feature error."""
    gen, gt = as_tensor(gen), as_tensor(gt)
    if gen.shape != gt.shape:
        raise ValueError("shape mismatch")
    lg = gradient_loss(gen, gt, return_grad)
    d = gen - gt
    fg, ft = feat_fn(gen[None]), feat_fn(gt[None])
    df = fg - ft
    if not return_grad:
        return lg + float(np.abs(d).mean()) + float(np.abs(df).mean())
    lg, g = lg
    loss = lg + float(np.abs(d).mean()) + float(np.abs(df).mean())
    g = g + np.sign(d) / d.size
    _, (gf,) = feat_fn.vjp(feat_fn.params, (gen[None],), np.sign(df) / df.size)
    return loss, g + gf[0]


# ----------------------------------------------------- full restoration


def _canvas_coords(points, cfg: ProjectionConfig):
    """Canvas pixel indices on the 2x grid whose even cells sit on the
    original pixel centres. Returns ``(rows, cols, ranges, source_index)``."""
    pts = as_cloud(points)
    if len(pts) == 0:
        e = np.zeros(0, dtype=np.int64)
        return e, e, np.zeros(0), e
    r = np.sqrt(pts[:, 0] ** 2 + pts[:, 1] ** 2 + pts[:, 2] ** 2)
    keep = np.flatnonzero(r > 0)
    theta = np.arcsin(np.clip(pts[keep, 2] / r[keep], -1, 1))
    inband = (theta >= cfg.theta_min) & (theta <= cfg.theta_max)
    keep, theta = keep[inband], theta[inband]
    phi = np.arctan2(pts[keep, 1], pts[keep, 0])
    uf = (1.0 - phi / np.pi) * cfg.W / 2.0
    vf = (1.0 - (theta - cfg.theta_min) / cfg.fov) * cfg.H
    cols = np.mod(np.floor(2 * uf - 0.5).astype(np.int64), 2 * cfg.W)
    rows = np.clip(np.floor(2 * vf - 0.5).astype(np.int64), 0, 2 * cfg.H - 1)
    return rows, cols, r[keep], keep


class OracleCompensator:
    """Fills upsampled slots with the clean scene's ranges at those rays.

    Location-aware: :func:`restore_pointcloud` calls :meth:`at` with the
    patch's canvas origin to obtain the per-patch map.
    """

    def __init__(self, clean_points, cfg: ProjectionConfig):
        rows, cols, r, _ = _canvas_coords(clean_points, cfg)
        canvas = np.full((2 * cfg.H, 2 * cfg.W), np.inf)
        np.minimum.at(canvas, (rows, cols), r)
        canvas[np.isinf(canvas)] = 0.0
        self.canvas = canvas

    def at(self, row0, col0):
        def fill(values):
            h, w = np.shape(values)
            return self.canvas[row0 : row0 + h, col0 : col0 + w].copy()

        return FunctionMap(fill)

    def __call__(self, values):
        raise TypeError("OracleCompensator must be bound to a location with .at()")


def restore_pointcloud(points, cfg: ProjectionConfig, boxes, compensator, r_max=R_MAX):
    """Densify the cloud inside each range-image box and lift it back to 3D.

    Boxes are handled in descending score; a canvas cell written by an
    earlier box is not overwritten. Outside boxes only the original pixels
    (even canvas cells) are populated, so with no boxes this equals
    ``unproject(project(points))``.
    """
    ri = project(points, cfg)
    H2, W2 = 2 * cfg.H, 2 * cfg.W
    rng_c = np.zeros((H2, W2))
    int_c = np.zeros((H2, W2))
    val_c = np.zeros((H2, W2), dtype=bool)
    rng_c[::2, ::2] = ri.range
    int_c[::2, ::2] = ri.intensity
    val_c[::2, ::2] = ri.valid
    done = np.zeros((H2, W2), dtype=bool)
    for box in sorted(boxes, key=lambda b: -b.score):
        reg = extract_region(ri, box)
        rp = upsample_with_mask(reg.range)
        a0, b0 = 2 * reg.row0, 2 * reg.col0
        comp = compensator.at(a0, b0) if hasattr(compensator, "at") else compensator
        out = compose_restore(rp, comp)
        h2, w2 = out.shape
        win = (slice(a0, a0 + h2), slice(b0, b0 + w2))
        fresh = ~done[win] & (rp.mask == 0)
        ok = fresh & (out > 0) & (out <= r_max)
        src_int = np.repeat(np.repeat(reg.intensity, 2, axis=0), 2, axis=1)
        rng_c[win] = np.where(fresh, np.where(ok, out, 0.0), rng_c[win])
        int_c[win] = np.where(fresh, np.where(ok, src_int, 0.0), int_c[win])
        val_c[win] = np.where(fresh, ok, val_c[win])
        done[win] = True
    rows, cols = np.nonzero(val_c)
    if rows.size == 0:
        return empty_cloud()
    return unproject_at(rows / 2.0 + 0.5, cols / 2.0 + 0.5, rng_c[rows, cols], int_c[rows, cols], cfg)


def boxes_from_points(points, cfg: ProjectionConfig, min_pixels=1):
    """Tight range-image box around where a point cluster projects."""
    ri, idx = project(points, cfg, return_index=True)
    rows, cols = np.nonzero(ri.valid)
    if rows.size < min_pixels:
        return None
    # clusters straddling the azimuth seam are not handled; they yield wide boxes
    r0, r1, c0, c1 = rows.min(), rows.max(), cols.min(), cols.max()
    return Box2D(float(c0 + c1) / 2.0, float(r0 + r1) / 2.0, float(c1 - c0 + 1), float(r1 - r0 + 1))

