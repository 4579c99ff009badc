"""Box IoU, KITTI-style AP at 40 recall positions, severity averaging and a
small anchor-grid 3D box decoder.

Boxes live in the LiDAR frame: ``center`` is the geometric centre, ``dims``
are ``(l, w, h)`` with ``l`` along the heading, ``yaw`` rotates about +z.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

N_RECALL = 40
DIFFICULTIES = ("easy", "moderate", "hard")

# KITTI object benchmark gating per difficulty: min 2D box height (px),
# max occlusion level, max truncation
KITTI_MIN_HEIGHT = (40, 25, 25)
KITTI_MAX_OCCLUSION = (0, 1, 2)
KITTI_MAX_TRUNCATION = (0.15, 0.30, 0.50)

ANCHOR_SIZE = (3.9, 1.6, 1.56)
ANCHOR_ROTATIONS = (0.0, 1.57)


def wrap_angle(a):
    """Map an angle into ``(-pi, pi]``; in-range angles pass through exactly."""
    if -math.pi < a <= math.pi:
        return a
    a = math.fmod(a + math.pi, 2 * math.pi)
    if a <= 0:
        a += 2 * math.pi
    return a - math.pi


@dataclass(frozen=True)
class Box3D:
    center: tuple
    dims: tuple
    yaw: float = 0.0
    score: float = 1.0
    difficulty: str = "moderate"
    ignore: bool = False

    def __post_init__(self):
        if len(self.center) != 3 or len(self.dims) != 3:
            raise ValueError("center and dims must have three entries")
        if min(self.dims) <= 0:
            raise ValueError(f"box dims must be positive, got {self.dims}")
        object.__setattr__(self, "center", tuple(float(v) for v in self.center))
        object.__setattr__(self, "dims", tuple(float(v) for v in self.dims))
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))

    def bev_corners(self):
        """Counter-clockwise footprint corners, ``[4, 2]``."""
        x, y, _ = self.center
        l, w, _ = self.dims
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        local = np.array([[l / 2, w / 2], [-l / 2, w / 2], [-l / 2, -w / 2], [l / 2, -w / 2]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array([x, y])

    def as_dict(self):
        return {
            "center": list(self.center),
            "dims": list(self.dims),
            "yaw": self.yaw,
            "score": self.score,
        }


# -------------------------------------------------------------------- IoU


def polygon_area(poly):
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def clip_polygon(subject, clip):
    """Sutherland-Hodgman clipping of ``subject`` by the convex CCW ``clip``."""
    out = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        a, b = clip[i], clip[(i + 1) % n]
        edge = b - a

        def inside(p):
            return edge[0] * (p[1] - a[1]) - edge[1] * (p[0] - a[0]) >= 0

        def cross(p, q):
            d = (q[0] - p[0], q[1] - p[1])
            den = edge[0] * d[1] - edge[1] * d[0]
            t = (edge[0] * (a[1] - p[1]) - edge[1] * (a[0] - p[0])) / den
            return (p[0] + t * d[0], p[1] + t * d[1])

        src, out = out, []
        if not src:
            break
        prev = src[-1]
        for cur in src:
            if inside(cur):
                if not inside(prev):
                    out.append(cross(prev, cur))
                out.append(cur)
            elif inside(prev):
                out.append(cross(prev, cur))
            prev = cur
    return np.array(out) if out else np.zeros((0, 2))


def _axis_overlap(c1, s1, c2, s2):
    return max(0.0, min(c1 + s1 / 2, c2 + s2 / 2) - max(c1 - s1 / 2, c2 - s2 / 2))


def bev_intersection(a: Box3D, b: Box3D):
    return polygon_area(clip_polygon(a.bev_corners(), b.bev_corners()))


def iou(a: Box3D, b: Box3D, mode="3d"):
    """IoU in one of ``"2d-axis"`` (BEV rectangles, yaw ignored),
    ``"bev-rotated"`` or ``"3d"``."""
    for box in (a, b):
        if min(box.dims) <= 0:
            raise ValueError("degenerate box")
    la, wa, ha = a.dims
    lb, wb, hb = b.dims
    if mode == "2d-axis":
        inter = _axis_overlap(a.center[0], la, b.center[0], lb) * _axis_overlap(a.center[1], wa, b.center[1], wb)
        size_a, size_b = la * wa, lb * wb
    elif mode == "bev-rotated":
        inter = bev_intersection(a, b)
        size_a, size_b = la * wa, lb * wb
    elif mode == "3d":
        inter = bev_intersection(a, b) * _axis_overlap(a.center[2], ha, b.center[2], hb)
        size_a, size_b = la * wa * ha, lb * wb * hb
    else:
        raise ValueError(f"unknown IoU mode {mode!r}")
    # absorb clipping round-off when one box (nearly) contains the other
    smaller = min(size_a, size_b)
    if inter >= smaller * (1.0 - 1e-12):
        inter = smaller
    union = size_a + size_b - inter
    return float(min(1.0, max(0.0, inter / union))) if union > 0 else 0.0


# --------------------------------------------------------------------- AP


def match_detections(dets, gts, iou_thresh, mode="3d"):
    """Greedy matching in descending score.

    Returns ``(order, labels)`` with ``labels[i]`` in ``{"tp", "fp",
    "ignore"}`` for ``dets[order[i]]``. A detection takes the unmatched GT
    with the highest IoU at or above ``iou_thresh``; matching an ignored GT
    (don't-care or harder than the evaluated level) makes the detection
    ignored rather than a false positive.
    """
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    taken = [False] * len(gts)
    labels = []
    for i in order:
        d = dets[i]
        best, best_iou = -1, iou_thresh
        for j, g in enumerate(gts):
            if taken[j]:
                continue
            o = iou(d, g, mode)
            if o >= best_iou and (best < 0 or o > best_iou):
                best, best_iou = j, o
        if best < 0:
            labels.append("ignore" if d.ignore else "fp")
        else:
            taken[best] = True
            labels.append("ignore" if gts[best].ignore or d.ignore else "tp")
    return order, labels


def ap_r40(dets, gts, iou_thresh=0.7, mode="3d"):
    """Average precision sampled at recalls 1/40, 2/40, ..., 1.

    Precision at recall ``r`` is the best precision reached at any recall
    ``>= r``; AP is 0 when there are no (non-ignored) ground truths.
    """
    return ap_r40_frames([(dets, gts)], iou_thresh, mode)


def ap_r40_frames(frames, iou_thresh=0.7, mode="3d"):
    """AP over several frames: match per frame, rank detections globally."""
    n_gt = 0
    scored = []
    for dets, gts in frames:
        n_gt += sum(1 for g in gts if not g.ignore)
        order, labels = match_detections(dets, gts, iou_thresh, mode)
        scored.extend((dets[i].score, lab) for i, lab in zip(order, labels) if lab != "ignore")
    if n_gt == 0:
        return 0.0
    # stable sort keeps within-frame greedy order for tied scores
    scored.sort(key=lambda sl: -sl[0])
    tp = fp = 0
    curve = []
    for _, lab in scored:
        if lab == "tp":
            tp += 1
        else:
            fp += 1
        curve.append((tp, tp / (tp + fp)))
    total = 0.0
    for k in range(1, N_RECALL + 1):
        # recall tp / n_gt >= k / 40, compared in integers
        total += max((p for t, p in curve if t * N_RECALL >= k * n_gt), default=0.0)
    return total / N_RECALL


def aggregate(per_severity):
    """Mean AP over severities 1..5 (a mapping or a length-5 sequence)."""
    if isinstance(per_severity, dict):
        missing = [s for s in range(1, 6) if s not in per_severity]
        if missing or len(per_severity) != 5:
            raise ValueError(f"need exactly severities 1..5, missing {missing}")
        values = [per_severity[s] for s in range(1, 6)]
    else:
        values = list(per_severity)
        if len(values) != 5:
            raise ValueError("need exactly five severities")
    return float(sum(values) / 5.0)


def kitti_difficulty(bbox_height, occlusion, truncation):
    """Easiest KITTI level a GT box qualifies for, or ``None``."""
    for level, name in enumerate(DIFFICULTIES):
        if (
            bbox_height >= KITTI_MIN_HEIGHT[level]
            and occlusion <= KITTI_MAX_OCCLUSION[level]
            and truncation <= KITTI_MAX_TRUNCATION[level]
        ):
            return name
    return None


def gate_for_level(gts, level="moderate"):
    """Mark GTs that do not qualify for ``level`` as ignored (don't care).

    A GT qualifies when its own difficulty is at or below ``level``;
    harder or unlabelled ones stay in the pool so detections on them are
    not counted as false positives.
    """
    rank = DIFFICULTIES.index(level)
    out = []
    for g in gts:
        ok = g.difficulty in DIFFICULTIES and DIFFICULTIES.index(g.difficulty) <= rank
        out.append(Box3D(g.center, g.dims, g.yaw, g.score, g.difficulty, ignore=g.ignore or not ok))
    return out


# ------------------------------------------------------------- decoding


@dataclass(frozen=True)
class AnchorConfig:
    size: tuple = ANCHOR_SIZE
    rotations: tuple = ANCHOR_ROTATIONS
    z_center: float = -0.95
    extent: tuple = (0.0, 40.96, -20.48, 20.48)
    score_thresh: float = 0.3
    nms_thresh: float = 0.5
    pre_nms: int = 500
    max_boxes: int = 100


def anchor_centers(cfg: AnchorConfig, H, W):
    x0, x1, y0, y1 = cfg.extent
    dx, dy = (x1 - x0) / H, (y1 - y0) / W
    xs = x0 + (np.arange(H) + 0.5) * dx
    ys = y0 + (np.arange(W) + 0.5) * dy
    return np.meshgrid(xs, ys, indexing="ij")


def decode_residuals(anchor, res):
    """Residual decode against one anchor ``(x, y, z, l, w, h, yaw)``.

    Centre offsets are in units of the anchor's footprint diagonal, sizes as
    log ratios, yaw additive.
    """
    xa, ya, za, la, wa, ha, ra = anchor
    diag = math.hypot(la, wa)
    dx, dy, dz, dl, dw, dh, dr = res
    return (xa + dx * diag, ya + dy * diag, za + dz * diag), (la * math.exp(dl), wa * math.exp(dw), ha * math.exp(dh)), ra + dr


def rotated_nms(boxes, thresh):
    order = sorted(range(len(boxes)), key=lambda i: -boxes[i].score)
    kept = []
    for i in order:
        if all(iou(boxes[i], boxes[k], "bev-rotated") <= thresh for k in kept):
            kept.append(i)
    return [boxes[i] for i in kept]


def anchor_decode_3d(score_map, reg_map, cfg: AnchorConfig = AnchorConfig()):
    score_map = np.asarray(score_map, dtype=np.float64)
    reg_map = np.asarray(reg_map, dtype=np.float64)
    A = len(cfg.rotations)
    if score_map.ndim != 3 or score_map.shape[0] != A:
        raise ValueError(f"score map must be [{A}, H, W]")
    if reg_map.shape != (7 * A,) + score_map.shape[1:]:
        raise ValueError(f"regression map must be [{7 * A}, H, W]")
    _, H, W = score_map.shape
    xs, ys = anchor_centers(cfg, H, W)
    cand = np.argwhere(score_map >= cfg.score_thresh)
    if len(cand) == 0:
        return []
    scores = score_map[cand[:, 0], cand[:, 1], cand[:, 2]]
    top = np.argsort(-scores, kind="stable")[: cfg.pre_nms]
    boxes = []
    for a, i, j in cand[top]:
        anchor = (xs[i, j], ys[i, j], cfg.z_center, *cfg.size, cfg.rotations[a])
        center, dims, yaw = decode_residuals(anchor, reg_map[7 * a : 7 * a + 7, i, j])
        boxes.append(Box3D(center, dims, yaw, float(np.clip(score_map[a, i, j], 0.0, 1.0))))
    return rotated_nms(boxes, cfg.nms_thresh)[: cfg.max_boxes]


@dataclass
class EvalReport:
    """AP per (weather, severity), per difficulty, and mAP aggregates."""

    per_condition: dict = field(default_factory=dict)
    per_difficulty: dict = field(default_factory=dict)
    mean_ap: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)
    skipped_frames: list = field(default_factory=list)

    def to_dict(self):
        return {
            "per_condition": {k: {str(s): v for s, v in sorted(d.items())} for k, d in sorted(self.per_condition.items())},
            "per_difficulty": dict(sorted(self.per_difficulty.items())),
            "mAP": dict(sorted(self.mean_ap.items())),
            "notes": list(self.notes),
            "skipped_frames": sorted(self.skipped_frames, key=lambda f: (f["frame"], f.get("condition", ""))),
        }
