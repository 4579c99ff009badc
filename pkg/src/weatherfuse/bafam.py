"""Bidirectional BEV fusion and alignment.

Cross-attention adaptive fusion (CAAF) lets LiDAR tokens attend to camera
tokens, then camera tokens attend to the corrected LiDAR tokens; the
averaged result goes through an MLP and is added back to both inputs.
Bidirectional BEV alignment (B2A) then runs a two-stage cascade of
offset prediction + grid sampling, first aligning the camera map against
the fused LiDAR map and then the fused LiDAR map against the aligned
camera map.

Feature maps are ``[C, H, W]`` arrays; tokens are ``[N, C]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import (
    MLP,
    ConvStack,
    LinearMap,
    ParametricMap,
    adaptive_avg_pool,
    as_tensor,
    grid_sample_backward,
    grid_sample_bilinear,
    identity_grid,
    softmax,
)

LAMBDA_1 = 0.3
LAMBDA_2 = 0.7
TRAIN_SHIFT_CELLS = 2
TRAIN_OFFSET_NOISE = 0.5

MODALITIES = ("camera", "lidar", "fused", "aligned")


@dataclass
class BevFeature:
    data: np.ndarray
    modality: str

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        self.data = as_tensor(self.data)
        if self.data.ndim != 3:
            raise ValueError("BEV feature must be [C, H, W]")


def _data(x):
    return x.data if isinstance(x, BevFeature) else as_tensor(x)


# ------------------------------------------------------------------ CAAF


@dataclass
class AttentionMaps:
    q: LinearMap
    k: LinearMap
    v: LinearMap
    o: LinearMap | None

    @classmethod
    def build(cls, channels, dim, rng=None, scale=0.1):
        maps = [LinearMap(channels, dim), LinearMap(channels, dim), LinearMap(channels, dim), LinearMap(dim, channels)]
        if rng is not None:
            maps = [m.init_params(rng, scale) for m in maps]
        return cls(*maps)


def cross_attention(query, key, value, maps: AttentionMaps, heads):
    """Multi-head ``softmax(Q K^T / sqrt(d)) V`` with ``d`` the per-head width.

    Inputs are token matrices; the head outputs are concatenated and passed
    through ``maps.o`` (skipped when it is ``None``).
    """
    query, key, value = as_tensor(query), as_tensor(key), as_tensor(value)
    if key.shape[0] != value.shape[0]:
        raise ValueError("key and value must have the same number of tokens")
    Q, K, V = maps.q(query), maps.k(key), maps.v(value)
    D = Q.shape[1]
    if heads < 1 or D % heads or K.shape[1] != D or V.shape[1] != D:
        raise ValueError(f"projection width {D} is not divisible into {heads} heads")
    d = D // heads
    out = np.empty((Q.shape[0], D))
    for h in range(heads):
        s = slice(h * d, (h + 1) * d)
        w = softmax(Q[:, s] @ K[:, s].T / np.sqrt(d), axis=1)
        out[:, s] = w @ V[:, s]
    return maps.o(out) if maps.o is not None else out


@dataclass
class CaafParams:
    lidar_attn: AttentionMaps
    camera_attn: AttentionMaps
    mlp: MLP
    heads: int = 4
    pool: tuple = (8, 8)

    def __post_init__(self):
        dim = self.lidar_attn.q.out_dim
        if dim % self.heads:
            raise ValueError("head count must divide the projection width")

    @classmethod
    def build(cls, channels, dim=32, heads=4, pool=(8, 8), hidden=32, rng=None, scale=0.1):
        """Zero parameters when ``rng`` is None, else Gaussian with ``scale``."""
        mlp = MLP(channels, hidden, channels)
        if rng is not None:
            mlp = mlp.init_params(rng, scale)
        return cls(
            AttentionMaps.build(channels, dim, rng, scale),
            AttentionMaps.build(channels, dim, rng, scale),
            mlp,
            heads,
            tuple(pool),
        )


def _tokens(x):
    return x.reshape(x.shape[0], -1).T


def caaf_fuse(F_C, F_L, p: CaafParams) -> BevFeature:
    """Fuse camera and LiDAR BEV maps of equal shape.

    Attention runs on adaptively pooled tokens. The MLP output is bilinearly
    upsampled to full resolution and the two input maps are added there, so
    with all-zero parameters the result is exactly ``F_C + F_L``.
    """
    fc, fl = _data(F_C), _data(F_L)
    if fc.shape != fl.shape:
        raise ValueError(f"camera {fc.shape} and LiDAR {fl.shape} BEV shapes differ")
    C, H, W = fc.shape
    hp, wp = min(p.pool[0], H), min(p.pool[1], W)
    tc = _tokens(adaptive_avg_pool(fc, hp, wp))
    tl = _tokens(adaptive_avg_pool(fl, hp, wp))
    tl_hat = tl + cross_attention(tl, tc, tc, p.lidar_attn, p.heads)
    tc_hat = tc + cross_attention(tc, tl_hat, tl_hat, p.camera_attn, p.heads)
    delta = p.mlp((tc_hat + tl_hat) / 2.0).T.reshape(C, hp, wp)
    up = grid_sample_bilinear(delta, identity_grid(H, W))
    return BevFeature(up + fc + fl, "fused")


# ------------------------------------------------------------------- B2A


def offsets_to_grid(offsets):
    """Per-cell offsets (``[2, H, W]``, channel 0 horizontal, in cells) to a
    clamped normalised sampling grid ``[H, W, 2]``."""
    offsets = as_tensor(offsets)
    _, H, W = offsets.shape
    grid = identity_grid(H, W)
    if W > 1:
        grid[..., 0] += 2.0 * offsets[0] / (W - 1)
    if H > 1:
        grid[..., 1] += 2.0 * offsets[1] / (H - 1)
    return np.clip(grid, -1.0, 1.0)


def _grid_backward_to_offsets(offsets, grad_grid):
    _, H, W = offsets.shape
    raw = identity_grid(H, W)
    g = np.zeros_like(offsets)
    if W > 1:
        raw[..., 0] += 2.0 * offsets[0] / (W - 1)
        g[0] = grad_grid[..., 0] * (2.0 / (W - 1)) * (np.abs(raw[..., 0]) < 1.0)
    if H > 1:
        raw[..., 1] += 2.0 * offsets[1] / (H - 1)
        g[1] = grad_grid[..., 1] * (2.0 / (H - 1)) * (np.abs(raw[..., 1]) < 1.0)
    return g


def shift_zero_fill(x, dy, dx):
    """Translate ``[C, H, W]`` by whole cells, filling vacated cells with 0."""
    out = np.zeros_like(x)
    _, H, W = x.shape
    src_r = slice(max(0, -dy), min(H, H - dy))
    dst_r = slice(max(0, dy), min(H, H + dy))
    src_c = slice(max(0, -dx), min(W, W - dx))
    dst_c = slice(max(0, dx), min(W, W + dx))
    out[:, dst_r, dst_c] = x[:, src_r, src_c]
    return out


def b2a_stage(query_ref, to_align, offset_net, post_conv):
    """One alignment stage; returns ``(aligned, offsets)``.

    The offsets predicted from ``[query_ref, to_align]`` resample
    ``to_align`` into spatial weights that rescale it before ``post_conv``.
    """
    q, a = _data(query_ref), _data(to_align)
    if q.shape[1:] != a.shape[1:]:
        raise ValueError("stage inputs must share spatial dims")
    offsets = offset_net(q, a)
    if offsets.shape != (2,) + a.shape[1:]:
        raise ValueError(f"offset net must output [2, H, W], got {offsets.shape}")
    weights = grid_sample_bilinear(a, offsets_to_grid(offsets))
    return post_conv(weights * a), offsets


def _stage_backward(q, a, offset_net, post_conv, p_off, p_post, grad_out):
    offsets = offset_net.apply(p_off, q, a)
    grid = offsets_to_grid(offsets)
    weights = grid_sample_bilinear(a, grid)
    gp_post, (g_adj,) = post_conv.vjp(p_post, (weights * a,), grad_out)
    g_a = g_adj * weights
    g_feat, g_grid = grid_sample_backward(a, grid, g_adj * a)
    g_a = g_a + g_feat
    gp_off, (g_q, g_a2) = offset_net.vjp(p_off, (q, a), _grid_backward_to_offsets(offsets, g_grid))
    return gp_off, gp_post, g_q, g_a + g_a2


@dataclass
class B2aParams:
    offset1: ConvStack
    post1: ConvStack
    offset2: ConvStack
    post2: ConvStack
    intermediate: ConvStack
    supervision: ConvStack
    lambdas: tuple = (LAMBDA_1, LAMBDA_2)

    @classmethod
    def build(cls, c_cam, c_lidar, hidden=8, rng=None, scale=0.1):
        """Identity-calibrated nets when ``rng`` is None: zero offsets,
        identity post-convolutions, LiDAR-channel pass-through for the
        intermediate and supervision maps."""
        off1 = ConvStack([c_lidar + c_cam, hidden, 2], activation="cbr", n_inputs=2)
        off2 = ConvStack([c_cam + c_lidar, hidden, 2], activation="cbr", n_inputs=2)
        if rng is None:
            return cls(
                off1,
                ConvStack.identity(c_cam),
                off2,
                ConvStack.identity(c_lidar),
                ConvStack.select(c_cam + c_lidar, range(c_cam, c_cam + c_lidar), n_inputs=2),
                ConvStack.select(c_lidar + c_cam, range(c_lidar), n_inputs=2),
            )
        return cls(
            off1.init_params(rng, scale),
            ConvStack([c_cam, c_cam]).init_params(rng, scale),
            off2.init_params(rng, scale),
            ConvStack([c_lidar, c_lidar]).init_params(rng, scale),
            ConvStack([c_cam + c_lidar, c_lidar], n_inputs=2).init_params(rng, scale),
            ConvStack([c_lidar + c_cam, hidden, c_lidar], activation="cbr", n_inputs=2).init_params(rng, scale),
        )

    def maps(self):
        return [self.offset1, self.post1, self.offset2, self.post2, self.intermediate]


@dataclass
class B2aResult:
    aligned: BevFeature
    offsets1: np.ndarray
    offsets2: np.ndarray
    camera_aligned: np.ndarray
    intermediate: np.ndarray
    shift: tuple = field(default=(0, 0))


def b2a_align(F_fused_L, F_C, p: B2aParams, rng=None, train_mode=False) -> B2aResult:
    """Two-stage cascade. Training mode shifts the fused LiDAR map by random
    whole cells before stage 1 and jitters the stage-1 output with Gaussian
    offset noise before stage 2; inference uses neither and draws nothing
    from ``rng``."""
    fl, fc = _data(F_fused_L), _data(F_C)
    if fl.shape[1:] != fc.shape[1:]:
        raise ValueError("fused LiDAR and camera BEV must share spatial dims")
    shift = (0, 0)
    fl_query = fl
    if train_mode:
        if rng is None:
            raise ValueError("training mode needs an rng")
        dy, dx = (int(v) for v in rng.integers(-TRAIN_SHIFT_CELLS, TRAIN_SHIFT_CELLS + 1, size=2))
        shift = (dy, dx)
        fl_query = shift_zero_fill(fl, dy, dx)
    cam_aligned, off1 = b2a_stage(fl_query, fc, p.offset1, p.post1)
    cam_query = cam_aligned
    if train_mode:
        noise = rng.normal(0.0, TRAIN_OFFSET_NOISE, (2,) + fc.shape[1:])
        cam_query = grid_sample_bilinear(cam_aligned, offsets_to_grid(noise))
    lidar_aligned, off2 = b2a_stage(cam_query, fl, p.offset2, p.post2)
    inter = p.intermediate(cam_query, fl)
    return B2aResult(BevFeature(lidar_aligned, "aligned"), off1, off2, cam_aligned, inter, shift)


class B2aCascade(ParametricMap):
    """Inference-mode cascade as one parametric map of ``(F_fused_L, F_C)``.

    Output is ``concat([intermediate, aligned])`` along channels; parameters
    are the offset, post and intermediate nets laid end to end.
    """

    n_inputs = 2

    def __init__(self, p: B2aParams, params=None):
        self.p = p
        self.sizes = [m.params.size for m in p.maps()]
        if params is None:
            params = np.concatenate([m.params for m in p.maps()])
        super().__init__(params)

    def n_params(self):
        return sum(self.sizes)

    def _split(self, params):
        return np.split(params, np.cumsum(self.sizes)[:-1])

    def _rebuilt(self, params):
        parts = self._split(params)
        maps = [m.with_params(q) for m, q in zip(self.p.maps(), parts)]
        return B2aParams(*maps, self.p.supervision, self.p.lambdas)

    def apply(self, params, F_fused_L, F_C):
        res = b2a_align(F_fused_L, F_C, self._rebuilt(params))
        return np.concatenate([res.intermediate, res.aligned.data])

    def vjp(self, params, inputs, grad_out):
        fl, fc = (as_tensor(x) for x in inputs)
        p1, q1, p2, q2, pi = self._split(params)
        p = self.p
        cam_aligned = b2a_stage(fl, fc, p.offset1.with_params(p1), p.post1.with_params(q1))[0]
        c_inter = p.intermediate.channels[-1]
        g_inter, g_out = grad_out[:c_inter], grad_out[c_inter:]
        gpi, (g_cam_a, g_fl_a) = p.intermediate.vjp(pi, (cam_aligned, fl), g_inter)
        gp2, gq2, g_cam_b, g_fl_b = _stage_backward(cam_aligned, fl, p.offset2, p.post2, p2, q2, g_out)
        gp1, gq1, g_fl_c, g_fc = _stage_backward(fl, fc, p.offset1, p.post1, p1, q1, g_cam_a + g_cam_b)
        return np.concatenate([gp1, gq1, gp2, gq2, gpi]), (g_fl_a + g_fl_b + g_fl_c, g_fc)


def build_supervision(F_L_clean, F_C_clean, supervision_map):
    fl, fc = _data(F_L_clean), _data(F_C_clean)
    if fl.shape[1:] != fc.shape[1:]:
        raise ValueError("clean BEV maps must share spatial dims")
    out = supervision_map(fl, fc)
    if out.shape[0] != fl.shape[0]:
        raise ValueError(f"supervision map must output {fl.shape[0]} channels, got {out.shape[0]}")
    return out


def _mse(a, b):
    d = as_tensor(a) - as_tensor(b)
    return float(np.mean(d * d)), d


def alignment_loss(F_S, intermediate, aligned, lambda1=LAMBDA_1, lambda2=LAMBDA_2, return_grad=False):
    """``lambda1 * MSE(F_S, intermediate) + lambda2 * MSE(F_S, aligned)``."""
    fs = _data(F_S)
    inter, al = _data(intermediate), _data(aligned)
    if fs.shape != inter.shape or fs.shape != al.shape:
        raise ValueError("alignment loss inputs must share a shape")
    l1, d1 = _mse(fs, inter)
    l2, d2 = _mse(fs, al)
    loss = lambda1 * l1 + lambda2 * l2
    if not return_grad:
        return loss
    return loss, (-2.0 * lambda1 * d1 / d1.size, -2.0 * lambda2 * d2 / d2.size)
