"""Small numpy substrate: softmax, pooling, bilinear grid sampling, 3x3
convolutions and the parametric maps that stand in for learned networks.

Tensors are plain ``np.ndarray`` in float64. Feature maps are channel-first
``[C, H, W]``; token matrices are ``[N, D]``.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericError

RNG_ALGORITHM = "philox4x64"

# grid coordinates this close to an integer pixel index are snapped onto it
_SNAP = 1e-9


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Counter-based generator for ``seed`` and an optional substream path.

    ``make_rng(s, 3, 1)`` is the substream for, say, frame 3 / stage 1. The
    same (seed, keys) gives the same stream on every platform.
    """
    ss = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def check_finite(x, what="value"):
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite {what}")
    return x


# ---------------------------------------------------------------- primitives


def softmax(x, axis=-1):
    x = as_tensor(x)
    if x.ndim == 0 or not -x.ndim <= axis < x.ndim:
        raise ValueError(f"invalid axis {axis} for tensor of rank {x.ndim}")
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def _pool_bins(n_in, n_out):
    return [(math.floor(i * n_in / n_out), math.ceil((i + 1) * n_in / n_out)) for i in range(n_out)]


def adaptive_avg_pool(x, out_h, out_w):
    """Adaptive average pooling of ``[C, H, W]`` onto ``[C, out_h, out_w]``.

    Bin ``i`` covers ``[floor(i*H/out_h), ceil((i+1)*H/out_h))``, the usual
    adaptive-pooling partition, so bins may overlap when sizes do not divide.
    """
    x = as_tensor(x)
    if x.ndim != 3:
        raise ValueError("adaptive_avg_pool expects [C, H, W]")
    if out_h < 1 or out_w < 1:
        raise ValueError("output dims must be positive")
    C, H, W = x.shape
    if out_h > H or out_w > W:
        raise ValueError(f"cannot pool {H}x{W} up to {out_h}x{out_w}")
    out = np.empty((C, out_h, out_w))
    for i, (r0, r1) in enumerate(_pool_bins(H, out_h)):
        for j, (c0, c1) in enumerate(_pool_bins(W, out_w)):
            out[:, i, j] = x[:, r0:r1, c0:c1].mean(axis=(1, 2))
    return out


def identity_grid(h, w):
    """Normalised ``[h, w, 2]`` grid that samples every pixel centre onto itself."""
    u = np.linspace(-1.0, 1.0, w) if w > 1 else np.zeros(1)
    v = np.linspace(-1.0, 1.0, h) if h > 1 else np.zeros(1)
    grid = np.empty((h, w, 2))
    grid[..., 0] = u[None, :]
    grid[..., 1] = v[:, None]
    return grid


def _grid_to_pixels(grid, H, W):
    # align-corners: -1 -> centre of pixel 0, +1 -> centre of pixel (n-1)
    x = (grid[..., 0] + 1.0) * 0.5 * (W - 1)
    y = (grid[..., 1] + 1.0) * 0.5 * (H - 1)
    for a in (x, y):
        r = np.rint(a)
        near = np.abs(a - r) < _SNAP
        a[near] = r[near]
    return x, y


def _bilinear_corners(x, y, H, W):
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx = x - x0
    fy = y - y0
    corners = []
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            xi = x0 + dx
            yi = y0 + dy
            inside = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
            corners.append((np.clip(yi, 0, H - 1), np.clip(xi, 0, W - 1), wy * wx * inside, dx, dy, inside))
    return corners, fx, fy


def grid_sample_bilinear(feat, grid):
    """Bilinear sampling of ``feat [C, H, W]`` at ``grid [H', W', 2]``.

    ``grid[..., 0]`` is the horizontal coordinate. Coordinates are in
    ``[-1, 1]`` with align-corners semantics; taps outside the image read 0.
    """
    feat = as_tensor(feat)
    grid = as_tensor(grid)
    if grid.ndim != 3 or grid.shape[-1] != 2:
        raise ValueError("grid must have shape [H', W', 2]")
    _, H, W = feat.shape
    x, y = _grid_to_pixels(grid, H, W)
    corners, _, _ = _bilinear_corners(x, y, H, W)
    out = np.zeros((feat.shape[0],) + grid.shape[:2])
    for yi, xi, w, *_ in corners:
        out += feat[:, yi, xi] * w
    return out


def grid_sample_backward(feat, grid, grad_out):
    """Vector-Jacobian product of :func:`grid_sample_bilinear`.

    Returns ``(grad_feat, grad_grid)``.
    """
    feat = as_tensor(feat)
    grid = as_tensor(grid)
    C, H, W = feat.shape
    x, y = _grid_to_pixels(grid, H, W)
    corners, fx, fy = _bilinear_corners(x, y, H, W)
    grad_feat = np.zeros_like(feat)
    gx = np.zeros(grid.shape[:2])
    gy = np.zeros(grid.shape[:2])
    for yi, xi, w, dx, dy, inside in corners:
        np.add.at(grad_feat, (slice(None), yi, xi), grad_out * w)
        val = np.sum(feat[:, yi, xi] * grad_out, axis=0) * inside
        wx = fx if dx else 1.0 - fx
        wy = fy if dy else 1.0 - fy
        gx += val * wy * (1.0 if dx else -1.0)
        gy += val * wx * (1.0 if dy else -1.0)
    grad_grid = np.stack([gx * 0.5 * (W - 1), gy * 0.5 * (H - 1)], axis=-1)
    return grad_feat, grad_grid


def conv2d(x, w, b):
    """Stride-1 'same' convolution (cross-correlation) with an odd kernel."""
    k = w.shape[-1]
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p)))
    cols = sliding_window_view(xp, (k, k), axis=(1, 2))
    return np.einsum("chwij,ocij->ohw", cols, w, optimize=True) + b[:, None, None]


def conv2d_backward(x, w, grad_out):
    """Returns ``(grad_x, grad_w, grad_b)`` for :func:`conv2d`."""
    k = w.shape[-1]
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p)))
    cols = sliding_window_view(xp, (k, k), axis=(1, 2))
    grad_w = np.einsum("chwij,ohw->ocij", cols, grad_out, optimize=True)
    grad_b = grad_out.sum(axis=(1, 2))
    gp = np.pad(grad_out, ((0, 0), (p, p), (p, p)))
    gcols = sliding_window_view(gp, (k, k), axis=(1, 2))
    grad_x = np.einsum("ohwij,ocij->chw", gcols, w[:, :, ::-1, ::-1], optimize=True)
    return grad_x, grad_w, grad_b


_ACTIVATIONS = {
    "tanh": (np.tanh, lambda y: 1.0 - y * y),
    "relu": (lambda z: np.maximum(z, 0.0), lambda y: (y > 0).astype(np.float64)),
    "none": (lambda z: z, lambda y: np.ones_like(y)),
}


# ---------------------------------------------------------- parametric maps


class ParametricMap:
    """A pure function of ``(params, *inputs)`` with a flat parameter vector.

    Subclasses implement :meth:`apply` and, when they ship analytic
    gradients, :meth:`vjp`. ``params`` is stored read-only; use
    :meth:`with_params` to get a re-parameterised copy.
    """

    n_inputs = 1

    def __init__(self, params=None):
        n = self.n_params()
        p = np.zeros(n) if params is None else as_tensor(params).reshape(-1).copy()
        if p.size != n:
            raise ValueError(f"{type(self).__name__} expects {n} params, got {p.size}")
        p.flags.writeable = False
        self.params = p

    def n_params(self) -> int:
        raise NotImplementedError

    def apply(self, params, *inputs):
        raise NotImplementedError

    def vjp(self, params, inputs, grad_out):
        """Return ``(grad_params, grad_inputs)`` for upstream ``grad_out``."""
        raise NotImplementedError(f"{type(self).__name__} has no analytic gradient")

    def output_shape(self, *input_shapes):
        return self.apply(self.params, *(np.zeros(s) for s in input_shapes)).shape

    def __call__(self, *inputs):
        return self.apply(self.params, *inputs)

    def with_params(self, params):
        clone = object.__new__(type(self))
        clone.__dict__.update(self.__dict__)
        p = as_tensor(params).reshape(-1).copy()
        if p.size != self.params.size:
            raise ValueError("parameter count mismatch")
        p.flags.writeable = False
        clone.params = p
        return clone

    def init_params(self, rng, scale=0.1):
        return self.with_params(rng.normal(0.0, scale, self.params.size))


class FunctionMap(ParametricMap):
    """Wraps a parameter-free callable; used for oracles and fixed transforms."""

    def __init__(self, fn, n_inputs=1):
        self.fn = fn
        self.n_inputs = n_inputs
        super().__init__()

    def n_params(self):
        return 0

    def apply(self, params, *inputs):
        return as_tensor(self.fn(*inputs))


class LinearMap(ParametricMap):
    """``y = x @ W.T + b`` over the last axis."""

    def __init__(self, in_dim, out_dim, params=None):
        self.in_dim = in_dim
        self.out_dim = out_dim
        super().__init__(params)

    def n_params(self):
        return self.out_dim * self.in_dim + self.out_dim

    def unpack(self, params):
        nw = self.out_dim * self.in_dim
        return params[:nw].reshape(self.out_dim, self.in_dim), params[nw:]

    def apply(self, params, x):
        W, b = self.unpack(params)
        return as_tensor(x) @ W.T + b

    def vjp(self, params, inputs, grad_out):
        (x,) = inputs
        W, _ = self.unpack(params)
        x2 = as_tensor(x).reshape(-1, self.in_dim)
        g2 = grad_out.reshape(-1, self.out_dim)
        gp = np.concatenate([(g2.T @ x2).ravel(), g2.sum(axis=0)])
        return gp, ((grad_out @ W).reshape(np.shape(x)),)

    @classmethod
    def identity(cls, dim):
        return cls(dim, dim, np.concatenate([np.eye(dim).ravel(), np.zeros(dim)]))


class MLP(ParametricMap):
    """Two linear layers with a smooth activation between them."""

    def __init__(self, in_dim, hidden, out_dim, activation="tanh", params=None):
        self.first = LinearMap(in_dim, hidden)
        self.second = LinearMap(hidden, out_dim)
        self.activation = activation
        super().__init__(params)

    def n_params(self):
        return self.first.params.size + self.second.params.size

    def _split(self, params):
        n1 = self.first.params.size
        return params[:n1], params[n1:]

    def apply(self, params, x):
        p1, p2 = self._split(params)
        act, _ = _ACTIVATIONS[self.activation]
        return self.second.apply(p2, act(self.first.apply(p1, x)))

    def vjp(self, params, inputs, grad_out):
        (x,) = inputs
        p1, p2 = self._split(params)
        act, dact = _ACTIVATIONS[self.activation]
        h = act(self.first.apply(p1, x))
        g2, (gh,) = self.second.vjp(p2, (h,), grad_out)
        g1, (gx,) = self.first.vjp(p1, (x,), gh * dact(h))
        return np.concatenate([g1, g2]), (gx,)


class ConvStack(ParametricMap):
    """Stack of 3x3 'same' convolutions over channel-concatenated inputs.

    ``channels = [c_in, c_1, ..., c_out]``. Hidden layers use ``activation``;
    ``"cbr"`` means conv + per-channel affine + ReLU. The last layer is linear
    unless ``final_activation`` says otherwise. Several inputs are
    concatenated along the channel axis, so ``c_in`` is their channel sum.
    """

    def __init__(self, channels, activation="tanh", final_activation="none", kernel=3, n_inputs=1, params=None):
        if kernel % 2 != 1:
            raise ValueError("kernel size must be odd")
        self.channels = list(channels)
        self.activation = activation
        self.final_activation = final_activation
        self.kernel = kernel
        self.n_inputs = n_inputs
        super().__init__(params)

    def _layers(self):
        k = self.kernel
        layers = []
        n = len(self.channels) - 1
        for i in range(n):
            cin, cout = self.channels[i], self.channels[i + 1]
            act = self.activation if i < n - 1 else self.final_activation
            layers.append((cin, cout, act))
        return layers, k

    def n_params(self):
        layers, k = self._layers()
        total = 0
        for cin, cout, act in layers:
            total += cout * cin * k * k + cout + (2 * cout if act == "cbr" else 0)
        return total

    def unpack(self, params):
        layers, k = self._layers()
        out, pos = [], 0
        for cin, cout, act in layers:
            nw = cout * cin * k * k
            w = params[pos : pos + nw].reshape(cout, cin, k, k)
            pos += nw
            b = params[pos : pos + cout]
            pos += cout
            affine = None
            if act == "cbr":
                affine = (params[pos : pos + cout], params[pos + cout : pos + 2 * cout])
                pos += 2 * cout
            out.append((w, b, act, affine))
        return out

    def _concat(self, inputs):
        if len(inputs) != self.n_inputs:
            raise ValueError(f"expected {self.n_inputs} inputs, got {len(inputs)}")
        x = np.concatenate([as_tensor(t) for t in inputs], axis=0)
        if x.shape[0] != self.channels[0]:
            raise ValueError(f"expected {self.channels[0]} input channels, got {x.shape[0]}")
        return x

    def _forward(self, params, x):
        cache = []
        for w, b, act, affine in self.unpack(params):
            z = conv2d(x, w, b)
            if act == "cbr":
                scale, shift = affine
                a = z * scale[:, None, None] + shift[:, None, None]
                y = np.maximum(a, 0.0)
            else:
                a = None
                y = _ACTIVATIONS[act][0](z)
            cache.append((x, z, a, y))
            x = y
        return x, cache

    def apply(self, params, *inputs):
        return self._forward(params, self._concat(inputs))[0]

    def vjp(self, params, inputs, grad_out):
        x = self._concat(inputs)
        _, cache = self._forward(params, x)
        grads = []
        g = grad_out
        for (w, b, act, affine), (xin, z, a, y) in zip(reversed(self.unpack(params)), reversed(cache)):
            if act == "cbr":
                scale, _ = affine
                ga = g * (a > 0)
                gscale = np.sum(ga * z, axis=(1, 2))
                gshift = np.sum(ga, axis=(1, 2))
                gz = ga * scale[:, None, None]
            else:
                gz = g * _ACTIVATIONS[act][1](y)
            gx, gw, gb = conv2d_backward(xin, w, gz)
            layer = [gw.ravel(), gb]
            if act == "cbr":
                layer += [gscale, gshift]
            grads.append(np.concatenate(layer))
            g = gx
        gp = np.concatenate(grads[::-1]) if grads else np.zeros(0)
        splits = np.cumsum([np.shape(t)[0] for t in inputs])[:-1]
        return gp, tuple(np.split(g, splits, axis=0))

    @classmethod
    def identity(cls, c):
        """Single linear layer whose kernels copy each channel through."""
        k = 3
        w = np.zeros((c, c, k, k))
        for i in range(c):
            w[i, i, 1, 1] = 1.0
        return cls([c, c], params=np.concatenate([w.ravel(), np.zeros(c)]))

    @classmethod
    def select(cls, c_in, channels, n_inputs=1):
        """Single linear layer copying the listed input channels, in order."""
        channels = list(channels)
        k = 3
        w = np.zeros((len(channels), c_in, k, k))
        for o, i in enumerate(channels):
            w[o, i, 1, 1] = 1.0
        return cls([c_in, len(channels)], n_inputs=n_inputs, params=np.concatenate([w.ravel(), np.zeros(len(channels))]))


# ------------------------------------------------------------ gradient check


def grad_check(fmap: ParametricMap, loss, inputs, eps=1e-5):
    """Largest relative disagreement between analytic and central-difference
    parameter gradients.

    ``loss(output)`` must return ``(value, d value / d output)``. The error
    for each parameter is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = np.array(fmap.params, dtype=np.float64)
    if params.size == 0:
        return 0.0
    value, grad_out = loss(fmap.apply(params, *inputs))
    check_finite(value, "loss")
    analytic, _ = fmap.vjp(params, inputs, grad_out)
    worst = 0.0
    for i in range(params.size):
        hi = params.copy()
        lo = params.copy()
        hi[i] += eps
        lo[i] -= eps
        f_hi = loss(fmap.apply(hi, *inputs))[0]
        f_lo = loss(fmap.apply(lo, *inputs))[0]
        check_finite(f_hi, "loss")
        check_finite(f_lo, "loss")
        numeric = (f_hi - f_lo) / (2 * eps)
        worst = max(worst, abs(analytic[i] - numeric) / max(1.0, abs(numeric)))
    return worst


def squared_error_loss(target):
    """``sum((y - target)^2)`` in the ``(value, grad)`` form used by :func:`grad_check`."""
    target = as_tensor(target)

    def loss(y):
        d = y - target
        return float(np.sum(d * d)), 2.0 * d

    return loss
