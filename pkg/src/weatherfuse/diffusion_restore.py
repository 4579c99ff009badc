"""Conditional diffusion restoration: DDPM forward process, deterministic
DDIM reverse sampler conditioned on the degraded image, and the
noise-prediction training loss.

Timesteps are 1-based (``1..T``); ``alpha_bar(0)`` is defined as 1 so the
last reverse step lands on the clean estimate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import ConvStack, ParametricMap, as_tensor

DEFAULT_T = 1000
DEFAULT_S = 10
BETA_START = 1e-4
BETA_END = 0.02
EMBED_DIM = 16


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self):
        return len(self.beta)

    def abar(self, t):
        if t == 0:
            return 1.0
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside 1..{self.T}")
        return float(self.alpha_bar[t - 1])


def schedule_from_betas(beta):
    beta = as_tensor(beta).reshape(-1)
    if beta.size == 0 or np.any(beta <= 0) or np.any(beta >= 1):
        raise ValueError("betas must lie in (0, 1)")
    return NoiseSchedule(beta, np.cumprod(1.0 - beta))


def make_schedule(T=DEFAULT_T, beta_start=BETA_START, beta_end=BETA_END):
    """Linear beta schedule of length ``T``."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    return schedule_from_betas(np.linspace(beta_start, beta_end, T))


def make_subsequence(T=DEFAULT_T, S=DEFAULT_S):
    """Evenly spaced timesteps ``T/S, 2T/S, ..., T`` (rounded)."""
    if not 1 <= S <= T:
        raise ValueError("need 1 <= S <= T")
    taus = np.rint(np.linspace(T / S, T, S)).astype(int)
    return validate_subsequence(taus, T)


def validate_subsequence(taus, T):
    taus = [int(t) for t in taus]
    if not taus:
        raise ValueError("subsequence must be non-empty")
    if any(b <= a for a, b in zip(taus, taus[1:])):
        raise ValueError("subsequence must be strictly increasing")
    if taus[0] < 1 or taus[-1] > T:
        raise ValueError(f"subsequence entries must lie in 1..{T}")
    return taus


def forward_diffuse(x_c, t, eps, sched: NoiseSchedule):
    x_c = as_tensor(x_c)
    eps = as_tensor(eps)
    if x_c.shape != eps.shape:
        raise ValueError(f"shape mismatch {x_c.shape} vs {eps.shape}")
    a = sched.abar(t)
    return np.sqrt(a) * x_c + np.sqrt(1.0 - a) * eps


def predict_clean(x_t, eps_hat, t, sched: NoiseSchedule):
    a = sched.abar(t)
    return (as_tensor(x_t) - np.sqrt(1.0 - a) * as_tensor(eps_hat)) / np.sqrt(a)


def timestep_embedding(t, dim=EMBED_DIM):
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = float(t) * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)])


class ConvDenoiser(ParametricMap):
    """Noise predictor on ``[x_t, x_tilde, embed(t)]`` concatenated channel-wise.

    The timestep embedding is broadcast as ``embed_dim`` constant channels.
    """

    n_inputs = 3

    def __init__(self, channels=3, hidden=16, embed_dim=EMBED_DIM, params=None):
        self.channels = channels
        self.embed_dim = embed_dim
        self.net = ConvStack([2 * channels + embed_dim, hidden, hidden, channels], activation="tanh")
        super().__init__(params)

    def n_params(self):
        return self.net.params.size

    def _inputs(self, x_t, x_tilde, t):
        x_t = as_tensor(x_t)
        emb = np.broadcast_to(timestep_embedding(t, self.embed_dim)[:, None, None], (self.embed_dim,) + x_t.shape[1:])
        return (np.concatenate([x_t, as_tensor(x_tilde), emb], axis=0),)

    def apply(self, params, x_t, x_tilde, t):
        return self.net.apply(params, *self._inputs(x_t, x_tilde, t))

    def vjp(self, params, inputs, grad_out):
        x_t, x_tilde, t = inputs
        gp, (gx,) = self.net.vjp(params, self._inputs(x_t, x_tilde, t), grad_out)
        c = self.channels
        return gp, (gx[:c], gx[c : 2 * c], None)


class OracleDenoiser:
    """Test-time denoiser that knows the clean image and returns the exact
    noise consistent with ``x_t``."""

    def __init__(self, x_c, sched: NoiseSchedule):
        self.x_c = as_tensor(x_c)
        self.sched = sched

    def __call__(self, x_t, x_tilde, t):
        a = self.sched.abar(t)
        return (as_tensor(x_t) - np.sqrt(a) * self.x_c) / np.sqrt(1.0 - a)


def zero_denoiser(x_t, x_tilde, t):
    return np.zeros_like(as_tensor(x_t))


def ddim_step(x_tau, x_tilde, tau, tau_prev, denoiser, sched: NoiseSchedule):
    if not (tau_prev < tau):
        raise ValueError("tau_prev must precede tau")
    eps = as_tensor(denoiser(x_tau, x_tilde, tau))
    x0 = predict_clean(x_tau, eps, tau, sched)
    a_prev = sched.abar(tau_prev)
    return np.sqrt(a_prev) * x0 + np.sqrt(1.0 - a_prev) * eps


def ddim_sample(x_T, x_tilde, taus, denoiser, sched: NoiseSchedule):
    """Run the reverse chain ``tau_S -> ... -> tau_1 -> 0`` from ``x_T``."""
    taus = validate_subsequence(taus, sched.T)
    x = as_tensor(x_T)
    chain = [0] + taus
    for tau, tau_prev in zip(chain[:0:-1], chain[-2::-1]):
        x = ddim_step(x, x_tilde, tau, tau_prev, denoiser, sched)
    return x


def diffusion_loss(denoiser, x_c_batch, x_tilde_batch, sched: NoiseSchedule, rng, return_grad=False):
    """Mean over the batch of ``||eps - eps_theta(x_t, x_tilde, t)||^2``.

    ``t`` is uniform on ``1..T`` and ``eps`` standard normal, both drawn from
    ``rng`` in batch order. With ``return_grad`` the denoiser must be a
    :class:`ParametricMap`; the parameter gradient is returned as well.
    """
    if len(x_c_batch) != len(x_tilde_batch):
        raise ValueError("batches are not aligned")
    total = 0.0
    grad = None
    n = len(x_c_batch)
    for x_c, x_tilde in zip(x_c_batch, x_tilde_batch):
        x_c = as_tensor(x_c)
        t = int(rng.integers(1, sched.T + 1))
        eps = rng.standard_normal(x_c.shape)
        x_t = forward_diffuse(x_c, t, eps, sched)
        resid = eps - as_tensor(denoiser(x_t, x_tilde, t))
        total += float(np.sum(resid * resid))
        if return_grad:
            g, _ = denoiser.vjp(denoiser.params, (x_t, x_tilde, t), -2.0 * resid)
            grad = g if grad is None else grad + g
    loss = total / n if n else 0.0
    if return_grad:
        return loss, (grad / n if grad is not None else np.zeros(0))
    return loss
