"""Noise schedules, forward noising and deterministic DDIM sampling."""

from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigError, ContractError

COSINE_OFFSET = 0.008
MAX_BETA = 0.999


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep tables for t = 0..T-1."""

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bar: np.ndarray
    offset: float = COSINE_OFFSET

    @property
    def T(self):
        return len(self.betas)


@dataclass(frozen=True)
class RespacedSchedule:
    parent: NoiseSchedule
    timesteps: np.ndarray  # strictly increasing, last == T - 1

    def __len__(self):
        return len(self.timesteps)


def cosine_schedule(T=1000, s=COSINE_OFFSET):
    """Squared-cosine schedule: alpha_bar[t] = f(t) / f(0).

    ``f(t) = cos^2(((t / T + s) / (1 + s)) * pi / 2)``; betas are derived from
    consecutive ratios and clipped to 0.999. ``beta[0]`` is ``1 - alpha_bar[0]``.
    """
    if int(T) != T or T < 2:
        raise ConfigError(f"schedule needs T >= 2, got {T}")
    T = int(T)

    def f(t):
        return np.cos(((t / T + s) / (1 + s)) * np.pi / 2) ** 2

    steps = np.arange(T + 1, dtype=np.float64)
    fbar = f(steps) / f(0.0)
    # index t of the tables is diffusion step t + 1 of the continuous form
    betas = np.clip(1.0 - fbar[1:] / fbar[:-1], 0.0, MAX_BETA)
    alphas = 1.0 - betas
    alpha_bar = np.cumprod(alphas)
    return NoiseSchedule(betas, alphas, alpha_bar, s)


def _check_t(t, schedule):
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t >= schedule.T):
        raise ContractError(f"timestep {t} outside [0, {schedule.T})")
    return t


def q_sample(x0, t, eps, schedule):
    """sqrt(alpha_bar[t]) * x0 + sqrt(1 - alpha_bar[t]) * eps.

    ``t`` may be a scalar or one timestep per leading (batch) item.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ContractError(f"x0 {x0.shape} and eps {eps.shape} differ in shape")
    t = _check_t(t, schedule)
    ab = schedule.alpha_bar[t]
    if ab.ndim:
        ab = ab.reshape(ab.shape + (1,) * (x0.ndim - ab.ndim))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def predict_x0(x_t, eps_hat, t, schedule):
    ab = schedule.alpha_bar[t]
    return (x_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)


def ddim_step(x_t, eps_hat, t, t_prev, schedule, clip_x0=None):
    """One deterministic (eta = 0) DDIM update from ``t`` to ``t_prev``.

    ``t_prev = -1`` denotes the clean boundary (alpha_bar = 1), where the
    predicted x0 is returned. ``clip_x0`` optionally bounds the x0 estimate,
    re-deriving the noise estimate from the clipped value.
    """
    if t_prev >= t:
        raise ContractError(f"t_prev ({t_prev}) must precede t ({t})")
    _check_t(t, schedule)
    if t_prev < -1:
        raise ContractError(f"t_prev {t_prev} below the clean boundary -1")
    ab = schedule.alpha_bar[t]
    x0 = predict_x0(x_t, eps_hat, t, schedule)
    if clip_x0 is not None:
        x0 = np.clip(x0, -clip_x0, clip_x0)
        eps_hat = (x_t - np.sqrt(ab) * x0) / np.sqrt(1.0 - ab)
    if t_prev < 0:
        return x0
    ab_prev = schedule.alpha_bar[t_prev]
    return np.sqrt(ab_prev) * x0 + np.sqrt(1.0 - ab_prev) * eps_hat


def respace(schedule, steps=40):
    """Evenly spaced subsequence of ``steps`` timesteps ending at T - 1."""
    T = schedule.T
    if int(steps) != steps or not 1 <= steps <= T:
        raise ConfigError(f"respacing steps must be in [1, {T}], got {steps}")
    steps = int(steps)
    if steps == 1:
        ts = np.array([T - 1])
    else:
        ts = (T - 1) - np.round(np.arange(steps) * (T - 1) / (steps - 1)).astype(np.int64)
        ts = ts[::-1]
    return RespacedSchedule(schedule, ts.astype(np.int64))


def ddim_sample(eps_fn, x_T, respaced, clip_x0=None, callback=None):
    """Run the deterministic sampler from pure noise ``x_T`` down to x0.

    Args:
        eps_fn: ``eps_fn(x_t, t) -> eps_hat`` with ``t`` an int timestep.
        x_T: starting noise, any shape.
        respaced: :class:`RespacedSchedule`; iterated in descending order.
        clip_x0: optional bound applied to every x0 estimate.
        callback: optional ``callback(t, x_t)`` after each step.
    """
    s = respaced.parent
    seq = [int(t) for t in respaced.timesteps[::-1]]
    x = np.asarray(x_T, dtype=np.float64)
    for i, t in enumerate(seq):
        t_prev = seq[i + 1] if i + 1 < len(seq) else -1
        x = ddim_step(x, eps_fn(x, t), t, t_prev, s, clip_x0=clip_x0)
        if callback is not None:
            callback(t, x)
    return x
