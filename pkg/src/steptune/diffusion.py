"""Noise schedules, forward noising, and the deterministic reverse step.

Timesteps are 1-based (``t = 1..T``); states are 0-based with ``x_0`` clean.
Schedule arrays are stored 0-based, so ``beta[t - 1]`` is beta at step t.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


DEFAULT_T = 50
DEFAULT_BETA_START = 2e-3
DEFAULT_BETA_END = 0.2


class DegenerateScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self):
        return len(self.beta)

    @classmethod
    def from_betas(cls, betas, validate=True):
        beta = np.array(betas, dtype=np.float64)
        if beta.ndim != 1 or beta.size < 1:
            raise ValueError("betas must be a non-empty 1-D sequence")
        if validate and not np.all((beta > 0) & (beta < 1)):
            raise ValueError("every beta must lie in (0, 1)")
        alpha = 1.0 - beta
        alpha_bar = np.empty_like(alpha)
        acc = 1.0
        for i, a in enumerate(alpha):
            acc = acc * a
            alpha_bar[i] = acc
        for arr in (beta, alpha, alpha_bar):
            arr.setflags(write=False)
        return cls(beta, alpha, alpha_bar)

    def check_t(self, t):
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ValueError(f"timestep out of range 1..{self.T}: {t}")

    def reverse_coefficients(self, t):
        """(1/sqrt(alpha_t), beta_t / sqrt(1 - alpha_bar_t)) for step t."""
        self.check_t(t)
        b = self.beta[t - 1]
        ab = self.alpha_bar[t - 1]
        if ab == 1.0:
            if b != 0.0:
                raise DegenerateScheduleError(f"alpha_bar_{t} = 1 with beta_{t} != 0")
            noise_coef = 0.0  # beta -> 0 limit of beta / sqrt(1 - alpha_bar)
        else:
            noise_coef = b / np.sqrt(1.0 - ab)
        return 1.0 / np.sqrt(self.alpha[t - 1]), noise_coef


def make_schedule(T=DEFAULT_T, beta_start=DEFAULT_BETA_START, beta_end=DEFAULT_BETA_END):
    """Linear beta schedule including both endpoints."""
    if int(T) != T or T < 1:
        raise ValueError("T must be a positive integer")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    T = int(T)
    if T == 1:
        betas = np.array([beta_start])
    else:
        betas = np.linspace(beta_start, beta_end, T)
    return NoiseSchedule.from_betas(betas)


def forward_noise(x0, t, eps, schedule):
    """``sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`` (NumPy arrays).

    ``t`` may be a scalar or one timestep per row of ``x0``.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != x0.shape:
        raise ValueError(f"eps shape {eps.shape} differs from x0 shape {x0.shape}")
    schedule.check_t(t)
    ab = schedule.alpha_bar[np.asarray(t) - 1]
    if np.ndim(ab):
        ab = ab.reshape((-1,) + (1,) * (x0.ndim - 1))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def step_from_eps(x_in, eps_hat, t, schedule):
    """The reverse update given a noise prediction (both Values)."""
    inv_sqrt_a, coef = schedule.reverse_coefficients(t)
    return ad.scale(ad.sub(x_in, ad.scale(eps_hat, coef)), inv_sqrt_a)


def x0_from_eps(x_in, eps_hat, t, schedule):
    """Clean-sample estimate given a noise prediction (both Values)."""
    schedule.check_t(t)
    ab = schedule.alpha_bar[t - 1]
    return ad.scale(ad.sub(x_in, ad.scale(eps_hat, np.sqrt(1.0 - ab))), 1.0 / np.sqrt(ab))


_step = step_from_eps


def reverse_step(x_t, t, c, denoiser, schedule, noise=None):
    """One reverse step, differentiable through both ``x_t`` and the denoiser.

    ``noise`` (optional, same shape as ``x_t``) adds ``sqrt(beta_t) * noise``
    for the stochastic sampler; the default is the deterministic update.
    """
    x_t = x_t if isinstance(x_t, ad.Value) else ad.Value(x_t)
    out = _step(x_t, denoiser(x_t, t, c), t, schedule)
    return _add_noise(out, t, schedule, noise)


def reverse_step_sg(x_t, t, c, denoiser, schedule, noise=None):
    """Reverse step on a detached input: gradient reaches only the denoiser."""
    x_in = ad.stop_gradient(x_t)
    out = _step(x_in, denoiser(x_in, t, c), t, schedule)
    return _add_noise(out, t, schedule, noise)


def reverse_step_detached_eps(x_t, t, c, denoiser, schedule, noise=None):
    """Reverse step whose noise prediction sees a detached input, while the
    linear recurrence on ``x_t`` stays differentiable."""
    x_t = x_t if isinstance(x_t, ad.Value) else ad.Value(x_t)
    out = _step(x_t, denoiser(ad.stop_gradient(x_t), t, c), t, schedule)
    return _add_noise(out, t, schedule, noise)


def _add_noise(out, t, schedule, noise):
    if noise is None:
        return out
    return ad.add(out, ad.Value(np.sqrt(schedule.beta[t - 1]) * np.asarray(noise)))


def one_step_predict(x_t, t, c, denoiser, schedule):
    """Clean-sample estimate ``(x_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t)``."""
    schedule.check_t(t)
    x_t = x_t if isinstance(x_t, ad.Value) else ad.Value(x_t)
    return x0_from_eps(x_t, denoiser(x_t, t, c), t, schedule)


RETENTION_MODES = ("full", "stepwise")


@dataclass
class Trajectory:
    """States ``x_T .. x_0`` (index 0 holds x_T)."""

    states: list
    condition: np.ndarray
    retention: str

    def state(self, t):
        return self.states[len(self.states) - 1 - t]

    @property
    def x0(self):
        return self.states[-1]


def initial_noise(seed, batch, dim):
    return np.random.default_rng(seed).standard_normal((batch, dim))


def sample_trajectory(denoiser, c, schedule, retention="full", seed=0, x_T=None,
                      stochastic=False):
    """Roll ``x_T ~ N(0, I)`` down to ``x_0``.

    ``full`` chains differentiable steps and keeps the whole graph;
    ``stepwise`` detaches each state before the next step. Values are
    identical in both modes.
    """
    if retention not in RETENTION_MODES:
        raise ValueError(f"retention must be one of {RETENTION_MODES}")
    c = np.atleast_1d(np.asarray(c))
    rng = np.random.default_rng(seed)
    if x_T is None:
        x_T = rng.standard_normal((c.shape[0], denoiser.motion_dim))
    x = ad.Value(x_T)
    states = [x]
    step = reverse_step if retention == "full" else reverse_step_sg
    for t in range(schedule.T, 0, -1):
        noise = rng.standard_normal(x.shape) if (stochastic and t > 1) else None
        x = step(x, t, c, denoiser, schedule, noise=noise)
        states.append(x)
    return Trajectory(states, c, retention)


def sample(denoiser, c, schedule, seed=0, x_T=None, stochastic=False):
    """Final clean samples as an array, without recording a graph."""
    with ad.no_grad():
        traj = sample_trajectory(denoiser, c, schedule, "stepwise", seed, x_T=x_T,
                                 stochastic=stochastic)
    return traj.x0.data
