"""Noise schedules, the forward noising process, and the DDIM sampler.

Timesteps are 1-indexed: ``alpha_bar[t]`` for ``t`` in ``1..T`` with the
convention ``alpha_bar[0] == 1``. All tables are stored with that leading
entry so indexing matches the maths directly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import NonFiniteError
from .numerics.rng import normal_per_row


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray  # length T + 1, beta[0] = 0
    alpha: np.ndarray
    alpha_bar: np.ndarray
    kind: str = "linear"

    def check(self) -> None:
        b = self.beta[1:]
        if not ((b > 0) & (b < 1)).all():
            raise ValueError("beta must lie strictly inside (0, 1)")
        if not np.array_equal(self.alpha[1:], 1.0 - b):
            raise ValueError("alpha must equal 1 - beta")
        if not (np.diff(self.alpha_bar) < 0).all():
            raise ValueError("alpha_bar must be strictly decreasing")


@dataclass(frozen=True)
class SamplerConfig:
    num_train_steps: int = 100
    num_inference_steps: int = 10
    eta: float = 0.0

    def __post_init__(self):
        if not 1 <= self.num_inference_steps <= self.num_train_steps:
            raise ValueError("need 1 <= num_inference_steps <= num_train_steps")
        if self.eta < 0:
            raise ValueError("eta must be non-negative")


def _from_beta(beta: np.ndarray, kind: str) -> NoiseSchedule:
    T = len(beta)
    beta = np.concatenate([[0.0], beta])
    alpha = 1.0 - beta
    alpha_bar = np.ones(T + 1)
    for t in range(1, T + 1):
        alpha_bar[t] = alpha_bar[t - 1] * alpha[t]
    sched = NoiseSchedule(T, beta, alpha, alpha_bar, kind)
    sched.check()
    return sched


def make_schedule(kind: str = "linear", T: int = 100, beta_start: float = 1e-4,
                  beta_end: float = 2e-2) -> NoiseSchedule:
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if kind == "linear":
        beta = np.linspace(beta_start, beta_end, T) if T > 1 else np.array([beta_start])
    elif kind == "squared_cosine":
        # Nichol & Dhariwal cosine schedule with the usual 0.999 cap.
        def f(u):
            return math.cos((u + 0.008) / 1.008 * math.pi / 2) ** 2

        beta = np.array([min(1 - f(i / T) / f((i - 1) / T), 0.999) for i in range(1, T + 1)])
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    return _from_beta(beta, kind)


def _check_t(t: int, s: NoiseSchedule) -> None:
    if not 1 <= t <= s.T:
        raise ValueError(f"timestep {t} outside 1..{s.T}")


def q_sample(x0: np.ndarray, t, eps: np.ndarray, s: NoiseSchedule) -> np.ndarray:
    """Closed-form marginal: sqrt(ab_t) x0 + sqrt(1 - ab_t) eps.

    ``t`` may be an int or an integer array over the leading (batch) axis.
    """
    t_arr = np.asarray(t)
    if t_arr.ndim == 0:
        _check_t(int(t_arr), s)
        ab = s.alpha_bar[int(t_arr)]
    else:
        for ti in t_arr:
            _check_t(int(ti), s)
        ab = s.alpha_bar[t_arr].reshape((-1,) + (1,) * (np.ndim(x0) - 1))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def chain_sample(x0: np.ndarray, t: int, s: NoiseSchedule, rng: np.random.Generator) -> np.ndarray:
    """Run the single-step kernel ``t`` times: x_k = sqrt(1 - b_k) x_{k-1} + sqrt(b_k) z."""
    _check_t(t, s)
    x = np.array(x0, dtype=np.float64)
    for k in range(1, t + 1):
        x = math.sqrt(1.0 - s.beta[k]) * x + math.sqrt(s.beta[k]) * rng.standard_normal(x.shape)
    return x


def inference_timesteps(cfg: SamplerConfig) -> list[int]:
    """Strictly decreasing timesteps, evenly spaced, rounded, always starting at T."""
    T, n = cfg.num_train_steps, cfg.num_inference_steps
    steps = [int(math.floor(T - i * T / n + 0.5)) for i in range(n)]
    return steps


def ddim_step(x_t: np.ndarray, x0_hat: np.ndarray, t: int, t_prev: int, s: NoiseSchedule,
              eta: float = 0.0, noise: np.ndarray | None = None) -> np.ndarray:
    """One DDIM update from ``t`` to ``t_prev`` given an x0 estimate.

    ``t_prev`` may be 0, where alpha_bar is 1 and the update returns ``x0_hat``.
    ``noise`` is required only when ``eta > 0``.
    """
    if t_prev >= t:
        raise ValueError(f"t_prev={t_prev} must be < t={t}")
    _check_t(t, s)
    if not np.isfinite(x0_hat).all():
        raise NonFiniteError("x0 estimate is not finite")
    ab_t, ab_prev = s.alpha_bar[t], s.alpha_bar[t_prev]
    eps_hat = recover_eps(x_t, x0_hat, t, s)
    sigma = eta * math.sqrt((1 - ab_prev) / (1 - ab_t) * (1 - ab_t / ab_prev))
    dir_coef = math.sqrt(max(1.0 - ab_prev - sigma ** 2, 0.0))
    out = math.sqrt(ab_prev) * x0_hat + dir_coef * eps_hat
    if sigma > 0:
        if noise is None:
            raise ValueError("eta > 0 requires a noise draw")
        out = out + sigma * noise
    return out


def recover_eps(x_t: np.ndarray, x0_hat: np.ndarray, t: int, s: NoiseSchedule) -> np.ndarray:
    ab = s.alpha_bar[t]
    return (x_t - math.sqrt(ab) * x0_hat) / math.sqrt(1.0 - ab)


def ddim_sample(denoise, shape: tuple, cfg: SamplerConfig, s: NoiseSchedule, rngs) -> np.ndarray:
    """x0-prediction DDIM loop.

    ``denoise(x_t, t, step_index)`` returns the x0 estimate for a batch.
    ``rngs`` holds one generator per batch row; each row's initial noise (and
    eta noise) comes only from its own generator. The result is clamped to
    [-1, 1] once, after the last step.
    """
    if cfg.num_train_steps != s.T:
        raise ValueError(f"sampler expects T={cfg.num_train_steps}, schedule has T={s.T}")
    if len(rngs) != shape[0]:
        raise ValueError(f"need one generator per row: {len(rngs)} for batch {shape[0]}")
    steps = inference_timesteps(cfg)
    x = normal_per_row(rngs, shape[1:])
    for i, t in enumerate(steps):
        t_prev = steps[i + 1] if i + 1 < len(steps) else 0
        x0_hat = denoise(x, t, i)
        if not np.isfinite(x0_hat).all():
            raise NonFiniteError(f"model output non-finite at t={t}")
        noise = normal_per_row(rngs, shape[1:]) if cfg.eta > 0 else None
        x = ddim_step(x, x0_hat, t, t_prev, s, cfg.eta, noise)
    return np.clip(x, -1.0, 1.0)
