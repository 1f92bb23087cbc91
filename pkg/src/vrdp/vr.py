"""Variational regularisation of the U-Net backbone feature.

The backbone map Z (B, C, L) is modulated by a FiLM of the diffusion-time
embedding, then two small position-wise MLPs give a Gaussian N(mu, sigma^2)
per feature element. The sample Z_hat = mu + sigma * eps replaces Z, and the
KL to a standard normal is returned for the loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .nets import Linear, film
from .numerics import Module, NonFiniteError, Tensor, ops

STOCHASTIC = "stochastic"
DETERMINISTIC = "deterministic"
BYPASS = "bypass"  # skip the module: identity on Z, zero KL, no noise drawn


@dataclass
class VRSample:
    z_hat: Tensor
    mu: Tensor
    sigma: Tensor
    kl: Tensor  # scalar, mean over batch of the per-sample KL sum


def kl_to_standard_normal(mu, sigma) -> Tensor:
    """0.5 * sum(mu^2 + sigma^2 - 1 - 2 log sigma) over every element."""
    mu = mu if isinstance(mu, Tensor) else Tensor(np.asarray(mu, dtype=np.float64))
    sigma = sigma if isinstance(sigma, Tensor) else Tensor(np.asarray(sigma, dtype=np.float64))
    if (sigma.data <= 0).any():
        raise ValueError("sigma must be strictly positive")
    terms = ops.square(mu) + ops.square(sigma) - 1.0 - 2.0 * ops.log(sigma)
    return 0.5 * ops.sum_(terms)


def kl_per_sample(mu: Tensor, sigma: Tensor) -> Tensor:
    """Per-row KL for a batched (B, ...) Gaussian; returns shape (B,)."""
    terms = ops.square(mu) + ops.square(sigma) - 1.0 - 2.0 * ops.log(sigma)
    axes = tuple(range(1, mu.ndim))
    return 0.5 * ops.sum_(terms, axis=axes)


def inverse_softplus(y: float) -> float:
    return y + math.log(-math.expm1(-y))


class VariationalRegularizer(Module):
    """Timestep-conditioned Gaussian bottleneck over a (B, C, L) feature.

    mu = Z' + up(mish(down(Z'))) and raw = up_s(mish(down_s(Z'))), both applied
    at each time position with shared weights, where Z' is the FiLM-modulated
    input. The up projections start at zero, so at initialisation mu == Z
    exactly and sigma == ``init_sigma`` everywhere.
    """

    def __init__(self, channels: int, embed_dim: int, rng: np.random.Generator, rank: int = 4,
                 sigma_floor: float = 1e-4, init_sigma: float = 1.0, use_timestep: bool = True):
        if init_sigma <= sigma_floor:
            raise ValueError("init_sigma must exceed sigma_floor")
        self.film_t = Linear(embed_dim, 2 * channels, rng, zero=True)
        self.mu_down = Linear(channels, rank, rng)
        self.mu_up = Linear(rank, channels, rng, zero=True)
        self.sigma_down = Linear(channels, rank, rng)
        self.sigma_up = Linear(rank, channels, rng, zero=True)
        self.sigma_up.bias.data[:] = inverse_softplus(init_sigma - sigma_floor)
        self._channels = channels
        self.sigma_floor = sigma_floor
        self.use_timestep = use_timestep

    def heads(self, z: Tensor, temb: Tensor | None) -> tuple[Tensor, Tensor]:
        if self.use_timestep and temb is not None:
            ss = self.film_t(temb)
            z = film(z, ss[:, :self._channels], ss[:, self._channels:])
        zt = ops.transpose(z, (0, 2, 1))  # (B, L, C)
        mu = zt + self.mu_up(ops.mish(self.mu_down(zt)))
        raw = self.sigma_up(ops.mish(self.sigma_down(zt)))
        sigma = ops.softplus(raw) + self.sigma_floor
        mu = ops.transpose(mu, (0, 2, 1))
        sigma = ops.transpose(sigma, (0, 2, 1))
        if not (np.isfinite(mu.data).all() and np.isfinite(sigma.data).all()):
            raise NonFiniteError("VR heads produced non-finite values")
        return mu, sigma

    def __call__(self, z: Tensor, temb: Tensor | None, mode: str = STOCHASTIC,
                 eps: np.ndarray | None = None) -> VRSample:
        mu, sigma = self.heads(z, temb)
        if mode == DETERMINISTIC:
            z_hat = mu
        elif mode == STOCHASTIC:
            if eps is None or eps.shape != mu.shape:
                raise ValueError(f"stochastic mode needs eps of shape {mu.shape}")
            z_hat = mu + sigma * Tensor(eps)
        else:
            raise ValueError(f"unknown VR mode {mode!r}")
        kl = ops.mean(kl_per_sample(mu, sigma))
        return VRSample(z_hat=z_hat, mu=mu, sigma=sigma, kl=kl)
