"""Numeric checks of the information-bottleneck identities behind the VR loss.

With a fixed-variance Gaussian decoder q(A0 | Z_hat, S) = N(A0_hat, s2 I) over
D = H * d_a outputs and alpha = beta / (2 s2),

    E||A0_hat - A0||^2 + beta E[KL]
        = -2 s2 (E[log q] - alpha E[KL]) - s2 D ln(2 pi s2)

so the regularised denoising loss and the variational IB bound differ by a
constant that does not depend on the model. The checks below evaluate both
sides on one shared forward pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .model import PolicyModel
from .numerics import Tensor, no_grad, stream
from .schedules import NoiseSchedule, chain_sample, q_sample
from .vr import kl_per_sample

LN_2PI = math.log(2.0 * math.pi)


def gaussian_loglik(a0, a0_hat, sigma2: float, D: int | None = None) -> float:
    """log N(a0; a0_hat, sigma2 I) for one sample of D elements."""
    if not sigma2 > 0:
        raise ValueError(f"sigma2 must be positive, got {sigma2}")
    err = np.asarray(a0, dtype=np.float64) - np.asarray(a0_hat, dtype=np.float64)
    D = err.size if D is None else D
    if D != err.size:
        raise ValueError(f"D={D} but the sample has {err.size} elements")
    return float(-np.sum(err * err) / (2.0 * sigma2) - 0.5 * D * math.log(2.0 * math.pi * sigma2))


@dataclass
class ElboTerms:
    mse: float  # batch mean of the per-sample squared error sum
    kl: float  # batch mean of the per-sample KL
    loglik: float  # batch mean of log q
    sigma2: float
    alpha: float
    beta: float
    D: int

    def __post_init__(self):
        if self.kl < 0:
            raise ValueError("KL must be non-negative")

    @property
    def linked(self) -> bool:
        return math.isclose(self.alpha, self.beta / (2.0 * self.sigma2), rel_tol=1e-15, abs_tol=0.0)

    @property
    def policy_loss(self) -> float:
        return self.mse + self.beta * self.kl

    @property
    def bound_term(self) -> float:
        """-2 s2 (E[log q] - alpha E[KL])."""
        return -2.0 * self.sigma2 * (self.loglik - self.alpha * self.kl)

    @property
    def constant(self) -> float:
        return -self.sigma2 * self.D * math.log(2.0 * math.pi * self.sigma2)


def elbo_terms(batch, model: PolicyModel, sigma2: float, beta: float, schedule: NoiseSchedule,
               rng: np.random.Generator, alpha: float | None = None, t=None) -> ElboTerms:
    """Evaluate the model once and read every term off the same Z_hat draws."""
    if not sigma2 > 0:
        raise ValueError("sigma2 must be positive")
    points, proprio, a0 = batch
    a0 = np.asarray(a0, dtype=np.float64)
    B = a0.shape[0]
    if t is None:
        t = rng.integers(1, schedule.T + 1, size=B)
    a_t = q_sample(a0, t, rng.standard_normal(a0.shape), schedule)
    with no_grad():
        cond = model.condition(points, proprio)
        holder = {}
        if model.vr is not None:
            def bottleneck(z, temb):
                sample = model.vr(z, temb, "stochastic", rng.standard_normal(z.shape))
                holder["kl"] = kl_per_sample(sample.mu, sample.sigma).data
                return sample.z_hat
        else:
            bottleneck = None
        t_arr = np.broadcast_to(np.asarray(t), (B,))
        a0_hat, _ = model.unet(Tensor(a_t), t_arr, cond, bottleneck=bottleneck)
    a0_hat = a0_hat.data
    kl = holder.get("kl", np.zeros(B))
    D = int(np.prod(a0.shape[1:]))
    sq = np.sum((a0_hat - a0) ** 2, axis=tuple(range(1, a0.ndim)))
    loglik = np.mean([gaussian_loglik(a0[b], a0_hat[b], sigma2, D) for b in range(B)])
    alpha = beta / (2.0 * sigma2) if alpha is None else alpha
    return ElboTerms(float(np.mean(sq)), float(np.mean(kl)), float(loglik), sigma2, alpha, beta, D)


def corollary_residual_from_terms(terms: ElboTerms) -> tuple[float, float, float]:
    """(lhs, rhs, |lhs - rhs|) with lhs = L_policy - bound term, rhs = constant."""
    lhs = terms.policy_loss - terms.bound_term
    rhs = terms.constant
    return lhs, rhs, abs(lhs - rhs)


def corollary1_residual(batch, model: PolicyModel, sigma2: float, beta: float,
                        schedule: NoiseSchedule, rng: np.random.Generator | None = None,
                        alpha: float | None = None, check_linkage: bool = True) -> float:
    """|lhs - rhs| of the loss/bound identity for one shared forward pass.

    Passing an ``alpha`` other than beta / (2 sigma2) raises unless
    ``check_linkage`` is off, which is how the negative control is run.
    """
    if alpha is not None and check_linkage and not math.isclose(alpha, beta / (2 * sigma2), rel_tol=1e-15):
        raise ValueError(f"alpha={alpha} is not beta / (2 sigma2) = {beta / (2 * sigma2)}")
    rng = rng if rng is not None else stream(0, "theory.corollary")
    terms = elbo_terms(batch, model, sigma2, beta, schedule, rng, alpha)
    return corollary_residual_from_terms(terms)[2]


def kl_mc(mu, sigma, n: int, rng: np.random.Generator | None = None,
          chunk: int = 50_000) -> tuple[float, float]:
    """Monte Carlo E_p[ln p(z) - ln q(z)] for p = N(mu, sigma^2), q = N(0, I)."""
    mu = np.atleast_1d(np.asarray(mu, dtype=np.float64))
    sigma = np.atleast_1d(np.asarray(sigma, dtype=np.float64))
    if (sigma <= 0).any():
        raise ValueError("sigma must be strictly positive")
    if n < 10_000:
        raise ValueError("kl_mc needs n >= 1e4")
    rng = rng if rng is not None else stream(0, "theory.kl_mc")
    log_sigma = np.sum(np.log(sigma))
    total = total_sq = 0.0
    done = 0
    while done < n:
        m = min(chunk, n - done)
        eps = rng.standard_normal((m,) + mu.shape)
        z = mu + sigma * eps
        axes = tuple(range(1, z.ndim))
        d = 0.5 * np.sum(z * z - eps * eps, axis=axes) - log_sigma
        total += d.sum()
        total_sq += (d * d).sum()
        done += m
    mean = total / n
    var = max(total_sq / n - mean * mean, 0.0)
    return float(mean), float(math.sqrt(var * n / (n - 1) / n))


@dataclass
class MarginalReport:
    t: int
    n: int
    mean_z: float  # worst |z| over coordinates
    var_z: float
    passed: bool
    threshold: float = 4.0


def marginal_consistency_check(schedule: NoiseSchedule, t: int, n: int, rng: np.random.Generator | None = None,
                               x0=(0.9, -0.4, 0.0, 0.25), reference: NoiseSchedule | None = None,
                               threshold: float = 4.0) -> MarginalReport:
    """Two-sample z-tests on the per-coordinate mean and variance of x_t.

    Draws x_t by running the single-step chain of ``reference`` (default the
    schedule itself) and by the closed form of ``schedule``.
    """
    if n < 10_000:
        raise ValueError("marginal_consistency_check needs n >= 1e4")
    rng = rng if rng is not None else stream(0, "theory.marginal", t)
    reference = reference or schedule
    x0 = np.broadcast_to(np.asarray(x0, dtype=np.float64), (n, len(x0)))
    chain = chain_sample(x0, t, reference, rng)
    closed = q_sample(x0, t, rng.standard_normal(x0.shape), schedule)
    m1, m2 = chain.mean(0), closed.mean(0)
    v1, v2 = chain.var(0, ddof=1), closed.var(0, ddof=1)
    mean_z = np.abs(m1 - m2) / np.sqrt(v1 / n + v2 / n)
    var_z = np.abs(v1 - v2) / np.sqrt(2 * v1 ** 2 / (n - 1) + 2 * v2 ** 2 / (n - 1))
    worst_m, worst_v = float(mean_z.max()), float(var_z.max())
    return MarginalReport(t, n, worst_m, worst_v, worst_m <= threshold and worst_v <= threshold, threshold)


def tampered(schedule: NoiseSchedule, factor: float = 0.9) -> NoiseSchedule:
    """A copy whose alpha_bar table is scaled, breaking the closed form."""
    ab = schedule.alpha_bar.copy()
    ab[1:] *= factor
    return replace(schedule, alpha_bar=ab)


@dataclass
class LinearGaussianBound:
    mutual_information: float
    expected_kl: float
    marginal_kl: float  # KL(p(z) || q), the exact gap between the two


def linear_gaussian_bound(gain, input_std, noise_std) -> LinearGaussianBound:
    """z = gain * x + noise_std * eps with x ~ N(0, input_std^2), per coordinate.

    Here I(z; x) has a closed form, and E_x[KL(p(z|x) || N(0, 1))] exceeds it
    by exactly KL(p(z) || N(0, 1)).
    """
    a = np.atleast_1d(np.asarray(gain, dtype=np.float64))
    sx = np.broadcast_to(np.asarray(input_std, dtype=np.float64), a.shape)
    s = np.broadcast_to(np.asarray(noise_std, dtype=np.float64), a.shape)
    if (s <= 0).any() or (sx < 0).any():
        raise ValueError("noise_std must be positive and input_std non-negative")
    signal = a * a * sx * sx
    mi = 0.5 * np.sum(np.log1p(signal / (s * s)))
    ekl = 0.5 * np.sum(signal + s * s - 1.0 - 2.0 * np.log(s))
    v = signal + s * s
    marginal = 0.5 * np.sum(v - 1.0 - np.log(v))
    return LinearGaussianBound(float(mi), float(ekl), float(marginal))
