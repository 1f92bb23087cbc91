"""The self-check suite behind ``vrdp verify``.

Each check returns a dict with ``name``, ``passed`` and the statistics it
was judged on. Negative controls pass when the broken variant is caught.
"""

from __future__ import annotations

import math

import numpy as np

from . import envs, theory
from . import training as tr
from .model import ModelConfig, PolicyModel, VRConfig
from .nets import EncoderConfig, UNetConfig
from .numerics import directional_grad_check, grad_check_many, stream
from .schedules import SamplerConfig, ddim_sample, make_schedule, q_sample, recover_eps
from .vr import kl_to_standard_normal


def tiny_model(seed: int = 0, horizon: int = 8, vr: bool = True) -> PolicyModel:
    """The down_dims [4, 8, 16] network used for exact-gradient checks."""
    cfg = ModelConfig(horizon=horizon, encoder=EncoderConfig(hidden=8, cond_dim=8),
                      unet=UNetConfig(down_dims=(4, 8, 16), n_groups=2, time_embed_dim=8),
                      vr=VRConfig(enabled=vr))
    return PolicyModel(cfg, seed=seed)


def tiny_batch(n: int = 2, horizon: int = 8, seed: int = 0):
    ds = tr.generate_demos(envs.EnvConfig(), 2, seed=seed)
    data = tr.TrainingData.from_dataset(ds, horizon, 2)
    return data.points[:n], data.proprio[:n], data.actions[:n]


def check_gradients(max_coords: int | None = 8, n_dirs: int = 16) -> dict:
    """Sampled coordinates per tensor plus whole-model directional probes.

    ``max_coords=None`` probes every coordinate, which takes minutes.
    """
    model, batch = tiny_model(), tiny_batch()
    sched = make_schedule("linear", 100)

    def loss():
        return tr.policy_loss(batch, model, sched, 1e-3, stream(0, "verify.grad")).total

    params = model.parameters()
    coord_err = grad_check_many(loss, params, max_coords=max_coords, rng=stream(0, "verify.coords"))
    dir_err = directional_grad_check(loss, params, n_dirs, rng=stream(0, "verify.dirs"))
    err = max(coord_err, dir_err)
    return {"name": "loss_gradient", "passed": err <= 1e-4, "max_rel_error": err, "coordinate_error": coord_err,
            "directional_error": dir_err, "tolerance": 1e-4, "n_params": model.num_parameters()}


def check_kl(n: int = 1_000_000, pairs: int = 50) -> dict:
    exact = [float(kl_to_standard_normal(np.zeros(8), np.ones(8)).data),
             float(kl_to_standard_normal(np.array([1.0]), np.array([1.0])).data)]
    analytic_ok = abs(exact[0]) <= 1e-12 and abs(exact[1] - 0.5) <= 1e-12
    rng = stream(0, "verify.kl")
    worst = 0.0
    for i in range(pairs):
        mu, sigma = rng.normal(0.0, 1.0), rng.uniform(0.2, 2.5)
        est, se = theory.kl_mc([mu], [sigma], n, stream(i, "verify.kl_mc"))
        closed = float(kl_to_standard_normal(np.array([mu]), np.array([sigma])).data)
        worst = max(worst, abs(est - closed) / se)
    return {"name": "kl_closed_form", "passed": analytic_ok and worst <= 4.0, "analytic": exact,
            "worst_z": worst, "pairs": pairs, "n": n}


def check_corollary() -> dict:
    model, batch = tiny_model(), tiny_batch(n=4)
    sched = make_schedule("linear", 100)
    rows, ok = [], True
    for sigma2 in (0.25, 0.5, 1.0, 2.0):
        for beta in (0.0, 1e-9, 1e-3):
            terms = theory.elbo_terms(batch, model, sigma2, beta, sched, stream(0, "verify.cor"))
            lhs, rhs, res = theory.corollary_residual_from_terms(terms)
            good = res <= 1e-9 * max(1.0, abs(lhs))
            ok &= good
            rows.append({"sigma2": sigma2, "beta": beta, "residual": res, "passed": good})
    broken = theory.elbo_terms(batch, model, 1.0, 1e-3, sched, stream(0, "verify.cor"), alpha=1e-3)
    lhs, _, res = theory.corollary_residual_from_terms(broken)
    caught = res > 1e-9 * max(1.0, abs(lhs))
    return {"name": "loss_bound_identity", "passed": ok and caught, "grid": rows,
            "negative_control_residual": res, "negative_control_caught": caught}


def check_marginals(n: int = 100_000) -> dict:
    sched = make_schedule("linear", 100)
    reps = [theory.marginal_consistency_check(sched, t, n) for t in (1, 25, 50, 99)]
    bad = theory.marginal_consistency_check(theory.tampered(sched), 50, n, reference=sched)
    return {"name": "forward_marginals", "passed": all(r.passed for r in reps) and not bad.passed,
            "tests": [vars(r) for r in reps], "tampered": vars(bad)}


def check_ddim() -> dict:
    sched = make_schedule("linear", 100)
    cfg = SamplerConfig()
    w = stream(0, "verify.ddim").standard_normal((8, 2))

    def denoise(x, t, i):
        return np.tanh(x @ w.T @ w / 8.0 + t / 100.0)

    runs = [ddim_sample(denoise, (3, 8, 2), cfg, sched, [stream(s, "verify.ddim.row") for s in range(3)])
            for _ in range(2)]
    x0 = stream(1, "verify.ddim").uniform(-1, 1, (4, 8, 2))
    eps = stream(2, "verify.ddim").standard_normal(x0.shape)
    worst = max(float(np.abs(recover_eps(q_sample(x0, t, eps, sched), x0, t, sched) - eps).max())
                for t in range(1, 101))
    same = np.array_equal(runs[0], runs[1])
    return {"name": "ddim", "passed": same and worst <= 1e-12, "bit_identical": same, "eps_recovery_error": worst}


def check_bound_direction() -> dict:
    rng = stream(0, "verify.lg")
    worst_gap = math.inf
    ok = True
    for _ in range(50):
        out = theory.linear_gaussian_bound(rng.uniform(-2, 2, 4), rng.uniform(0, 2, 4), rng.uniform(0.1, 2, 4))
        worst_gap = min(worst_gap, out.expected_kl - out.mutual_information)
        ok &= abs(out.expected_kl - out.mutual_information - out.marginal_kl) <= 1e-12
    return {"name": "kl_bounds_mutual_information", "passed": ok and worst_gap >= 0, "min_gap": worst_gap}


def run_suite(quick: bool = False) -> list[dict]:
    return [
        check_gradients(max_coords=2 if quick else 8, n_dirs=4 if quick else 16),
        check_kl(n=100_000 if quick else 1_000_000, pairs=10 if quick else 50),
        check_corollary(),
        check_marginals(),
        check_ddim(),
        check_bound_direction(),
    ]
