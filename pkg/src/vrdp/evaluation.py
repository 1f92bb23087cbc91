"""Seeded evaluation with optional process fan-out.

Seeds are always split into the same fixed-size chunks, and each chunk runs
as one lockstep batch, so results do not depend on the worker count.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from multiprocessing import get_context
from typing import Sequence

from . import envs

CHUNK = 20


def worker_count() -> int:
    """Worker cap from ``VRDP_THREADS`` (default 1)."""
    raw = os.environ.get("VRDP_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"VRDP_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ValueError(f"VRDP_THREADS must be a positive integer, got {raw!r}")
    return n


def eval_seeds(base: int, n: int) -> list[int]:
    if n < 1:
        raise ValueError("need at least one rollout")
    return list(range(base, base + n))


def _run_chunk(args):
    policy, cfg, seeds, n_obs, n_action_steps = args
    return envs.rollout_batch(policy, cfg, seeds, n_obs, n_action_steps)


def evaluate(policy, cfg: envs.EnvConfig, seeds: Sequence[int], n_obs: int = 2, n_action_steps: int = 8,
             workers: int | None = None) -> list[envs.EpisodeResult]:
    seeds = list(seeds)
    if not seeds:
        raise ValueError("need at least one rollout")
    workers = worker_count() if workers is None else workers
    jobs = [(policy, cfg, seeds[i:i + CHUNK], n_obs, n_action_steps) for i in range(0, len(seeds), CHUNK)]
    if workers == 1 or len(jobs) == 1:
        parts = [_run_chunk(j) for j in jobs]
    else:
        with ProcessPoolExecutor(min(workers, len(jobs)), mp_context=get_context("fork")) as pool:
            parts = list(pool.map(_run_chunk, jobs))
    return [r for part in parts for r in part]
