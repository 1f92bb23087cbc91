"""Inference-time random feature masking and the two SNR-proxy metrics.

A mask zeroes whole channels (``channel`` scheme) or whole temporal
positions (``point`` scheme) of a U-Net feature map with probability p. The
mask is redrawn at every denoising step from a stream owned by the episode,
so the draws never disturb the sampler's own noise.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import envs
from .evaluation import evaluate
from .numerics import Tensor, stream
from .policy import ModelPolicy

TARGETS = ("backbone", "skip")
SCHEMES = ("channel", "point")
REPORT_VERSION = 1


@dataclass(frozen=True)
class MaskSpec:
    target: str = "backbone"
    scheme: str = "channel"
    p: float = 0.0
    seed: int = 0
    idx: int | None = None  # skip index: 0 deep, 1 shallow

    def __post_init__(self):
        if self.target not in TARGETS:
            raise ValueError(f"target must be one of {TARGETS}")
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"p={self.p} outside [0, 1]")
        if self.target == "skip" and self.idx not in (0, 1):
            raise ValueError("skip masks need idx 0 (deep) or 1 (shallow)")
        if self.target == "backbone" and self.idx is not None:
            raise ValueError("backbone masks take no idx")

    @property
    def hook_key(self) -> str:
        return "backbone" if self.target == "backbone" else f"skip{self.idx}"


def draw_mask(n: int, p: float, rng: np.random.Generator) -> np.ndarray:
    """Boolean keep-mask of length n; each entry dropped with probability p."""
    return rng.random(n) >= p


def apply_mask(feature: np.ndarray, spec: MaskSpec, rng: np.random.Generator) -> np.ndarray:
    """Zero channels (rows) or positions (columns) of a C x L map."""
    feature = np.asarray(feature)
    if feature.ndim != 2:
        raise ValueError(f"expected a C x L map, got shape {feature.shape}")
    if spec.scheme == "channel":
        keep = draw_mask(feature.shape[0], spec.p, rng)[:, None]
    else:
        keep = draw_mask(feature.shape[1], spec.p, rng)[None, :]
    return np.where(keep, feature, 0.0)


class MaskHook:
    """Masks one tap for every row of a rollout batch, redrawn per call."""

    def __init__(self, spec: MaskSpec):
        self.spec = spec
        self._rngs: list = []
        self.calls = 0

    def bind(self, seeds: Sequence[int]) -> None:
        self._rngs = [stream(s, "mask", self.spec.seed) for s in seeds]

    def _mask(self, feat: Tensor) -> Tensor:
        if len(self._rngs) != feat.shape[0]:
            raise ValueError(f"hook bound to {len(self._rngs)} episodes, feature batch is {feat.shape[0]}")
        self.calls += 1
        out = np.stack([apply_mask(feat.data[b], self.spec, r) for b, r in enumerate(self._rngs)])
        return Tensor(out)

    def __call__(self, step: int) -> dict:
        return {self.spec.hook_key: self._mask}


class NoiseInjection:
    """Adds a large fixed noise pattern to a tap, the same at every step."""

    def __init__(self, scale: float, key: str = "backbone", seed: int = 0):
        self.scale = scale
        self.key = key
        self.seed = seed
        self._noise = None

    def bind(self, seeds: Sequence[int]) -> None:
        pass

    def _corrupt(self, feat: Tensor) -> Tensor:
        if self._noise is None or self._noise.shape != feat.shape[1:]:
            self._noise = stream(self.seed, f"corrupt.{self.key}").standard_normal(feat.shape[1:])
        return Tensor(feat.data + self.scale * self._noise)

    def __call__(self, step: int) -> dict:
        return {self.key: self._corrupt}


@dataclass
class SweepReport:
    target: str
    scheme: str
    idx: int | None
    grid: list
    n_seeds: int
    n_rollouts: int
    rates: list  # rates[i][s]: success rate at grid[i] for sweep seed s
    baseline: float
    episode_seed_base: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        _require_rows(self.grid, (0.0,))
        for row in self.rates:
            if any(not 0.0 <= r <= 1.0 for r in row):
                raise ValueError("success rates must lie in [0, 1]")

    def mean(self, p: float) -> float:
        return float(np.mean(self.rates[self.grid.index(p)]))

    def stderr(self, p: float) -> float:
        row = np.asarray(self.rates[self.grid.index(p)])
        if len(row) < 2:
            return 0.0
        return float(row.std(ddof=1) / math.sqrt(len(row)))

    def to_json(self) -> str:
        d = asdict(self)
        d["version"] = REPORT_VERSION
        d["means"] = [self.mean(p) for p in self.grid]
        d["stderrs"] = [self.stderr(p) for p in self.grid]
        return json.dumps(d, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "SweepReport":
        d = json.loads(text)
        if d.pop("version", None) != REPORT_VERSION:
            raise ValueError("unsupported sweep report version")
        d.pop("means", None)
        d.pop("stderrs", None)
        return cls(**d)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["p", "mean", "stderr", "scheme", "target"])
        target = self.target if self.idx is None else f"{self.target}{self.idx}"
        for p in self.grid:
            w.writerow([repr(float(p)), repr(self.mean(p)), repr(self.stderr(p)), self.scheme, target])
        return buf.getvalue()


def _require_rows(grid, needed) -> None:
    for p in needed:
        if p not in grid:
            raise ValueError(f"report lacks the p={p:g} row")


def sweep_episode_seeds(base: int, sweep_seed: int, n_rollouts: int) -> list[int]:
    start = base + sweep_seed * n_rollouts
    return list(range(start, start + n_rollouts))


def _check_model(policy: ModelPolicy) -> None:
    for name, p in policy.model.named_parameters():
        if not np.isfinite(p.data).all():
            raise ValueError(f"parameter {name} is not finite")


def mask_sweep(policy: ModelPolicy, env: envs.EnvConfig, target: str = "backbone", scheme: str = "channel",
               grid: Sequence[float] = (0.0, 0.25, 0.5, 0.75, 1.0), n_seeds: int = 20, n_rollouts: int = 20,
               idx: int | None = None, episode_seed_base: int = 100_000, n_obs: int = 2,
               n_action_steps: int = 8, corruption: NoiseInjection | None = None,
               workers: int | None = None) -> SweepReport:
    """Success rate per (p, sweep seed) with the mask applied to one tap.

    Sweep seed s evaluates episodes ``sweep_episode_seeds(base, s, n)``; its
    p=0 cell is exactly a plain evaluation of those episodes.
    """
    if n_seeds < 1 or n_rollouts < 1:
        raise ValueError("need at least one seed and one rollout")
    grid = [float(p) for p in grid]
    if len(set(grid)) != len(grid):
        raise ValueError("grid values must be distinct")
    _require_rows(grid, (0.0,))
    _check_model(policy)
    base_hooks = list(policy.hooks)
    rates = []
    try:
        for p in grid:
            row = []
            for s in range(n_seeds):
                spec = MaskSpec(target=target, scheme=scheme, p=p, seed=s, idx=idx)
                policy.hooks = base_hooks + ([corruption] if corruption else []) + [MaskHook(spec)]
                res = evaluate(policy, env, sweep_episode_seeds(episode_seed_base, s, n_rollouts),
                               n_obs, n_action_steps, workers=workers)
                row.append(envs.success_rate(res))
            rates.append(row)
    finally:
        policy.hooks = base_hooks
    meta = {"mask_redraw": "per_denoising_step", "masking": "zeroing", "task": env.task,
            "inference_mode": policy.mode or policy.model.config.vr.inference_mode,
            "corruption_scale": corruption.scale if corruption else 0.0}
    return SweepReport(target, scheme, idx, grid, n_seeds, n_rollouts, rates,
                       float(np.mean(rates[grid.index(0.0)])), episode_seed_base, meta)


def snr_metrics(report: SweepReport) -> tuple[float, float]:
    """(peak gain over the p=0 mean, full-mask mean minus the p=0 mean)."""
    _require_rows(report.grid, (0.0, 1.0))
    base = report.mean(0.0)
    peak = max(report.mean(p) for p in report.grid) - base
    return peak, report.mean(1.0) - base
