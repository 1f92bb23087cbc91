"""Adapters that let a trained model act in the environments."""

from __future__ import annotations

from typing import Protocol, Sequence

import numpy as np

from .model import PolicyModel
from .schedules import NoiseSchedule, SamplerConfig
from .training import denormalize, normalize


class FeatureHook(Protocol):
    """Per-rollout feature rewriting.

    ``bind`` receives the episode seeds in batch order before the first
    replan; calling the hook with a denoising-step index returns a dict of
    U-Net hooks (``"backbone"``, ``"skip0"``, ``"skip1"``).
    """

    def bind(self, seeds: Sequence[int]) -> None: ...

    def __call__(self, step: int) -> dict: ...


def _compose(hook_dicts: list[dict]) -> dict:
    out: dict = {}
    for hooks in hook_dicts:
        for key, fn in hooks.items():
            if key in out:
                prev = out[key]
                out[key] = (lambda f, g: (lambda x: g(f(x))))(prev, fn)
            else:
                out[key] = fn
    return out


class ModelPolicy:
    """Sample normalised chunks from ``model`` and return raw actions.

    ``hooks`` are applied in order, so a corruption hook listed before a
    mask hook is masked along with the feature it corrupts.
    """

    def __init__(self, model: PolicyModel, stats: dict, schedule: NoiseSchedule, sampler: SamplerConfig,
                 mode: str | None = None, hooks: Sequence[FeatureHook] = ()):
        self.model = model
        self.stats = stats
        self.schedule = schedule
        self.sampler = sampler
        self.mode = mode
        self.hooks = list(hooks)

    @property
    def horizon(self) -> int:
        return self.model.config.horizon

    def bind(self, seeds: Sequence[int]) -> None:
        for hook in self.hooks:
            hook.bind(seeds)

    def __call__(self, points, proprio, states, rngs) -> np.ndarray:
        factory = None
        if self.hooks:
            def factory(step):
                return _compose([h(step) for h in self.hooks])
        a = self.model.sample(np.asarray(points), normalize(proprio, self.stats["proprio"]), self.schedule,
                              self.sampler, list(rngs), mode=self.mode, hook_factory=factory)
        return denormalize(a, self.stats["action"])
