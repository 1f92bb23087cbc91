"""The full policy network: point encoder -> conditional U-Net (+ VR bottleneck)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .nets import EncoderConfig, PointEncoder, TemporalUNet, UNetConfig, UNetTaps
from .numerics import Module, Tensor, no_grad, stream
from .numerics.rng import normal_per_row
from .schedules import NoiseSchedule, SamplerConfig, ddim_sample
from .vr import BYPASS, DETERMINISTIC, STOCHASTIC, VariationalRegularizer


@dataclass
class VRConfig:
    enabled: bool = True
    beta: float = 1e-9
    use_timestep: bool = True
    sigma_floor: float = 1e-4
    init_sigma: float = 1.0
    rank: int = 4
    inference_mode: str = STOCHASTIC

    def __post_init__(self):
        if self.inference_mode not in (STOCHASTIC, DETERMINISTIC):
            raise ValueError(f"inference_mode must be {STOCHASTIC!r} or {DETERMINISTIC!r}")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")


@dataclass
class ModelConfig:
    horizon: int = 16
    action_dim: int = 2
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    unet: UNetConfig = field(default_factory=UNetConfig)
    vr: VRConfig = field(default_factory=VRConfig)


def draw_normal(rng, shape: tuple) -> np.ndarray:
    """One Generator draws the whole batch; a list draws one row per Generator."""
    if isinstance(rng, (list, tuple)):
        if len(rng) != shape[0]:
            raise ValueError(f"{len(rng)} generators for batch of {shape[0]}")
        return normal_per_row(rng, shape[1:])
    return rng.standard_normal(shape)


HookFactory = Callable[[int], dict]


class PolicyModel(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        rng = stream(seed, "init")
        self.encoder = PointEncoder(cfg.encoder, rng)
        self.unet = TemporalUNet(cfg.action_dim, self.encoder.out_dim, cfg.unet, rng)
        self.vr = None
        if cfg.vr.enabled:
            self.vr = VariationalRegularizer(
                cfg.unet.down_dims[-1], cfg.unet.time_embed_dim, rng, rank=cfg.vr.rank,
                sigma_floor=cfg.vr.sigma_floor, init_sigma=cfg.vr.init_sigma,
                use_timestep=cfg.vr.use_timestep)
        self._cfg = cfg
        self.assign_names()

    @property
    def config(self) -> ModelConfig:
        return self._cfg

    def vr_parameter_count(self) -> int:
        return 0 if self.vr is None else self.vr.num_parameters()

    def condition(self, points, proprio) -> Tensor:
        return self.encoder(points, proprio)

    def denoise(self, a_t, t, cond: Tensor, mode: str = STOCHASTIC, rng=None,
                hooks: dict | None = None) -> tuple[Tensor, UNetTaps, Tensor]:
        """One x0 prediction. Returns (A0_hat, taps, kl); kl is 0 without VR.

        Without VR, or in ``bypass`` mode, the bottleneck is the identity and
        no noise is drawn.
        """
        B = cond.shape[0]
        t_arr = np.broadcast_to(np.asarray(t), (B,))
        kl = Tensor(0.0)
        bottleneck = None
        use_vr = self.vr is not None and mode != BYPASS
        if use_vr:
            holder = {}

            def bottleneck(z, temb):
                eps = draw_normal(rng, z.shape) if mode == STOCHASTIC else None
                sample = self.vr(z, temb, mode, eps)
                holder["kl"] = sample.kl
                return sample.z_hat

        a0_hat, taps = self.unet(a_t, t_arr, cond, hooks=hooks, bottleneck=bottleneck)
        if use_vr:
            kl = holder["kl"]
        return a0_hat, taps, kl

    def forward(self, a_t, t, points, proprio, mode: str = STOCHASTIC, rng=None, hooks=None):
        return self.denoise(a_t, t, self.condition(points, proprio), mode, rng, hooks)

    def sample(self, points, proprio, schedule: NoiseSchedule, sampler: SamplerConfig, rngs,
               mode: str | None = None, hook_factory: HookFactory | None = None) -> np.ndarray:
        """DDIM-sample normalised trajectories, one generator per batch row.

        Each row's initial noise, VR noise and any hook randomness come from
        its own generator, so a row's result does not depend on batch mates.
        """
        mode = mode or self._cfg.vr.inference_mode
        B = len(rngs)
        shape = (B, self._cfg.horizon, self._cfg.action_dim)
        with no_grad():
            cond = self.condition(points, proprio)

            def denoise(x, t, i):
                hooks = hook_factory(i) if hook_factory is not None else None
                a0, _, _ = self.denoise(Tensor(x), t, cond, mode, rngs, hooks)
                return a0.data

            return ddim_sample(denoise, shape, sampler, schedule, rngs)
