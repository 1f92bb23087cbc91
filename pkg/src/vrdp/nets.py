"""Point-set encoder and the three-stage conditional 1D temporal U-Net.

Shapes follow the (batch, channels, time) convention inside the U-Net. Action
trajectories enter and leave as (batch, horizon, action_dim).

Down path for the default horizon 16::

    stage 0  (d0, 16) -> skip[1] (shallow) -> stride-2 conv -> 8
    stage 1  (d1,  8) -> skip[0] (deep)    -> stride-2 conv -> 4
    stage 2  (d2,  4) -> backbone Z

Z feeds the bottleneck (the variational regulariser when enabled), then the
two mid blocks and two up stages, which concatenate skip[0] then skip[1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .numerics import Module, Parameter, ShapeError, Tensor, ops


@dataclass
class UNetConfig:
    down_dims: tuple = (32, 64, 128)
    kernel: int = 3
    n_groups: int = 8
    time_embed_dim: int = 64

    def __post_init__(self):
        self.down_dims = tuple(int(d) for d in self.down_dims)
        if len(self.down_dims) != 3:
            raise ValueError("the U-Net has exactly three stages")
        if self.kernel % 2 != 1:
            raise ValueError("kernel must be odd")
        for d in self.down_dims:
            if d % self.n_groups:
                raise ValueError(f"width {d} not divisible by n_groups={self.n_groups}")


@dataclass
class EncoderConfig:
    k_points: int = 32
    point_dim: int = 3
    proprio_dim: int = 4
    hidden: int = 64
    cond_dim: int = 64
    n_obs: int = 2


@dataclass
class UNetTaps:
    backbone: Tensor | None = None
    skips: list = field(default_factory=lambda: [None, None])


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, zero: bool = False):
        self.weight = Parameter(np.zeros((n_out, n_in)) if zero else _uniform(rng, (n_out, n_in), n_in))
        self.bias = Parameter(np.zeros(n_out) if zero else _uniform(rng, n_out, n_in))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class Conv1d(Module):
    def __init__(self, n_in: int, n_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int | None = None):
        fan_in = n_in * kernel
        self.weight = Parameter(_uniform(rng, (n_out, n_in, kernel), fan_in))
        self.bias = Parameter(_uniform(rng, n_out, fan_in))
        self._stride = stride
        self._padding = kernel // 2 if padding is None else padding

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv1d(x, self.weight, self.bias, stride=self._stride, padding=self._padding)


class GroupNorm(Module):
    def __init__(self, channels: int, n_groups: int):
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))
        self._groups = n_groups

    def __call__(self, x: Tensor) -> Tensor:
        return ops.group_norm(x, self._groups, self.weight, self.bias)


class Conv1dBlock(Module):
    """conv -> group norm -> Mish."""

    def __init__(self, n_in: int, n_out: int, kernel: int, n_groups: int, rng):
        self.conv = Conv1d(n_in, n_out, kernel, rng)
        self.norm = GroupNorm(n_out, n_groups)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.mish(self.norm(self.conv(x)))


def film(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    """(1 + scale) * x + shift with per-channel scale/shift of shape (B, C)."""
    if scale.shape != shift.shape or scale.shape[-1] != x.shape[1]:
        raise ShapeError(f"film: feature shape {x.shape} vs scale {scale.shape} / shift {shift.shape}")
    s = ops.reshape(scale, scale.shape + (1,))
    b = ops.reshape(shift, shift.shape + (1,))
    return ops.add(ops.mul(ops.add(s, 1.0), x), b)


class CondResBlock(Module):
    """Two conv blocks with FiLM conditioning between them and a residual path."""

    def __init__(self, n_in: int, n_out: int, cond_dim: int, kernel: int, n_groups: int, rng):
        self.block0 = Conv1dBlock(n_in, n_out, kernel, n_groups, rng)
        self.block1 = Conv1dBlock(n_out, n_out, kernel, n_groups, rng)
        self.cond = Linear(cond_dim, 2 * n_out, rng)
        self.residual = Conv1d(n_in, n_out, 1, rng) if n_in != n_out else None
        self._n_out = n_out

    def __call__(self, x: Tensor, cond: Tensor) -> Tensor:
        h = self.block0(x)
        ss = self.cond(ops.mish(cond))
        h = film(h, ss[:, :self._n_out], ss[:, self._n_out:])
        h = self.block1(h)
        return ops.add(h, self.residual(x) if self.residual is not None else x)


def sinusoidal_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    arg = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


class PointEncoder(Module):
    """Shared per-point MLP, max-pool over points, concat proprio, project.

    A window of ``n_obs`` observations is encoded with shared weights and the
    per-step vectors are concatenated, giving ``n_obs * cond_dim`` features.
    """

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.point0 = Linear(cfg.point_dim, cfg.hidden, rng)
        self.point1 = Linear(cfg.hidden, cfg.hidden, rng)
        self.proj = Linear(cfg.hidden + cfg.proprio_dim, cfg.cond_dim, rng)
        self._cfg = cfg

    @property
    def out_dim(self) -> int:
        return self._cfg.n_obs * self._cfg.cond_dim

    def _check(self, points: np.ndarray, proprio: np.ndarray) -> None:
        cfg = self._cfg
        if points.ndim != 4 or points.shape[1:] != (cfg.n_obs, cfg.k_points, cfg.point_dim):
            raise ShapeError(
                f"points must be (B, {cfg.n_obs}, {cfg.k_points}, {cfg.point_dim}), got {points.shape}")
        if proprio.shape != (points.shape[0], cfg.n_obs, cfg.proprio_dim):
            raise ShapeError(f"proprio must be (B, {cfg.n_obs}, {cfg.proprio_dim}), got {proprio.shape}")

    def __call__(self, points, proprio) -> Tensor:
        points = np.asarray(points, dtype=np.float64)
        proprio = np.asarray(proprio, dtype=np.float64)
        self._check(points, proprio)
        B, n_obs = points.shape[:2]
        h = ops.mish(self.point0(Tensor(points)))
        h = self.point1(h)
        pooled = ops.max_(h, axis=2)  # (B, n_obs, hidden)
        feat = ops.concat([pooled, Tensor(proprio)], axis=2)
        c = self.proj(feat)  # (B, n_obs, cond_dim)
        return ops.reshape(c, (B, n_obs * self._cfg.cond_dim))


class Upsample(Module):
    def __init__(self, channels: int, kernel: int, rng):
        self.conv = Conv1d(channels, channels, kernel, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.conv(ops.upsample_nearest(x, 2))


class _Stage(Module):
    def __init__(self, res0: CondResBlock, res1: CondResBlock, resample):
        self.res0 = res0
        self.res1 = res1
        self.resample = resample


Hook = Callable[[Tensor], Tensor]


class TemporalUNet(Module):
    def __init__(self, action_dim: int, global_cond_dim: int, cfg: UNetConfig, rng: np.random.Generator):
        d0, d1, d2 = cfg.down_dims
        k, g, e = cfg.kernel, cfg.n_groups, cfg.time_embed_dim
        cond = e + global_cond_dim
        self.time0 = Linear(e, 4 * e, rng)
        self.time1 = Linear(4 * e, e, rng)
        self.down = [
            _Stage(CondResBlock(action_dim, d0, cond, k, g, rng), CondResBlock(d0, d0, cond, k, g, rng),
                   Conv1d(d0, d0, 3, rng, stride=2, padding=1)),
            _Stage(CondResBlock(d0, d1, cond, k, g, rng), CondResBlock(d1, d1, cond, k, g, rng),
                   Conv1d(d1, d1, 3, rng, stride=2, padding=1)),
            _Stage(CondResBlock(d1, d2, cond, k, g, rng), CondResBlock(d2, d2, cond, k, g, rng), None),
        ]
        self.mid = [CondResBlock(d2, d2, cond, k, g, rng), CondResBlock(d2, d2, cond, k, g, rng)]
        self.up = [
            _Stage(CondResBlock(d2 + d1, d1, cond, k, g, rng), CondResBlock(d1, d1, cond, k, g, rng),
                   Upsample(d2, k, rng)),
            _Stage(CondResBlock(d1 + d0, d0, cond, k, g, rng), CondResBlock(d0, d0, cond, k, g, rng),
                   Upsample(d1, k, rng)),
        ]
        self.final_block = Conv1dBlock(d0, d0, k, g, rng)
        self.final = Conv1d(d0, action_dim, 1, rng)
        self._cfg = cfg
        self._action_dim = action_dim

    def time_embedding(self, t) -> Tensor:
        emb = Tensor(sinusoidal_embedding(t, self._cfg.time_embed_dim))
        return self.time1(ops.mish(self.time0(emb)))

    def encode(self, a_t: Tensor, cond: Tensor) -> tuple[Tensor, list[Tensor]]:
        """Down path. Returns backbone Z and skips ordered [deep, shallow]."""
        x = ops.transpose(a_t, (0, 2, 1))
        skips = []
        for stage in self.down:
            x = stage.res1(stage.res0(x, cond), cond)
            if stage.resample is not None:
                skips.append(x)
                x = stage.resample(x)
        return x, skips[::-1]

    def decode(self, z: Tensor, skips: list[Tensor], cond: Tensor) -> Tensor:
        x = z
        for block in self.mid:
            x = block(x, cond)
        for stage, skip in zip(self.up, skips):
            x = stage.resample(x)
            x = ops.concat([x, skip], axis=1)
            x = stage.res1(stage.res0(x, cond), cond)
        x = self.final(self.final_block(x))
        return ops.transpose(x, (0, 2, 1))

    def __call__(self, a_t, t, global_cond: Tensor, hooks: dict[str, Hook] | None = None,
                 bottleneck: Callable[[Tensor, Tensor], Tensor] | None = None) -> tuple[Tensor, UNetTaps]:
        """Predict the clean trajectory from a noisy one.

        ``hooks`` may rewrite ``"backbone"``, ``"skip0"`` (deep) and ``"skip1"``
        (shallow) right before the up path consumes them. ``bottleneck`` maps
        (Z, time embedding) to the feature handed to the mid blocks.
        """
        a_t = a_t if isinstance(a_t, Tensor) else Tensor(np.asarray(a_t, dtype=np.float64))
        if a_t.ndim != 3 or a_t.shape[2] != self._action_dim:
            raise ShapeError(f"A_t must be (B, H, {self._action_dim}), got {a_t.shape}")
        if a_t.shape[1] % 4:
            raise ShapeError(f"horizon {a_t.shape[1]} must be divisible by 4")
        hooks = hooks or {}
        temb = self.time_embedding(t)
        cond = ops.concat([temb, global_cond], axis=1)
        z, skips = self.encode(a_t, cond)
        taps = UNetTaps(backbone=z, skips=list(skips))
        feat = bottleneck(z, temb) if bottleneck is not None else z
        if "backbone" in hooks:
            feat = hooks["backbone"](feat)
        skips = [hooks[f"skip{i}"](s) if f"skip{i}" in hooks else s for i, s in enumerate(skips)]
        return self.decode(feat, skips, cond), taps
