"""Run configuration: one strict JSON document with documented defaults.

Unknown keys are rejected at every level. The config hash covers every
resolved value except the root seed and output directory, so two runs with
equal (hash, seed) pairs are byte-identical.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from . import envs
from .model import ModelConfig, VRConfig
from .nets import EncoderConfig, UNetConfig
from .schedules import NoiseSchedule, SamplerConfig, make_schedule
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class ScheduleSection:
    kind: str = "linear"  # or "squared_cosine"
    num_train_steps: int = 100
    num_inference_steps: int = 10
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    eta: float = 0.0


@dataclass
class NetSection:
    down_dims: list = field(default_factory=lambda: [32, 64, 128])
    kernel: int = 3
    n_groups: int = 8
    time_embed_dim: int = 64
    cond_dim: int = 64
    encoder_hidden: int = 64
    k_points: int = 32
    n_obs: int = 2
    horizon: int = 16
    action_dim: int = 2


@dataclass
class VRSection:
    enabled: bool = True
    beta: float = 1e-9
    use_timestep: bool = True
    sigma_floor: float = 1e-4
    init_sigma: float = 1.0
    rank: int = 4
    inference_mode: str = "stochastic"


@dataclass
class TrainSection:
    epochs: int = 300
    batch_size: int = 16
    lr: float = 1e-3
    weight_decay: float = 1e-6
    warmup_steps: int = 50
    n_action_steps: int = 8
    eval_every: int = 30
    eval_rollouts: int = 20
    eval_seed_base: int = 1000


@dataclass
class EnvSection:
    task: str = "point_reach"
    n_demos: int = 10
    v_max: float = 0.05
    tau: float = 0.03
    max_steps: int = 100
    contact_radius: float = 0.06
    disc_radius: float = 0.03
    jitter: float = 0.005


@dataclass
class EvalSection:
    n_rollouts: int = 100
    seed_base: int = 5000


@dataclass
class MasklabSection:
    target: str = "backbone"
    scheme: str = "channel"
    idx: int | None = None
    grid: list = field(default_factory=lambda: [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0])
    n_seeds: int = 20
    n_rollouts: int = 20
    seed_base: int = 100_000
    corruption_scale: float = 0.0


SECTIONS = {
    "schedule": ScheduleSection,
    "net": NetSection,
    "vr": VRSection,
    "train": TrainSection,
    "env": EnvSection,
    "eval": EvalSection,
    "masklab": MasklabSection,
}


@dataclass
class RunConfig:
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    net: NetSection = field(default_factory=NetSection)
    vr: VRSection = field(default_factory=VRSection)
    train: TrainSection = field(default_factory=TrainSection)
    env: EnvSection = field(default_factory=EnvSection)
    eval: EvalSection = field(default_factory=EvalSection)
    masklab: MasklabSection = field(default_factory=MasklabSection)
    seed: int = 0
    out: str = "runs/default"

    # -- construction --------------------------------------------------
    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(d) - set(SECTIONS) - {"seed", "out"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw = {}
        for name, section in SECTIONS.items():
            kw[name] = _section(section, d.get(name, {}), name)
        for name, typ in (("seed", int), ("out", str)):
            if name in d:
                if not isinstance(d[name], typ) or isinstance(d[name], bool):
                    raise ConfigError(f"{name} must be {typ.__name__}")
                kw[name] = d[name]
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> None:
        try:
            self.model_config()
            self.train_config()
            self.env_config()
            self.schedule_and_sampler()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        if self.env.n_demos < 1:
            raise ConfigError("env.n_demos must be at least 1")
        if self.eval.n_rollouts < 1:
            raise ConfigError("eval.n_rollouts must be at least 1")

    # -- identity --------------------------------------------------------
    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("seed")
        d.pop("out")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    # -- builders ----------------------------------------------------------
    def model_config(self) -> ModelConfig:
        n = self.net
        enc = EncoderConfig(k_points=n.k_points, point_dim=envs.POINT_DIM, proprio_dim=envs.PROPRIO_DIM,
                            hidden=n.encoder_hidden, cond_dim=n.cond_dim, n_obs=n.n_obs)
        unet = UNetConfig(down_dims=tuple(n.down_dims), kernel=n.kernel, n_groups=n.n_groups,
                          time_embed_dim=n.time_embed_dim)
        v = self.vr
        vr = VRConfig(enabled=v.enabled, beta=v.beta, use_timestep=v.use_timestep, sigma_floor=v.sigma_floor,
                      init_sigma=v.init_sigma, rank=v.rank, inference_mode=v.inference_mode)
        if n.action_dim != envs.ACTION_DIM:
            raise ValueError(f"net.action_dim must be {envs.ACTION_DIM} for the bundled tasks")
        if n.horizon % 4:
            raise ValueError("net.horizon must be divisible by 4")
        return ModelConfig(horizon=n.horizon, action_dim=n.action_dim, encoder=enc, unet=unet, vr=vr)

    def train_config(self) -> TrainConfig:
        t = self.train
        if t.n_action_steps > self.net.horizon:
            raise ValueError("train.n_action_steps cannot exceed net.horizon")
        return TrainConfig(epochs=t.epochs, batch_size=t.batch_size, lr=t.lr, weight_decay=t.weight_decay,
                           warmup_steps=t.warmup_steps, horizon=self.net.horizon,
                           n_action_steps=t.n_action_steps, n_obs=self.net.n_obs,
                           eval_every=t.eval_every, eval_rollouts=t.eval_rollouts)

    def env_config(self) -> envs.EnvConfig:
        e = self.env
        return envs.EnvConfig(task=e.task, v_max=e.v_max, tau=e.tau, max_steps=e.max_steps,
                              contact_radius=e.contact_radius, k_points=self.net.k_points,
                              disc_radius=e.disc_radius, jitter=e.jitter)

    def schedule_and_sampler(self) -> tuple[NoiseSchedule, SamplerConfig]:
        s = self.schedule
        sched = make_schedule(s.kind, s.num_train_steps, s.beta_start, s.beta_end)
        return sched, SamplerConfig(s.num_train_steps, s.num_inference_steps, s.eta)


def _section(cls, values, name: str):
    if not isinstance(values, dict):
        raise ConfigError(f"{name} must be an object")
    known = {f.name: f for f in fields(cls)}
    unknown = set(values) - set(known)
    if unknown:
        raise ConfigError(f"unknown keys in {name}: {sorted(unknown)}")
    obj = cls()
    for key, value in values.items():
        default = getattr(obj, key)
        if not _type_ok(default, value, key == "idx"):
            raise ConfigError(f"{name}.{key}: expected {type(default).__name__}, got {value!r}")
        setattr(obj, key, float(value) if isinstance(default, float) else value)
    return obj


def _type_ok(default, value, nullable: bool) -> bool:
    if value is None:
        return nullable
    if isinstance(default, bool) or isinstance(value, bool):
        return isinstance(default, bool) and isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float))
    if default is None:
        return isinstance(value, int)
    if isinstance(default, list):
        return isinstance(value, list) and all(isinstance(v, (int, float)) and not isinstance(v, bool)
                                               for v in value)
    return isinstance(value, type(default))
