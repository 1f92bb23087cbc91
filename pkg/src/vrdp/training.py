"""Behaviour-cloning training: normalisation, demo datasets, the regularised
denoising loss, AdamW with cosine decay, and the epoch loop.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import envs
from .model import PolicyModel
from .numerics import NonFiniteError, Tensor, backward, ops, records, stream
from .schedules import NoiseSchedule, q_sample

DATASET_VERSION = 1


# -- normalisation -------------------------------------------------------
def normalize(x, stats: dict) -> np.ndarray:
    """Map each dimension's [min, max] onto [-1, 1]; constant dimensions map to 0."""
    lo, hi = np.asarray(stats["min"]), np.asarray(stats["max"])
    span = hi - lo
    degenerate = span <= 0
    safe = np.where(degenerate, 1.0, span)
    y = 2.0 * (np.asarray(x, dtype=np.float64) - lo) / safe - 1.0
    return np.where(degenerate, 0.0, y)


def denormalize(y, stats: dict) -> np.ndarray:
    lo, hi = np.asarray(stats["min"]), np.asarray(stats["max"])
    span = hi - lo
    x = (np.asarray(y, dtype=np.float64) + 1.0) * 0.5 * span + lo
    return np.where(span <= 0, lo, x)


class RangeNormalizer(TransformerMixin, BaseEstimator):
    """Per-dimension min/max scaling to [-1, 1] over the last axis.

    Dimensions with max == min are flagged in ``degenerate_`` and transform
    to 0 with a warning.
    """

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=np.float64)
        flat = X.reshape(-1, X.shape[-1])
        self.data_min_ = flat.min(axis=0)
        self.data_max_ = flat.max(axis=0)
        self.degenerate_ = self.data_max_ <= self.data_min_
        if self.degenerate_.any():
            warnings.warn(f"constant dimensions {np.flatnonzero(self.degenerate_).tolist()} map to 0",
                          RuntimeWarning, stacklevel=2)
        return self

    @property
    def stats_(self) -> dict:
        check_is_fitted(self, "data_min_")
        return {"min": self.data_min_, "max": self.data_max_}

    def transform(self, X):
        return normalize(X, self.stats_)

    def inverse_transform(self, X):
        return denormalize(X, self.stats_)


# -- demonstrations ------------------------------------------------------
@dataclass
class DemoDataset:
    task: str
    episodes: list  # dicts with "points" (T, K, d_p), "proprio" (T, d_s), "actions" (T, d_a)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.episodes:
            raise ValueError("dataset has no episodes")
        # the range must cover the zero-velocity padding used past episode ends
        acts = [e["actions"] for e in self.episodes]
        self.action_norm = RangeNormalizer().fit(np.concatenate(acts + [np.zeros((1, acts[0].shape[1]))]))
        self.proprio_norm = RangeNormalizer().fit(np.concatenate([e["proprio"] for e in self.episodes]))

    @property
    def stats(self) -> dict:
        return {"action": self.action_norm.stats_, "proprio": self.proprio_norm.stats_}

    def windows(self, horizon: int, n_obs: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """All (observation window, action chunk) pairs, raw units.

        Observation windows repeat the first frame before the episode start;
        action chunks past the episode end are padded with zero velocity.
        """
        P, S, A = [], [], []
        for ep in self.episodes:
            T = len(ep["actions"])
            pad = np.zeros((horizon, ep["actions"].shape[1]))
            acts = np.concatenate([ep["actions"], pad])
            for i in range(T):
                idx = [max(i - n_obs + 1 + j, 0) for j in range(n_obs)]
                P.append(ep["points"][idx])
                S.append(ep["proprio"][idx])
                A.append(acts[i:i + horizon])
        return np.array(P), np.array(S), np.array(A)

    def save(self, path, extra_meta: dict | None = None) -> None:
        arrays = {}
        for i, ep in enumerate(self.episodes):
            for key in ("points", "proprio", "actions"):
                arrays[f"episode/{i:05d}/{key}"] = ep[key]
        for group, st in self.stats.items():
            arrays[f"stats/{group}/min"] = st["min"]
            arrays[f"stats/{group}/max"] = st["max"]
        meta = dict(self.meta, task=self.task, n_episodes=len(self.episodes), version=DATASET_VERSION)
        meta.update(extra_meta or {})
        records.save(path, "dataset", meta, arrays)

    @classmethod
    def load(cls, path) -> "DemoDataset":
        meta, arrays = records.load(path, "dataset")
        if meta.get("version") != DATASET_VERSION:
            raise records.RecordFormatError(f"unsupported dataset version {meta.get('version')}")
        n = meta["n_episodes"]
        episodes = [{key: arrays[f"episode/{i:05d}/{key}"] for key in ("points", "proprio", "actions")}
                    for i in range(n)]
        return cls(meta["task"], episodes, meta)


def generate_demos(cfg: envs.EnvConfig, n: int, seed: int, action_noise: float = 0.0) -> DemoDataset:
    if n < 1:
        raise ValueError("need at least one demonstration")
    if action_noise < 0:
        raise ValueError("action_noise must be non-negative")
    episodes = []
    for i in range(n):
        points, proprio, actions, ok = envs.expert_episode(
            cfg, stream(seed, "demo.reset", i), stream(seed, "demo.obs", i), action_noise,
            stream(seed, "demo.noise", i))
        if not ok:
            raise RuntimeError(f"expert failed on demo {i}")
        episodes.append({"points": points, "proprio": proprio, "actions": actions})
    return DemoDataset(cfg.task, episodes, {"seed": seed, "action_noise": action_noise})


# -- loss ------------------------------------------------------------------
@dataclass
class LossTerms:
    total: Tensor
    mse: Tensor
    kl: Tensor


def policy_loss(batch, model: PolicyModel, schedule: NoiseSchedule, beta: float,
                rng: np.random.Generator, t=None, force_a0: bool = False,
                mode: str = "stochastic") -> LossTerms:
    """Denoising MSE on the clean trajectory plus beta times the bottleneck KL.

    ``batch`` is (points, normalised proprio, normalised actions). ``t`` and
    the forward noise are drawn from ``rng`` per sample unless ``t`` is given.
    ``force_a0`` replaces the prediction with the target (a perfect model).
    """
    points, proprio, a0 = batch
    B = a0.shape[0]
    if t is None:
        t = rng.integers(1, schedule.T + 1, size=B)
    eps = rng.standard_normal(a0.shape)
    a_t = q_sample(a0, t, eps, schedule)
    a0_hat, _, kl = model.forward(Tensor(a_t), t, points, proprio, mode=mode, rng=rng)
    if force_a0:
        a0_hat = Tensor(a0)
    mse = ops.mean(ops.square(a0_hat - Tensor(a0)))
    total = mse + beta * kl
    if not np.isfinite(total.data):
        raise NonFiniteError("loss is not finite")
    return LossTerms(total, mse, kl)


# -- optimisation ------------------------------------------------------
def cosine_lr(step: int, total_steps: int, warmup: int, base_lr: float) -> float:
    """Linear warm-up from 0 to ``base_lr``, then cosine decay to 0."""
    if total_steps <= warmup:
        raise ValueError(f"total_steps={total_steps} must exceed warmup={warmup}")
    if step < 0:
        raise ValueError("step must be non-negative")
    if step < warmup:
        return base_lr * step / warmup
    progress = min((step - warmup) / (total_steps - warmup), 1.0)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamWState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    skipped: int = 0


def adamw_step(params, state: AdamWState, lr: float, weight_decay: float = 0.0,
               betas=(0.9, 0.999), eps: float = 1e-8) -> bool:
    """In-place AdamW on ``params`` using their ``grad``. Returns False if skipped.

    Parameters without a gradient (unused in the forward pass) are left alone.
    Any non-finite gradient skips the whole step and bumps ``state.skipped``.
    """
    params = [p for p in params if p.grad is not None]
    grads = [p.grad for p in params]
    if not all(np.isfinite(g).all() for g in grads):
        state.skipped += 1
        return False
    state.step += 1
    b1, b2 = betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g in zip(params, grads):
        key = p.name
        m = state.m.get(key)
        if m is None:
            m = state.m[key] = np.zeros_like(p.data)
            state.v[key] = np.zeros_like(p.data)
        v = state.v[key]
        p.data *= 1.0 - lr * weight_decay
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return True


# -- loop ------------------------------------------------------------------
@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 16
    lr: float = 1e-3
    weight_decay: float = 1e-6
    warmup_steps: int = 50
    horizon: int = 16
    n_action_steps: int = 8
    n_obs: int = 2
    eval_every: int = 20
    eval_rollouts: int = 20

    def __post_init__(self):
        for name in ("epochs", "batch_size", "horizon", "n_action_steps", "n_obs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.lr <= 0 or self.weight_decay < 0 or self.warmup_steps < 0:
            raise ValueError("lr must be positive; weight_decay and warmup_steps non-negative")


@dataclass
class TrainingData:
    """Normalised training windows."""

    points: np.ndarray
    proprio: np.ndarray
    actions: np.ndarray

    @classmethod
    def from_dataset(cls, ds: DemoDataset, horizon: int, n_obs: int) -> "TrainingData":
        P, S, A = ds.windows(horizon, n_obs)
        return cls(P, ds.proprio_norm.transform(S), ds.action_norm.transform(A))

    def __len__(self) -> int:
        return len(self.actions)


def steps_per_epoch(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


class TrainingDiverged(RuntimeError):
    def __init__(self, record: dict):
        super().__init__(f"training diverged at epoch {record['epoch']}: {record.get('error')}")
        self.record = record


def train_epoch(model: PolicyModel, data: TrainingData, schedule: NoiseSchedule, beta: float,
                cfg: TrainConfig, opt: AdamWState, epoch: int, seed: int, total_steps: int,
                mode: str = "stochastic") -> dict:
    """One pass over shuffled windows; randomness from the (seed, epoch) stream."""
    rng = stream(seed, "train.epoch", epoch)
    order = rng.permutation(len(data))
    params = model.parameters()
    sums = {"total": 0.0, "mse": 0.0, "kl": 0.0}
    lr = 0.0
    n_batches = 0
    for start in range(0, len(order), cfg.batch_size):
        idx = order[start:start + cfg.batch_size]
        batch = (data.points[idx], data.proprio[idx], data.actions[idx])
        model.zero_grad()
        terms = policy_loss(batch, model, schedule, beta, rng, mode=mode)
        backward(terms.total)
        lr = cosine_lr(opt.step, total_steps, cfg.warmup_steps, cfg.lr)
        adamw_step(params, opt, lr, cfg.weight_decay)
        kl = float(terms.kl.data)
        if kl < 0 or not math.isfinite(kl):
            raise NonFiniteError(f"invalid KL {kl}")
        sums["total"] += float(terms.total.data)
        sums["mse"] += float(terms.mse.data)
        sums["kl"] += kl
        n_batches += 1
    record = {k: v / n_batches for k, v in sums.items()}
    record.update(epoch=epoch, lr=lr, skipped_steps=opt.skipped)
    return record


def train(model: PolicyModel, data: TrainingData, schedule: NoiseSchedule, beta: float, cfg: TrainConfig,
          seed: int, opt: AdamWState | None = None, start_epoch: int = 1, end_epoch: int | None = None,
          eval_fn: Callable[[PolicyModel, int], float] | None = None,
          on_epoch: Callable[[dict], None] | None = None,
          mode: str = "stochastic") -> tuple[PolicyModel, list[dict], AdamWState]:
    """Train epochs ``start_epoch..end_epoch`` (1-based, inclusive).

    Learning-rate steps count across the full ``cfg.epochs`` so a run split
    into pieces follows the same schedule as an uninterrupted one.
    """
    opt = opt or AdamWState()
    end_epoch = cfg.epochs if end_epoch is None else end_epoch
    total_steps = cfg.epochs * steps_per_epoch(len(data), cfg.batch_size)
    log = []
    for epoch in range(start_epoch, end_epoch + 1):
        try:
            record = train_epoch(model, data, schedule, beta, cfg, opt, epoch, seed, total_steps, mode)
        except NonFiniteError as exc:
            record = {"epoch": epoch, "error": str(exc), "diverged": True}
            log.append(record)
            if on_epoch:
                on_epoch(record)
            raise TrainingDiverged(record) from exc
        if eval_fn is not None and cfg.eval_every and epoch % cfg.eval_every == 0:
            record["eval_success_rate"] = eval_fn(model, epoch)
        log.append(record)
        if on_epoch:
            on_epoch(record)
    return model, log, opt


def optimizer_arrays(opt: AdamWState) -> dict[str, np.ndarray]:
    out = {"optim/step": np.array(float(opt.step)), "optim/skipped": np.array(float(opt.skipped))}
    for k in opt.m:
        out[f"optim/m/{k}"] = opt.m[k]
        out[f"optim/v/{k}"] = opt.v[k]
    return out


def optimizer_from_arrays(arrays: dict[str, np.ndarray]) -> AdamWState:
    opt = AdamWState(step=int(arrays.get("optim/step", 0)), skipped=int(arrays.get("optim/skipped", 0)))
    for name, arr in arrays.items():
        if name.startswith("optim/m/"):
            opt.m[name[8:]] = arr.copy()
        elif name.startswith("optim/v/"):
            opt.v[name[8:]] = arr.copy()
    return opt
