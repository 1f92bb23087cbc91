"""Two kinematic 2D manipulation tasks, scripted experts, point-set observations
and batched receding-horizon rollouts.

Tasks
-----
``point_reach``  drive the effector to the goal; the effector is the object.
``push_box``     push a box to the goal; the box moves only when the effector
                 is within the contact radius and moving towards it.

Actions are 2D velocity commands in [-1, 1]^2, rescaled to at most unit norm
and multiplied by ``v_max``. Success means object-goal distance < ``tau``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Protocol, Sequence

import numpy as np

from .numerics import stream

TASKS = ("point_reach", "push_box")


@dataclass(frozen=True)
class EnvConfig:
    task: str = "point_reach"
    v_max: float = 0.05
    tau: float = 0.03
    max_steps: int = 100
    contact_radius: float = 0.06
    k_points: int = 32
    disc_radius: float = 0.03
    jitter: float = 0.005

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.k_points % 2:
            raise ValueError("k_points must be even (half on the object, half on the goal)")


@dataclass(frozen=True)
class EnvState:
    effector: np.ndarray
    obj: np.ndarray
    goal: np.ndarray
    prev_effector: np.ndarray
    step: int = 0


@dataclass
class EpisodeResult:
    seed: int
    success: bool
    final_distance: float
    steps: int
    trace: list = field(default_factory=list)
    aborted: bool = False


POINT_DIM = 3
PROPRIO_DIM = 4
ACTION_DIM = 2


def _clip01(p: np.ndarray) -> np.ndarray:
    return np.clip(p, 0.0, 1.0)


def distance(state: EnvState) -> float:
    return float(np.linalg.norm(state.obj - state.goal))


def is_success(state: EnvState, cfg: EnvConfig) -> bool:
    return distance(state) < cfg.tau


# half-width of the push direction range, radians
PUSH_ANGLE = np.pi / 6


def reset(cfg: EnvConfig, rng: np.random.Generator) -> EnvState:
    """Sample a start configuration from the task's sampling region."""
    if cfg.task == "point_reach":
        while True:
            eff = rng.uniform(0.1, 0.9, 2)
            goal = rng.uniform(0.1, 0.9, 2)
            if np.linalg.norm(eff - goal) >= 0.2:
                return EnvState(eff, eff.copy(), goal, eff.copy())
    # pushes run roughly left to right with the effector starting behind the
    # box, so ten demos cover the region densely enough to imitate
    box = np.array([rng.uniform(0.3, 0.5), rng.uniform(0.35, 0.65)])
    angle = rng.uniform(-PUSH_ANGLE, PUSH_ANGLE)
    g = np.array([np.cos(angle), np.sin(angle)])
    goal = box + rng.uniform(0.15, 0.25) * g
    n = np.array([-g[1], g[0]])
    eff = box - rng.uniform(0.08, 0.12) * g + rng.uniform(-0.03, 0.03) * n
    return EnvState(eff, box, goal, eff.copy())


def _command(action, cfg: EnvConfig) -> np.ndarray:
    a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
    n = float(np.linalg.norm(a))
    if n > 1.0:
        a = a / n
    return cfg.v_max * a


def env_step(state: EnvState, action, cfg: EnvConfig) -> EnvState:
    disp = _command(action, cfg)
    eff = _clip01(state.effector + disp)
    moved = eff - state.effector
    if cfg.task == "point_reach":
        obj = eff.copy()
    else:
        # the box is carried along the effector's motion just far enough to
        # stay at contact distance, so a sideways offset does not grow
        obj = state.obj
        step = float(np.linalg.norm(moved))
        keep = min(cfg.contact_radius, float(np.linalg.norm(state.obj - state.effector)))
        r = state.obj - eff
        if step > 0.0 and float(r @ r) < keep * keep:
            m = moved / step
            b = float(r @ m)
            obj = _clip01(state.obj + (math.sqrt(b * b - float(r @ r) + keep * keep) - b) * m)
    return EnvState(eff, obj, state.goal.copy(), state.effector.copy(), min(state.step + 1, cfg.max_steps))


# fraction of v_max the expert pushes at; slow pushes keep the box on line
PUSH_SPEED = 0.5


def scripted_expert(state: EnvState, cfg: EnvConfig) -> np.ndarray:
    """Proportional controller; returns an action in [-1, 1]^2."""
    if cfg.task == "point_reach":
        return _unit_clip((state.goal - state.effector) / cfg.v_max)
    to_goal = state.goal - state.obj
    gdist = float(np.linalg.norm(to_goal))
    if gdist < 1e-9:
        return np.zeros(2)
    g = to_goal / gdist
    n = np.array([-g[1], g[0]])
    rel = state.effector - state.obj
    along, lateral = float(rel @ g), float(rel @ n)
    standoff = cfg.contact_radius
    contact = state.obj - standoff * g
    if along > -0.02:
        # in front of or beside the box: swing round it on the near side
        side = 1.0 if lateral >= 0 else -1.0
        waypoint = state.obj + side * 0.1 * n - 0.06 * g
        return _unit_clip((waypoint - state.effector) / cfg.v_max)
    # blend smoothly from approaching the contact point to pushing along the
    # goal line as the effector lines up behind the box
    aligned = max(0.0, 1.0 - abs(lateral) / 0.03) * max(0.0, 1.0 - abs(along + standoff) / 0.05)
    push = aligned * min(gdist, PUSH_SPEED * cfg.v_max) * g + (contact - state.effector)
    return _unit_clip(push / cfg.v_max)


def _unit_clip(v: np.ndarray) -> np.ndarray:
    n = float(np.linalg.norm(v))
    return v / n if n > 1.0 else v


def observe(state: EnvState, cfg: EnvConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """K points on the object and goal circles plus jitter, and proprio.

    Points are robot-centric: (x, y) relative to the effector, plus a tag that
    is 0 on the object disc and 1 on the goal disc. Proprio is (effector,
    previous effector) in workspace coordinates.
    """
    half = cfg.k_points // 2
    ang = 2.0 * math.pi * np.arange(half) / half
    ring = cfg.disc_radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    xy = np.concatenate([state.obj + ring, state.goal + ring])
    if cfg.jitter > 0:
        xy = xy + cfg.jitter * rng.standard_normal(xy.shape)
    tag = np.concatenate([np.zeros(half), np.ones(half)])[:, None]
    points = np.concatenate([xy - state.effector, tag], axis=1)
    proprio = np.concatenate([state.effector, state.prev_effector])
    return points, proprio


class Policy(Protocol):
    """Maps a batch of observation windows to raw action chunks (B, H, 2)."""

    def __call__(self, points: np.ndarray, proprio: np.ndarray, states: Sequence[EnvState],
                 rngs: list) -> np.ndarray: ...


class ExpertPolicy:
    """The scripted expert rolled forward on its own copy of each state."""

    def __init__(self, cfg: EnvConfig, horizon: int = 16):
        self.cfg = cfg
        self.horizon = horizon

    def __call__(self, points, proprio, states, rngs):
        out = np.zeros((len(states), self.horizon, ACTION_DIM))
        for b, s in enumerate(states):
            for h in range(self.horizon):
                a = scripted_expert(s, self.cfg)
                out[b, h] = a
                s = env_step(s, a, self.cfg)
        return out


class NoisePolicy:
    """Uniform random actions; the chance-level reference."""

    def __init__(self, horizon: int = 16):
        self.horizon = horizon

    def __call__(self, points, proprio, states, rngs):
        return np.stack([r.uniform(-1.0, 1.0, (self.horizon, ACTION_DIM)) for r in rngs])


def episode_streams(seed: int):
    """(reset, observation, policy) generators for one episode."""
    return stream(seed, "env.reset"), stream(seed, "env.obs"), stream(seed, "policy")


def rollout_batch(policy: Policy, cfg: EnvConfig, seeds: Sequence[int], n_obs: int = 2,
                  n_action_steps: int = 8, record_trace: bool = False) -> list[EpisodeResult]:
    """Run one episode per seed in lockstep with receding-horizon replanning.

    Every episode keeps its own reset/observation/policy streams, and the
    batch composition never changes between replans, so results depend only
    on the seed set. A policy with a ``bind`` method is told the seeds, in
    batch order, before the first replan. Episodes stop at success or ``max_steps``; a non-finite
    policy output aborts the affected episode as a failure.
    """
    seeds = list(seeds)
    B = len(seeds)
    if hasattr(policy, "bind"):
        policy.bind(seeds)
    streams = [episode_streams(s) for s in seeds]
    states = [reset(cfg, st[0]) for st in streams]
    policy_rngs = [st[2] for st in streams]
    windows = []
    for s, st in zip(states, streams):
        obs = observe(s, cfg, st[1])
        windows.append([obs] * n_obs)
    done = [is_success(s, cfg) for s in states]
    success = list(done)
    aborted = [False] * B
    traces = [[s.effector.copy()] if record_trace else [] for s in states]
    while not all(done):
        points = np.stack([np.stack([w[0] for w in win]) for win in windows])
        proprio = np.stack([np.stack([w[1] for w in win]) for win in windows])
        chunk = policy(points, proprio, states, policy_rngs)
        for b in range(B):
            if done[b]:
                continue
            if not np.isfinite(chunk[b]).all():
                done[b], aborted[b] = True, True
                continue
            for k in range(min(n_action_steps, chunk.shape[1])):
                states[b] = env_step(states[b], chunk[b, k], cfg)
                windows[b] = windows[b][1:] + [observe(states[b], cfg, streams[b][1])]
                if record_trace:
                    traces[b].append(states[b].effector.copy())
                if is_success(states[b], cfg):
                    done[b] = success[b] = True
                    break
                if states[b].step >= cfg.max_steps:
                    done[b] = True
                    break
    return [EpisodeResult(seed, success[b], distance(states[b]), states[b].step, traces[b], aborted[b])
            for b, seed in enumerate(seeds)]


def rollout(policy: Policy, cfg: EnvConfig, seed: int, n_obs: int = 2, n_action_steps: int = 8) -> EpisodeResult:
    return rollout_batch(policy, cfg, [seed], n_obs, n_action_steps, record_trace=True)[0]


def success_rate(results: Sequence[EpisodeResult]) -> float:
    if not results:
        raise ValueError("no episodes")
    return sum(r.success for r in results) / len(results)


def sr5(history: Sequence[float]) -> float:
    """Mean of the five largest success rates in an evaluation history."""
    if len(history) < 5:
        raise ValueError(f"SR5 needs at least 5 evaluations, got {len(history)}")
    return float(np.mean(sorted(history, reverse=True)[:5]))


def expert_episode(cfg: EnvConfig, rng_reset, rng_obs, action_noise: float = 0.0, rng_noise=None):
    """Run the expert from a fresh start; returns per-step observations and actions.

    With ``action_noise`` > 0 the executed action is perturbed by Gaussian
    noise of that std while the recorded label stays the clean expert action,
    so the demos visit (and label) states slightly off the expert's path.
    """
    if action_noise > 0 and rng_noise is None:
        raise ValueError("action_noise needs rng_noise")
    state = reset(cfg, rng_reset)
    points, proprio, actions = [], [], []
    while not is_success(state, cfg) and state.step < cfg.max_steps:
        p, s = observe(state, cfg, rng_obs)
        a = scripted_expert(state, cfg)
        points.append(p)
        proprio.append(s)
        actions.append(a)
        executed = a + action_noise * rng_noise.standard_normal(a.shape) if action_noise > 0 else a
        state = env_step(state, executed, cfg)
    return np.array(points), np.array(proprio), np.array(actions), is_success(state, cfg)


def with_task(cfg: EnvConfig, task: str) -> EnvConfig:
    return replace(cfg, task=task)


PolicyFn = Callable[..., np.ndarray]
