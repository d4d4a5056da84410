"""Vectorized fixed-horizon toy control tasks with per-step binary measure proxies.

Each step reports, alongside the true reward, a vector of {0,1} flags that are
functions of the post-step state alone; an episode's measure is the per-flag
mean over its steps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class EnvSpec:
    name: str
    obs_dim: int
    act_dim: int
    k: int              # number of measure dimensions
    horizon: int
    batch: int


@dataclass
class StepResult:
    obs: np.ndarray          # (batch, obs_dim)
    true_reward: np.ndarray  # (batch,)
    deltas: np.ndarray       # (batch, k) in {0, 1}
    done: bool


@dataclass
class EpisodeRecord:
    obs: np.ndarray          # (T, obs_dim), observation the action was taken from
    actions: np.ndarray      # (T, act_dim)
    deltas: np.ndarray       # (T, k)
    measure: np.ndarray      # (k,)
    ret: float               # undiscounted true return
    length: int


class PointFlyer:
    """Velocity-controlled point in a bounded square.

    Accelerations are clipped to [-1, 1], velocity to [-2, 2] per axis after
    adding 0.2 * action, position to [-50, 50]. True reward is distance moved
    minus 0.05 * squared action norm; the two measure flags are the signs of
    the velocity components.
    """

    POS_LIMIT = 50.0
    VEL_LIMIT = 2.0
    ACCEL = 0.2
    ACTION_COST = 0.05

    def __init__(self, horizon: int = 100, batch: int = 64):
        self.spec = EnvSpec("PointFlyer", obs_dim=5, act_dim=2, k=2,
                            horizon=horizon, batch=batch)
        self._pos = np.zeros((batch, 2))
        self._vel = np.zeros((batch, 2))
        self._t = horizon

    def reset(self, seed: int | None = None) -> np.ndarray:
        del seed  # start state is fixed; kept for interface symmetry
        self._pos[...] = 0.0
        self._vel[...] = 0.0
        self._t = 0
        return self._obs()

    def _obs(self) -> np.ndarray:
        frac = np.full((self.spec.batch, 1), self._t / self.spec.horizon)
        return np.concatenate([self._pos / self.POS_LIMIT, self._vel / self.VEL_LIMIT, frac], axis=1)

    def step(self, actions: np.ndarray) -> StepResult:
        if self._t >= self.spec.horizon:
            raise ValueError("episode already done; call reset()")
        a = np.clip(np.asarray(actions, dtype=np.float64).reshape(self.spec.batch, 2), -1.0, 1.0)
        self._vel = np.clip(self._vel + self.ACCEL * a, -self.VEL_LIMIT, self.VEL_LIMIT)
        new_pos = np.clip(self._pos + self._vel, -self.POS_LIMIT, self.POS_LIMIT)
        moved = np.linalg.norm(new_pos - self._pos, axis=1)
        reward = moved - self.ACTION_COST * (a * a).sum(axis=1)
        self._pos = new_pos
        self._t += 1
        deltas = (self._vel > 0.0).astype(np.float64)
        return StepResult(obs=self._obs(), true_reward=reward, deltas=deltas,
                          done=self._t >= self.spec.horizon)


class ChainHopper:
    """Ten-cell chain walked right on positive scalar actions.

    A step with action > 0 moves right (clamped at the last cell), anything
    else moves left (clamped at cell 0). The single measure flag records
    whether the step went right; true reward is 1 only when the right move
    actually advanced the position.
    """

    LENGTH = 10

    def __init__(self, horizon: int = 100, batch: int = 64):
        self.spec = EnvSpec("ChainHopper", obs_dim=3, act_dim=1, k=1,
                            horizon=horizon, batch=batch)
        self._pos = np.zeros(batch, dtype=np.int64)
        self._moved_right = np.zeros(batch)
        self._t = horizon

    def reset(self, seed: int | None = None) -> np.ndarray:
        del seed
        self._pos[...] = 0
        self._moved_right[...] = 0.0
        self._t = 0
        return self._obs()

    def _obs(self) -> np.ndarray:
        return np.stack([self._pos / (self.LENGTH - 1), self._moved_right,
                         np.full(self.spec.batch, self._t / self.spec.horizon)], axis=1)

    def step(self, actions: np.ndarray) -> StepResult:
        if self._t >= self.spec.horizon:
            raise ValueError("episode already done; call reset()")
        a = np.asarray(actions, dtype=np.float64).reshape(self.spec.batch)
        right = a > 0.0
        advanced = right & (self._pos < self.LENGTH - 1)
        self._pos = np.where(right, np.minimum(self._pos + 1, self.LENGTH - 1),
                             np.maximum(self._pos - 1, 0))
        self._moved_right = right.astype(np.float64)
        self._t += 1
        return StepResult(obs=self._obs(), true_reward=advanced.astype(np.float64),
                          deltas=self._moved_right[:, None].copy(),
                          done=self._t >= self.spec.horizon)


ENV_NAMES = ("PointFlyer", "ChainHopper")


def make_env(name: str, horizon: int = 100, batch: int = 64):
    if name == "PointFlyer":
        return PointFlyer(horizon=horizon, batch=batch)
    if name == "ChainHopper":
        return ChainHopper(horizon=horizon, batch=batch)
    raise ValueError(f"unknown env {name!r}; choose from {ENV_NAMES}")


def episode_measure(deltas: np.ndarray) -> np.ndarray:
    """Mean of the per-step flags over the episode; deltas has shape (T, k) or (B, T, k)."""
    d = np.asarray(deltas, dtype=np.float64)
    if d.shape[-2] == 0:
        raise ValueError("empty episode has no measure")
    return d.mean(axis=-2)


class ScriptedExpert:
    """Duty-cycling controller that hits a target measure within 2/T.

    Per measure dimension it pushes +1 while the running fraction of positive
    flags trails the target, otherwise -1. For fractional targets the speed
    is capped so the flag can flip within a step or two; targets of exactly
    0 or 1 push at full strength for maximum true return.
    """

    def __init__(self, env, target: np.ndarray):
        self.env = env
        self.target = np.asarray(target, dtype=np.float64).reshape(env.spec.k)
        if np.any(self.target < 0.0) or np.any(self.target > 1.0):
            raise ValueError(f"target measure {self.target} outside [0, 1]")
        self._counts = np.zeros((env.spec.batch, env.spec.k))

    def reset(self) -> None:
        self._counts[...] = 0.0

    def act(self, t: int) -> np.ndarray:
        """Action for step t (0-based); reads env state, tracks its own flag counts."""
        want = np.where(self._counts < self.target * (t + 1), 1.0, -1.0)  # (B, k)
        if isinstance(self.env, PointFlyer):
            vel = self.env._vel
            cap = PointFlyer.ACCEL       # low ceiling keeps sign flips cheap
            fractional = (self.target > 0.0) & (self.target < 1.0)
            v_target = np.clip(vel + PointFlyer.ACCEL * want, -cap, cap)
            a = np.where(fractional, (v_target - vel) / PointFlyer.ACCEL, want)
            v_next = np.clip(vel + PointFlyer.ACCEL * a, -PointFlyer.VEL_LIMIT, PointFlyer.VEL_LIMIT)
            self._counts += (v_next > 0.0)
            return a
        a = want.reshape(self.env.spec.batch, 1)
        self._counts += (want > 0.0)
        return a


def run_expert_episode(env_name: str, horizon: int, target) -> EpisodeRecord:
    """Roll one scripted-expert episode and record it."""
    env = make_env(env_name, horizon=horizon, batch=1)
    expert = ScriptedExpert(env, np.atleast_1d(np.asarray(target, dtype=np.float64)))
    obs = env.reset()
    expert.reset()
    obs_log = np.zeros((horizon, env.spec.obs_dim))
    act_log = np.zeros((horizon, env.spec.act_dim))
    delta_log = np.zeros((horizon, env.spec.k))
    ret = 0.0
    for t in range(horizon):
        a = expert.act(t)
        obs_log[t] = obs[0]
        act_log[t] = np.asarray(a).reshape(env.spec.act_dim)
        res = env.step(a)
        delta_log[t] = res.deltas[0]
        ret += float(res.true_reward[0])
        obs = res.obs
    return EpisodeRecord(obs=obs_log, actions=act_log, deltas=delta_log,
                         measure=episode_measure(delta_log), ret=ret, length=horizon)
