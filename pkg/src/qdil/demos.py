"""Demonstration pipeline: scripted-expert candidates, diverse selection, JSONL I/O.

Candidates are whole expert episodes spread over a grid of measure targets.
Selection keeps the top returns, then greedily maximizes the minimum pairwise
distance in measure space so a handful of episodes still spans the space.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .envs import EpisodeRecord, make_env, run_expert_episode


@dataclass
class DemoSet:
    env: str
    obs_dim: int
    act_dim: int
    k: int
    episodes: list[EpisodeRecord] = field(default_factory=list)
    has_actions: bool = True

    def __post_init__(self) -> None:
        if not self.episodes:
            raise ValueError("demo set must contain at least one episode")
        for i, ep in enumerate(self.episodes):
            if ep.obs.shape[1] != self.obs_dim or ep.deltas.shape[1] != self.k:
                raise ValueError(f"episode {i} dims do not match header")
            if self.has_actions and (ep.actions is None or ep.actions.shape[1] != self.act_dim):
                raise ValueError(f"episode {i} actions do not match header")

    @property
    def obs(self) -> np.ndarray:
        return np.concatenate([ep.obs for ep in self.episodes], axis=0)

    @property
    def actions(self) -> np.ndarray | None:
        if not self.has_actions:
            return None
        return np.concatenate([ep.actions for ep in self.episodes], axis=0)

    @property
    def deltas(self) -> np.ndarray:
        return np.concatenate([ep.deltas for ep in self.episodes], axis=0)

    @property
    def measures(self) -> np.ndarray:
        return np.stack([ep.measure for ep in self.episodes])

    @property
    def returns(self) -> np.ndarray:
        return np.array([ep.ret for ep in self.episodes])

    def without_actions(self) -> "DemoSet":
        eps = [EpisodeRecord(obs=ep.obs, actions=None, deltas=ep.deltas,
                             measure=ep.measure, ret=ep.ret, length=ep.length)
               for ep in self.episodes]
        return DemoSet(env=self.env, obs_dim=self.obs_dim, act_dim=self.act_dim,
                       k=self.k, episodes=eps, has_actions=False)


@dataclass
class CandidatePool:
    env: str
    obs_dim: int
    act_dim: int
    k: int
    episodes: list[EpisodeRecord]


def target_grid(k: int, per_dim: int) -> np.ndarray:
    """All measure targets of a regular per_dim^k grid over [0,1]^k."""
    axes = [np.linspace(0.0, 1.0, per_dim) for _ in range(k)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def generate_candidates(env_name: str, horizon: int, targets: np.ndarray,
                        episodes_per_target: int = 1) -> CandidatePool:
    """One scripted-expert episode per target (more only duplicates: the expert is deterministic)."""
    spec = make_env(env_name, horizon=horizon, batch=1).spec
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    if targets.shape[1] != spec.k:
        raise ValueError(f"targets have {targets.shape[1]} dims, env has {spec.k}")
    episodes = []
    for target in targets:
        for _ in range(episodes_per_target):
            episodes.append(run_expert_episode(env_name, horizon, target))
    return CandidatePool(env=env_name, obs_dim=spec.obs_dim, act_dim=spec.act_dim,
                         k=spec.k, episodes=episodes)


def select_demonstrations(pool: CandidatePool, n: int = 4, top_k: int | None = None) -> DemoSet:
    """Top returns first, then greedy max-min spread over measure space.

    Starts from the highest-return candidate; each following pick maximizes its
    minimum Euclidean measure distance to the already-chosen set. Ties go to
    the higher return, then the lower pool index.
    """
    eps = pool.episodes
    if n < 1 or n > len(eps):
        raise ValueError(f"cannot select {n} of {len(eps)} candidates")
    top_k = min(500, len(eps)) if top_k is None else top_k
    by_return = sorted(range(len(eps)), key=lambda i: (-eps[i].ret, i))
    kept = by_return[:top_k]
    if n > len(kept):
        raise ValueError(f"top_k={top_k} keeps fewer candidates than n={n}")
    measures = np.stack([eps[i].measure for i in kept])
    selected = [0]
    remaining = list(range(1, len(kept)))
    while len(selected) < n:
        sel_m = measures[selected]
        best = None
        for r in remaining:
            min_dist = float(np.min(np.linalg.norm(sel_m - measures[r], axis=1)))
            key = (min_dist, eps[kept[r]].ret, -kept[r])
            if best is None or key > best[0]:
                best = (key, r)
        selected.append(best[1])
        remaining.remove(best[1])
    chosen = [eps[kept[i]] for i in selected]
    return DemoSet(env=pool.env, obs_dim=pool.obs_dim, act_dim=pool.act_dim,
                   k=pool.k, episodes=chosen)


# --- JSONL I/O ---
# line 1: {"env", "obs_dim", "act_dim", "k", "count"}
# then one episode per line: {"obs", "actions"?, "deltas", "measure", "ret"}
# json float serialization round-trips f64 exactly

_HEADER_KEYS = ("env", "obs_dim", "act_dim", "k", "count")
_EPISODE_KEYS = ("obs", "deltas", "measure", "ret")


def save_demos(path, demos: DemoSet) -> None:
    with open(path, "w") as f:
        header = {"env": demos.env, "obs_dim": demos.obs_dim,
                  "act_dim": demos.act_dim, "k": demos.k,
                  "count": len(demos.episodes)}
        f.write(json.dumps(header) + "\n")
        for ep in demos.episodes:
            rec = {"obs": ep.obs.tolist(), "deltas": ep.deltas.tolist(),
                   "measure": ep.measure.tolist(), "ret": ep.ret}
            if demos.has_actions:
                rec["actions"] = ep.actions.tolist()
            f.write(json.dumps(rec) + "\n")


def _parse_line(lineno: int, line: str) -> dict:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as e:
        raise ValueError(f"line {lineno}: invalid JSON: {e}") from None
    if not isinstance(rec, dict):
        raise ValueError(f"line {lineno}: expected a JSON object")
    return rec


def load_demos(path) -> DemoSet:
    with open(path) as f:
        lines = [ln for ln in f.read().splitlines() if ln.strip()]
    if not lines:
        raise ValueError("line 1: missing header")
    header = _parse_line(1, lines[0])
    for key in _HEADER_KEYS:
        if key not in header:
            raise ValueError(f"line 1: header missing key {key!r}")
    episodes = []
    has_actions = None
    for lineno, line in enumerate(lines[1:], start=2):
        rec = _parse_line(lineno, line)
        for key in _EPISODE_KEYS:
            if key not in rec:
                raise ValueError(f"line {lineno}: episode missing key {key!r}")
        obs = np.asarray(rec["obs"], dtype=np.float64)
        deltas = np.asarray(rec["deltas"], dtype=np.float64)
        measure = np.asarray(rec["measure"], dtype=np.float64)
        if obs.ndim != 2 or obs.shape[1] != header["obs_dim"]:
            raise ValueError(f"line {lineno}: obs shape {obs.shape} does not match "
                             f"obs_dim {header['obs_dim']}")
        if deltas.shape != (obs.shape[0], header["k"]):
            raise ValueError(f"line {lineno}: deltas shape {deltas.shape} does not match")
        if measure.shape != (header["k"],):
            raise ValueError(f"line {lineno}: measure shape {measure.shape} does not match")
        this_has = "actions" in rec
        if has_actions is None:
            has_actions = this_has
        elif this_has != has_actions:
            raise ValueError(f"line {lineno}: mixed presence of actions across episodes")
        actions = None
        if this_has:
            actions = np.asarray(rec["actions"], dtype=np.float64)
            if actions.shape != (obs.shape[0], header["act_dim"]):
                raise ValueError(f"line {lineno}: actions shape {actions.shape} does not match")
        episodes.append(EpisodeRecord(obs=obs, actions=actions, deltas=deltas,
                                      measure=measure, ret=float(rec["ret"]),
                                      length=obs.shape[0]))
    if len(episodes) != header["count"]:
        raise ValueError(f"line {len(lines)}: header promises {header['count']} episodes, "
                         f"file has {len(episodes)} (truncated?)")
    return DemoSet(env=header["env"], obs_dim=header["obs_dim"],
                   act_dim=header["act_dim"], k=header["k"],
                   episodes=episodes, has_actions=bool(has_actions))
