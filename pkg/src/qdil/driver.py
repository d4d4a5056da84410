"""Quality-diversity driver: ties the archive, coefficient search, PPO engine and
reward model into one iteration loop.

Per iteration: freeze archive occupancy, estimate per-stream policy gradients,
insert the search policy, branch a population of coefficient-weighted policies
and insert each rollout, rank the branch improvements to adapt the coefficient
distribution, walk the search policy along the adapted mean coefficients, and
refresh the reward model on the walk's final rollouts. Rollouts made while
estimating gradients or walking are never inserted; only the search-policy and
branch evaluations touch the archive.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .archive import ArchiveConfig, ArchiveMetrics, GridArchive
from .demos import DemoSet
from .envs import make_env
from .nets import forward, split_params, std_exp
from .ppo import PpoConfig, VppoEngine
from .rewards import BonusOnlyModel, BonusParams, GailModel, VailModel
from .xnes import CoeffDistribution

MODEL_KINDS = ("gail", "vail", "bonus_only")


@dataclass(frozen=True)
class QdConfig:
    env_name: str = "PointFlyer"
    horizon: int = 100
    env_batch: int = 32
    n_q: int = 300
    n1: int = 10
    n2: int = 10
    lam: int = 8
    sigma_g: float = 1.0
    archive: ArchiveConfig = field(default_factory=lambda: ArchiveConfig(
        lo=(0.0, 0.0), hi=(1.0, 1.0), cells_per_dim=(25, 25)))
    ppo: PpoConfig = field(default_factory=PpoConfig)
    bonus: BonusParams = field(default_factory=BonusParams)
    model_kind: str = "gail"
    measure_conditioned: bool = True
    use_actions: bool = True
    model_hidden: tuple[int, ...] = (32, 32)
    model_lr: float = 3e-4
    model_minibatch: int = 256
    vail_latent: int = 50
    vail_ic: float = 0.5
    vail_dual_step: float = 1e-4
    policy_hidden: tuple[int, ...] = (32, 32)
    critic_hidden: tuple[int, ...] = (32, 32)
    jacobian_episodes: int | None = None   # each defaults to env_batch
    branch_episodes: int | None = None
    walk_episodes: int | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_q < 1:
            raise ValueError("n_q must be >= 1")
        if self.lam < 2:
            raise ValueError("lam must be >= 2")
        if self.n1 < 0 or self.n2 < 0:
            raise ValueError("n1 and n2 must be >= 0")
        if self.model_kind not in MODEL_KINDS:
            raise ValueError(f"model_kind must be one of {MODEL_KINDS}")
        if self.sigma_g <= 0.0:
            raise ValueError("sigma_g must be positive")


@dataclass(frozen=True)
class IterationReport:
    iteration: int
    metrics: ArchiveMetrics
    improvements: np.ndarray         # branch improvements, length lam
    empty_cell_fraction: float       # of branch episodes, vs iteration-start occupancy
    restarted: bool
    wall_s: float


class DriverAbort(RuntimeError):
    """An iteration failed; .reports holds everything completed before the abort."""

    def __init__(self, message: str, reports: list[IterationReport]):
        super().__init__(message)
        self.reports = reports


def combine_branch(theta_mu: np.ndarray, grads: np.ndarray, coeffs: np.ndarray) -> np.ndarray:
    """theta_mu + |c0| * grad_f + sum_j c_j * grad_mj."""
    theta = theta_mu + abs(coeffs[0]) * grads[0]
    for j in range(1, coeffs.shape[0]):
        theta = theta + coeffs[j] * grads[j]
    return theta


def build_model(cfg: QdConfig, obs_dim: int, act_dim: int, k: int,
                rng: np.random.Generator):
    if cfg.model_kind == "bonus_only":
        return BonusOnlyModel(cfg.bonus)
    kwargs = dict(measure_conditioned=cfg.measure_conditioned,
                  use_actions=cfg.use_actions, hidden=cfg.model_hidden,
                  bonus=cfg.bonus, lr=cfg.model_lr,
                  minibatch=cfg.model_minibatch, rng=rng)
    if cfg.model_kind == "gail":
        return GailModel(obs_dim, act_dim, k, **kwargs)
    return VailModel(obs_dim, act_dim, k, latent=cfg.vail_latent, ic=cfg.vail_ic,
                     dual_step=cfg.vail_dual_step, **kwargs)


class QdDriver:
    def __init__(self, cfg: QdConfig, demos: DemoSet | None = None, *, model=None):
        self.cfg = cfg
        self.env = make_env(cfg.env_name, horizon=cfg.horizon, batch=cfg.env_batch)
        spec = self.env.spec
        if len(cfg.archive.lo) != spec.k:
            raise ValueError(f"archive has {len(cfg.archive.lo)} dims, env measures {spec.k}")
        if cfg.model_kind != "bonus_only" and model is None:
            if demos is None:
                raise ValueError(f"model kind {cfg.model_kind!r} requires demonstrations")
            if (demos.obs_dim, demos.act_dim, demos.k) != (spec.obs_dim, spec.act_dim, spec.k):
                raise ValueError(
                    f"demo dims (obs={demos.obs_dim}, act={demos.act_dim}, k={demos.k}) "
                    f"do not match env (obs={spec.obs_dim}, act={spec.act_dim}, k={spec.k})")
        self.demos = demos
        s_engine, s_policy, s_model, s_run = np.random.SeedSequence(cfg.seed).spawn(4)
        self.engine = VppoEngine(self.env, cfg.ppo, policy_hidden=cfg.policy_hidden,
                                 critic_hidden=cfg.critic_hidden,
                                 rng=np.random.default_rng(s_engine))
        self.theta_mu = self.engine.init_policy(np.random.default_rng(s_policy))
        self.model = model if model is not None else build_model(
            cfg, spec.obs_dim, spec.act_dim, spec.k, np.random.default_rng(s_model))
        self.archive = GridArchive(cfg.archive)
        self.dist = CoeffDistribution(n=spec.k + 1, sigma=cfg.sigma_g)
        self.rng = np.random.default_rng(s_run)
        self._ep = {
            "jacobian": cfg.jacobian_episodes or cfg.env_batch,
            "branch": cfg.branch_episodes or cfg.env_batch,
            "walk": cfg.walk_episodes or cfg.env_batch,
        }

    # -- iteration pieces ---------------------------------------------------

    def branch_and_evaluate(self, grads: np.ndarray, coeffs: np.ndarray, snapshot):
        """Insert each coefficient-weighted branch; returns (improvements, accepted_any, measures)."""
        improvements = np.zeros(coeffs.shape[0])
        accepted = False
        all_measures = []
        for i in range(coeffs.shape[0]):
            theta_i = combine_branch(self.theta_mu, grads, coeffs[i])
            batch = self.engine.collect(theta_i, self._ep["branch"], self.model,
                                        snapshot, self.rng)
            out = self.archive.insert(theta_i, batch.imitation_return_mean(),
                                      batch.measures.mean(axis=0))
            improvements[i] = out.improvement
            accepted = accepted or out.accepted
            all_measures.append(batch.measures)
        return improvements, accepted, np.concatenate(all_measures, axis=0)

    def maybe_restart(self, any_change: bool) -> bool:
        """On a changeless iteration: reset the coefficient search and re-seed the
        search policy from a random elite."""
        if any_change:
            return False
        if not self.archive.metrics().occupied:
            raise RuntimeError("iteration changed nothing and the archive is empty; "
                               "cannot re-seed the search policy")
        self.dist.restart(self.cfg.sigma_g)
        solution, _, _ = self.archive.random_elite(self.rng)
        self.theta_mu = solution
        return True

    def _model_update(self, batch) -> dict:
        spec = self.env.spec
        n = batch.n_episodes * batch.horizon
        return self.model.update(self.demos,
                                 batch.obs_raw.reshape(n, spec.obs_dim),
                                 batch.actions.reshape(n, spec.act_dim),
                                 batch.deltas.reshape(n, spec.k),
                                 self.rng)

    def run_iteration(self, iteration: int) -> IterationReport:
        t0 = time.perf_counter()
        snapshot = self.archive.snapshot()
        jr = self.engine.compute_jacobian(self.theta_mu, self.model, snapshot,
                                          n_episodes=self._ep["jacobian"],
                                          n_iters=self.cfg.n1, rng=self.rng)
        out_mu = self.archive.insert(self.theta_mu, jr.f_hat, jr.m_hat)
        coeffs, zs = self.dist.sample(self.cfg.lam, self.rng)
        improvements, any_branch, branch_measures = self.branch_and_evaluate(
            jr.grads, coeffs, snapshot)
        empty_frac = float(snapshot.unoccupied(branch_measures).mean())
        self.dist.adapt(zs, improvements)
        self.theta_mu, walk_batch, _ = self.engine.walk(
            self.theta_mu, self.dist.mean_coeffs(), self.model, snapshot,
            n_episodes=self._ep["walk"], n_iters=self.cfg.n2, rng=self.rng)
        if walk_batch is None:   # n2 == 0: the model still needs policy rollouts
            walk_batch = self.engine.collect(self.theta_mu, self._ep["walk"],
                                             self.model, snapshot, self.rng, "walk")
        self._model_update(walk_batch)
        restarted = self.maybe_restart(out_mu.accepted or any_branch)
        return IterationReport(iteration=iteration, metrics=self.archive.metrics(),
                               improvements=improvements,
                               empty_cell_fraction=empty_frac,
                               restarted=restarted,
                               wall_s=time.perf_counter() - t0)

    def run(self, callback=None) -> tuple[GridArchive, list[IterationReport]]:
        reports: list[IterationReport] = []
        for iteration in range(self.cfg.n_q):
            try:
                report = self.run_iteration(iteration)
            except Exception as e:
                raise DriverAbort(f"iteration {iteration} failed: {e}", reports) from e
            reports.append(report)
            if callback is not None:
                callback(report)
        return self.archive, reports


# -- true-reward evaluation ---------------------------------------------------


def rescore_archive(archive: GridArchive, engine: VppoEngine,
                    rng: np.random.Generator, episodes_per_elite: int = 8
                    ) -> tuple[ArchiveMetrics, np.ndarray]:
    """Re-roll every elite under the env's true reward; metrics over those returns.

    Training fitness comes from the reward model, so reported quality uses
    fresh true-return estimates instead (same cells, replaced fitness).
    """
    env = make_env(engine.env.spec.name, horizon=engine.env.spec.horizon,
                   batch=episodes_per_elite)
    spec = engine.policy_spec
    frozen_obs = engine.obs_norm
    true_fitness = []
    for _, solution, _, _ in archive.elites():
        _, _, log_std = split_params(spec, solution)
        obs = env.reset()
        total = np.zeros(episodes_per_elite)
        for _ in range(env.spec.horizon):
            o_n = frozen_obs.normalize(obs) if engine.cfg.normalize_obs else obs
            mu, _ = forward(spec, solution, o_n)
            a = mu + std_exp(log_std) * rng.standard_normal(mu.shape)
            res = env.step(a)
            total += res.true_reward
            obs = res.obs
        true_fitness.append(float(total.mean()))
    true_fitness = np.asarray(true_fitness)
    if true_fitness.size == 0:
        return ArchiveMetrics(0.0, 0.0, float("nan"), float("nan"), 0), true_fitness
    qd = float(np.maximum(true_fitness - archive.cfg.qd_floor, 0.0).sum())
    coverage = true_fitness.size / archive.cfg.n_cells
    return ArchiveMetrics(qd_score=qd, coverage=coverage,
                          best=float(true_fitness.max()),
                          average=float(true_fitness.mean()),
                          occupied=true_fitness.size), true_fitness


# -- policy-gradient direction check ------------------------------------------

# chance that a 20-step uniform coin-flip walk moves right at least 17 times
P_UNIFORM_TAIL = 1351.0 / 1048576.0


@dataclass(frozen=True)
class LemmaResult:
    seed: int
    p_old: float
    p_new: float


def verify_lemma1(seeds=(0, 1, 2), *, n1: int = 10, horizon: int = 20,
                  cells: int = 20, env_batch: int = 64,
                  train_episodes: int = 256, eval_episodes: int = 2048,
                  hidden: tuple[int, ...] = (16, 16)) -> list[LemmaResult]:
    """Does following the model-reward gradient raise P(measure lands in the
    empty region)?

    The archive's low-measure cells are pre-filled, the reward is exactly the
    indicator of reaching an empty cell, and the probability is Monte-Carlo
    estimated before and after n1 PPO iterations.
    """
    results = []
    for seed in seeds:
        archive = GridArchive(ArchiveConfig(lo=(0.0,), hi=(1.0,),
                                            cells_per_dim=(cells,)))
        filler = np.zeros(1)
        for cell in range(int(0.8 * cells) + 1):    # occupy measures <= 0.8
            archive.insert(filler, 1.0, np.array([(cell + 0.5) / cells]))
        snapshot = archive.snapshot()
        model = BonusOnlyModel(BonusParams(p=0.0, q=1.0))
        env = make_env("ChainHopper", horizon=horizon, batch=env_batch)
        s_engine, s_policy, s_run = np.random.SeedSequence(seed).spawn(3)
        engine = VppoEngine(env, PpoConfig(), policy_hidden=hidden,
                            critic_hidden=hidden,
                            rng=np.random.default_rng(s_engine))
        theta = engine.init_policy(np.random.default_rng(s_policy))
        rng = np.random.default_rng(s_run)

        def hit_rate(params):
            batch = engine.collect(params, eval_episodes, model, snapshot, rng)
            return float(snapshot.unoccupied(batch.measures).mean())

        p_old = hit_rate(theta)
        trained, _ = engine._stream_run(theta, 0, n1, train_episodes, model,
                                        snapshot, rng)
        p_new = hit_rate(trained)
        results.append(LemmaResult(seed=seed, p_old=p_old, p_new=p_new))
    return results
