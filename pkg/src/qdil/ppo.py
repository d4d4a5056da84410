"""Vectorized PPO used as the gradient engine of the quality-diversity loop.

One engine owns a fixed-horizon vectorized env, a Gaussian-policy spec, and a
separate critic per reward stream: the model-reward stream f, one stream per
binary measure proxy, and one for coefficient-weighted walks. Policy gradients
for a stream are approximated by copying the current policy, running a few
collect+update iterations on that stream alone, and normalizing the parameter
displacement.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .envs import episode_measure
from .nets import (
    AdamState,
    MlpSpec,
    adam_step,
    forward,
    backward,
    gaussian_entropy,
    gaussian_logp,
    gaussian_logp_grads,
    init_params,
    split_params,
    std_exp,
)

NORM_EPS = 1e-8
LOG_STD_BOUNDS = (-8.0, 2.0)


@dataclass(frozen=True)
class PpoConfig:
    clip: float = 0.2
    epochs: int = 4
    minibatches: int = 8
    gamma: float = 0.99
    lam: float = 0.95
    lr: float = 3e-4
    entropy_coef: float = 0.0
    value_coef: float = 0.5
    normalize_obs: bool = True
    normalize_rewards: bool = True

    def __post_init__(self) -> None:
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must be in (0, 1]")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must be in [0, 1]")
        if self.epochs < 1 or self.minibatches < 1:
            raise ValueError("epochs and minibatches must be >= 1")
        if self.clip <= 0.0:
            raise ValueError("clip must be positive")


class StreamNormalizer:
    """Running mean/variance over a stream, merged batch-at-a-time (Chan/Welford).

    Before the first update normalize() is the identity; afterwards it maps a
    constant stream to zeros. Variance is the population variance.
    """

    def __init__(self, shape: tuple[int, ...] = ()):
        self.shape = tuple(shape)
        self.count = 0
        self.mean = np.zeros(self.shape)
        self.m2 = np.zeros(self.shape)

    def update(self, batch: np.ndarray) -> None:
        b = np.asarray(batch, dtype=np.float64).reshape((-1,) + self.shape)
        n = b.shape[0]
        if n == 0:
            return
        mean_b = b.mean(axis=0)
        m2_b = ((b - mean_b) ** 2).sum(axis=0)
        tot = self.count + n
        delta = mean_b - self.mean
        self.mean = self.mean + delta * (n / tot)
        self.m2 = self.m2 + m2_b + delta ** 2 * (self.count * n / tot)
        self.count = tot

    @property
    def var(self) -> np.ndarray:
        return self.m2 / self.count if self.count else np.ones(self.shape)

    def normalize(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self.count == 0:
            return x.copy()
        return (x - self.mean) / np.sqrt(self.var + NORM_EPS)

    def state(self) -> tuple:
        return self.count, self.mean.copy(), self.m2.copy()


def _frozen_normalize(state: tuple, x: np.ndarray) -> np.ndarray:
    count, mean, m2 = state
    if count == 0:
        return np.asarray(x, dtype=np.float64).copy()
    return (x - mean) / np.sqrt(m2 / count + NORM_EPS)


def gae(rewards: np.ndarray, values: np.ndarray, dones: np.ndarray,
        gamma: float, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimates and value targets over (episodes, steps)."""
    if not rewards.shape == values.shape == dones.shape:
        raise ValueError("rewards, values and dones must share a shape")
    b, t = rewards.shape
    adv = np.zeros((b, t))
    last = np.zeros(b)
    v_next = np.zeros(b)
    for step in range(t - 1, -1, -1):
        nonterm = 1.0 - dones[:, step]
        delta = rewards[:, step] + gamma * v_next * nonterm - values[:, step]
        last = delta + gamma * lam * nonterm * last
        adv[:, step] = last
        v_next = values[:, step]
    return adv, adv + values


@dataclass
class TrajectoryBatch:
    """Whole completed episodes: (episodes, steps, ...) arrays plus per-episode stats."""

    obs_raw: np.ndarray       # what the env emitted
    obs: np.ndarray           # what the policy consumed (normalized)
    actions: np.ndarray       # raw Gaussian samples; envs clip on execution
    logps: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    r_f: np.ndarray           # reward-model term + episode bonus, per step
    bonus_ep: np.ndarray      # the per-step bonus inside r_f, per episode
    deltas: np.ndarray        # raw per-step measure proxies, (episodes, steps, k)
    measures: np.ndarray      # (episodes, k)
    true_returns: np.ndarray  # env-reward returns, diagnostics only

    @property
    def n_episodes(self) -> int:
        return self.obs.shape[0]

    @property
    def horizon(self) -> int:
        return self.obs.shape[1]

    def stream(self, idx: int) -> np.ndarray:
        """Per-step reward stream: 0 is the model stream, 1..k the measure proxies."""
        return self.r_f if idx == 0 else self.deltas[:, :, idx - 1]

    def imitation_return_mean(self) -> float:
        """Mean episode return of the reward-model term with the bonus removed.

        Stored fitness must not include the empty-cell bonus: it depends on
        occupancy at evaluation time, so a cell's first claimant would set a
        threshold inflated by the bonus that later, genuinely better policies
        (scored with the cell now occupied) could never displace.
        """
        return float((self.r_f.sum(axis=1) - self.bonus_ep * self.horizon).mean())


@dataclass
class JacobianResult:
    grads: np.ndarray         # (k+1, n_params), unit L2 rows (zero rows flagged)
    f_hat: float
    m_hat: np.ndarray
    nonzero: np.ndarray       # (k+1,) bool
    eval_batch: TrajectoryBatch


class VppoEngine:
    def __init__(self, env, cfg: PpoConfig = PpoConfig(), *,
                 policy_hidden: tuple[int, ...] = (32, 32),
                 critic_hidden: tuple[int, ...] = (32, 32),
                 rng: np.random.Generator | None = None):
        self.env = env
        self.cfg = cfg
        s = env.spec
        self.k = s.k
        self.policy_spec = MlpSpec((s.obs_dim, *policy_hidden, s.act_dim),
                                   head="identity", n_extras=s.act_dim)
        self.critic_spec = MlpSpec((s.obs_dim, *critic_hidden, 1), head="identity")
        self.obs_norm = StreamNormalizer((s.obs_dim,))
        self.reward_norms = [StreamNormalizer(()) for _ in range(1 + s.k)]
        rng = rng if rng is not None else np.random.default_rng(0)
        self.critic_keys = ["f"] + [f"delta{j}" for j in range(s.k)] + ["walk"]
        # zero-gain value heads make V identically 0 at init, so an all-zero
        # reward stream provably leaves the policy untouched
        self.critics = {key: init_params(self.critic_spec, rng, out_gain=0.0)
                        for key in self.critic_keys}
        self.critic_adams = {key: AdamState.zeros(self.critic_spec.param_count)
                             for key in self.critic_keys}

    def init_policy(self, rng: np.random.Generator) -> np.ndarray:
        return init_params(self.policy_spec, rng, out_gain=0.01)   # log_std extras start at 0

    # --- rollouts ---

    def collect(self, params: np.ndarray, n_episodes: int, model, snapshot,
                rng: np.random.Generator, critic_key: str = "f") -> TrajectoryBatch:
        """Roll whole fixed-horizon episodes; fill model rewards at completion.

        Observation normalization uses statistics frozen at call entry; the
        batch's raw observations are folded in afterwards.
        """
        s = self.env.spec
        if n_episodes % s.batch != 0:
            raise ValueError(f"n_episodes must be a multiple of env batch {s.batch}")
        t_len = s.horizon
        obs_raw = np.zeros((n_episodes, t_len, s.obs_dim))
        obs_n = np.zeros((n_episodes, t_len, s.obs_dim))
        actions = np.zeros((n_episodes, t_len, s.act_dim))
        logps = np.zeros((n_episodes, t_len))
        deltas = np.zeros((n_episodes, t_len, s.k))
        true_rew = np.zeros((n_episodes, t_len))
        frozen = self.obs_norm.state()
        _, _, log_std = split_params(self.policy_spec, params)
        for start in range(0, n_episodes, s.batch):
            rows = slice(start, start + s.batch)
            obs = self.env.reset()
            for t in range(t_len):
                o_n = _frozen_normalize(frozen, obs) if self.cfg.normalize_obs else obs.copy()
                mu, _ = forward(self.policy_spec, params, o_n)
                a = mu + std_exp(log_std) * rng.standard_normal(mu.shape)
                obs_raw[rows, t] = obs
                obs_n[rows, t] = o_n
                actions[rows, t] = a
                logps[rows, t] = gaussian_logp(mu, log_std, a)
                res = self.env.step(a)
                deltas[rows, t] = res.deltas
                true_rew[rows, t] = res.true_reward
                obs = res.obs
        measures = (episode_measure(deltas) if n_episodes
                    else np.zeros((0, s.k)))
        r_f = model.episode_rewards(obs_raw, actions, deltas, measures, snapshot)
        bonus_ep = model.episode_bonus(measures, snapshot)
        if not np.all(np.isfinite(r_f)):
            bad = int(np.count_nonzero(~np.isfinite(r_f)))
            raise FloatingPointError(f"reward model produced {bad} non-finite step rewards")
        flat_n = obs_n.reshape(-1, s.obs_dim)
        v, _ = forward(self.critic_spec, self.critics[critic_key], flat_n)
        values = v[:, 0].reshape(n_episodes, t_len)
        dones = np.zeros((n_episodes, t_len))
        if n_episodes:
            dones[:, -1] = 1.0
        if self.cfg.normalize_obs:
            self.obs_norm.update(obs_raw.reshape(-1, s.obs_dim))
        if self.cfg.normalize_rewards:
            self.reward_norms[0].update(r_f.ravel())
            for j in range(s.k):
                self.reward_norms[1 + j].update(deltas[:, :, j].ravel())
        return TrajectoryBatch(obs_raw=obs_raw, obs=obs_n, actions=actions,
                               logps=logps, values=values, dones=dones, r_f=r_f,
                               bonus_ep=bonus_ep, deltas=deltas, measures=measures,
                               true_returns=true_rew.sum(axis=1))

    def normalize_stream(self, idx: int, values: np.ndarray) -> np.ndarray:
        if not self.cfg.normalize_rewards:
            return np.asarray(values, dtype=np.float64).copy()
        return self.reward_norms[idx].normalize(values)

    # --- updates ---

    def ppo_update(self, params: np.ndarray, pi_adam: AdamState, batch: TrajectoryBatch,
                   rewards: np.ndarray, critic_key: str, rng: np.random.Generator) -> dict:
        """Clipped-surrogate epochs over shuffled minibatches; Adam per minibatch."""
        cfg = self.cfg
        adv2d, ret2d = gae(rewards, batch.values, batch.dones, cfg.gamma, cfg.lam)
        n = batch.n_episodes * batch.horizon
        obs = batch.obs.reshape(n, -1)
        acts = batch.actions.reshape(n, -1)
        logp_old = batch.logps.reshape(n)
        adv = adv2d.reshape(n)
        adv = (adv - adv.mean()) / (adv.std() + NORM_EPS)
        ret = ret2d.reshape(n)
        critic = self.critics[critic_key]
        c_adam = self.critic_adams[critic_key]
        pi_losses, v_losses, clip_fracs = [], [], []
        for _ in range(cfg.epochs):
            for idx in np.array_split(rng.permutation(n), cfg.minibatches):
                if idx.size == 0:
                    continue
                nmb = idx.size
                mu, cache = forward(self.policy_spec, params, obs[idx])
                _, _, log_std = split_params(self.policy_spec, params)
                logp = gaussian_logp(mu, log_std, acts[idx])
                ratio = np.exp(logp - logp_old[idx])
                a_mb = adv[idx]
                surr1 = ratio * a_mb
                surr2 = np.clip(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip) * a_mb
                pi_loss = -float(np.mean(np.minimum(surr1, surr2)))
                # gradient flows only through samples where the raw ratio is active
                active = (surr1 <= surr2).astype(np.float64)
                dlogp = -(a_mb * ratio * active) / nmb
                d_mean, d_log_std = gaussian_logp_grads(mu, log_std, acts[idx])
                grad, _ = backward(self.policy_spec, cache, dlogp[:, None] * d_mean)
                _, _, g_extra = split_params(self.policy_spec, grad)
                g_extra += (dlogp[:, None] * d_log_std).sum(axis=0)
                g_extra -= cfg.entropy_coef   # dH/dlog_std = 1 per dimension

                v, v_cache = forward(self.critic_spec, critic, obs[idx])
                v_err = v[:, 0] - ret[idx]
                v_loss = cfg.value_coef * float(np.mean(v_err ** 2))
                v_grad, _ = backward(self.critic_spec, v_cache,
                                     (cfg.value_coef * 2.0 * v_err / nmb)[:, None])
                if not (np.isfinite(pi_loss) and np.isfinite(v_loss)):
                    raise FloatingPointError(
                        f"non-finite PPO loss: pi={pi_loss} value={v_loss} "
                        f"|params|={np.linalg.norm(params):.3e} "
                        f"adv=[{a_mb.min():.3e},{a_mb.max():.3e}] "
                        f"ratio=[{ratio.min():.3e},{ratio.max():.3e}]")
                adam_step(params, grad, pi_adam, cfg.lr)
                adam_step(critic, v_grad, c_adam, cfg.lr)
                np.clip(log_std, *LOG_STD_BOUNDS, out=log_std)
                pi_losses.append(pi_loss)
                v_losses.append(v_loss)
                clip_fracs.append(float(np.mean(1.0 - active)))
        return {"pi_loss": float(np.mean(pi_losses)), "v_loss": float(np.mean(v_losses)),
                "clip_frac": float(np.mean(clip_fracs)),
                "entropy": gaussian_entropy(split_params(self.policy_spec, params)[2])}

    # --- stream gradients and walks ---

    def _critic_for_stream(self, idx: int) -> str:
        return "f" if idx == 0 else f"delta{idx - 1}"

    def _stream_run(self, theta: np.ndarray, stream_idx: int, n_iters: int,
                    n_episodes: int, model, snapshot, rng: np.random.Generator):
        params = theta.copy()
        pi_adam = AdamState.zeros(self.policy_spec.param_count)
        key = self._critic_for_stream(stream_idx)
        first = None
        for _ in range(n_iters):
            batch = self.collect(params, n_episodes, model, snapshot, rng, key)
            if first is None:
                first = batch
            rewards = self.normalize_stream(stream_idx, batch.stream(stream_idx))
            self.ppo_update(params, pi_adam, batch, rewards, key, rng)
        return params, first

    def compute_jacobian(self, theta_mu: np.ndarray, model, snapshot, *,
                         n_episodes: int, n_iters: int,
                         rng: np.random.Generator) -> JacobianResult:
        """Unit-norm parameter-displacement gradients for the model stream and each measure.

        The fitness and measure estimates for theta_mu come from the first batch
        of the model-stream run (a plain evaluation batch when n_iters is 0).
        """
        n_streams = 1 + self.k
        grads = np.zeros((n_streams, self.policy_spec.param_count))
        nonzero = np.zeros(n_streams, dtype=bool)
        params_f, first = self._stream_run(theta_mu, 0, n_iters, n_episodes,
                                           model, snapshot, rng)
        if first is None:
            first = self.collect(theta_mu, n_episodes, model, snapshot, rng, "f")
        grads[0] = params_f - theta_mu
        for j in range(self.k):
            params_j, _ = self._stream_run(theta_mu, 1 + j, n_iters, n_episodes,
                                           model, snapshot, rng)
            grads[1 + j] = params_j - theta_mu
        for i in range(n_streams):
            norm = float(np.linalg.norm(grads[i]))
            if norm > 0.0:
                grads[i] /= norm
                nonzero[i] = True
        return JacobianResult(grads=grads, f_hat=first.imitation_return_mean(),
                              m_hat=first.measures.mean(axis=0),
                              nonzero=nonzero, eval_batch=first)

    def walk(self, theta: np.ndarray, coeffs: np.ndarray, model, snapshot, *,
             n_episodes: int, n_iters: int, rng: np.random.Generator):
        """Train theta on the coefficient-weighted sum of normalized reward streams.

        Returns (new params, last collected batch or None, last update stats or None).
        """
        coeffs = np.asarray(coeffs, dtype=np.float64)
        if coeffs.shape != (1 + self.k,):
            raise ValueError(f"need {1 + self.k} coefficients, got {coeffs.shape}")
        params = theta.copy()
        pi_adam = AdamState.zeros(self.policy_spec.param_count)
        batch, stats = None, None
        for _ in range(n_iters):
            batch = self.collect(params, n_episodes, model, snapshot, rng, "walk")
            combined = abs(coeffs[0]) * self.normalize_stream(0, batch.r_f)
            for j in range(self.k):
                combined = combined + coeffs[1 + j] * self.normalize_stream(1 + j, batch.deltas[:, :, j])
            stats = self.ppo_update(params, pi_adam, batch, combined, "walk", rng)
        return params, batch, stats
