"""Adversarial reward models with a measure-space exploration bonus.

A discriminator is trained to tell expert tuples from policy tuples; the
policy-facing reward is -log(1 - D). Models can condition on the per-step
measure flags (so one expert demonstration informs behavior across the whole
measure space) and can drop actions for observation-only imitation. On top of
the per-step term, every step of an episode receives p + q * [episode measure
landed in an archive cell that was empty at iteration start].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .archive import ArchiveSnapshot
from .nets import AdamState, MlpSpec, adam_step, backward, forward, init_params, split_params

D_CLAMP = 1e-6


@dataclass(frozen=True)
class BonusParams:
    p: float = 0.5
    q: float = 0.5

    def __post_init__(self) -> None:
        if self.p < 0.0 or self.q < 0.0:
            raise ValueError("bonus terms must be non-negative")


def measure_bonus(measures: np.ndarray, snapshot: ArchiveSnapshot, bonus: BonusParams) -> np.ndarray:
    """p + q per episode whose measure falls in a cell unoccupied in the snapshot."""
    m = np.atleast_2d(np.asarray(measures, dtype=np.float64))
    return bonus.p + bonus.q * snapshot.unoccupied(m).astype(np.float64)


def _bce_and_dlogit(d: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy and its gradient wrt the pre-sigmoid logits."""
    dc = np.clip(d, D_CLAMP, 1.0 - D_CLAMP)
    bce = -float(np.mean(labels * np.log(dc) + (1.0 - labels) * np.log(1.0 - dc)))
    return bce, (d - labels) / d.size


def _minibatch_slices(n: int, size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, size):
        yield order[start:start + size]


class GailModel:
    """Binary discriminator over (obs [, action] [, measure flags]) tuples."""

    def __init__(self, obs_dim: int, act_dim: int, k: int, *,
                 measure_conditioned: bool = True, use_actions: bool = True,
                 hidden: tuple[int, ...] = (32, 32), bonus: BonusParams = BonusParams(),
                 lr: float = 3e-4, minibatch: int = 256,
                 rng: np.random.Generator | None = None):
        self.obs_dim, self.act_dim, self.k = obs_dim, act_dim, k
        self.measure_conditioned = measure_conditioned
        self.use_actions = use_actions
        self.bonus = bonus
        self.lr, self.minibatch = lr, minibatch
        in_dim = obs_dim + (act_dim if use_actions else 0) + (k if measure_conditioned else 0)
        self.spec = MlpSpec((in_dim, *hidden, 1), head="sigmoid")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params = init_params(self.spec, rng, out_gain=0.01)
        self._adam = AdamState.zeros(self.spec.param_count)

    def features(self, obs: np.ndarray, actions: np.ndarray | None, deltas: np.ndarray) -> np.ndarray:
        obs = np.atleast_2d(obs)
        deltas = np.atleast_2d(deltas)
        if obs.shape[1] != self.obs_dim:
            raise ValueError(f"obs width {obs.shape[1]} != {self.obs_dim}")
        if deltas.shape[1] != self.k:
            raise ValueError(f"deltas width {deltas.shape[1]} != {self.k}")
        cols = [obs]
        if self.use_actions:
            if actions is None:
                raise ValueError("model conditions on actions but none were given")
            actions = np.atleast_2d(actions)
            if actions.shape[1] != self.act_dim:
                raise ValueError(f"action width {actions.shape[1]} != {self.act_dim}")
            cols.append(np.clip(actions, -1.0, 1.0))   # executed actions, not raw samples
        if self.measure_conditioned:
            cols.append(deltas)
        return np.concatenate(cols, axis=1)

    def discriminate(self, obs, actions, deltas) -> np.ndarray:
        d, _ = forward(self.spec, self.params, self.features(obs, actions, deltas))
        return d[:, 0]

    def step_rewards(self, obs, actions, deltas) -> np.ndarray:
        d = np.clip(self.discriminate(obs, actions, deltas), D_CLAMP, 1.0 - D_CLAMP)
        return -np.log(1.0 - d)

    def episode_rewards(self, obs, actions, deltas, measures, snapshot: ArchiveSnapshot) -> np.ndarray:
        """(B, T) rewards: per-step discriminator term plus the episode's bonus on every step."""
        b, t = obs.shape[0], obs.shape[1]
        flat_act = None if actions is None else actions.reshape(b * t, -1)
        step = self.step_rewards(obs.reshape(b * t, -1), flat_act, deltas.reshape(b * t, -1))
        return step.reshape(b, t) + measure_bonus(measures, snapshot, self.bonus)[:, None]

    def episode_bonus(self, measures, snapshot: ArchiveSnapshot) -> np.ndarray:
        """The per-step bonus each episode received, (B,); lets callers separate
        the exploration term from the imitation term of episode_rewards."""
        return measure_bonus(measures, snapshot, self.bonus)

    def update(self, demos, obs, actions, deltas, rng: np.random.Generator) -> dict:
        """One epoch of paired expert/policy minibatches; returns training stats."""
        x_pol = self.features(obs, actions, deltas)
        x_exp = self.features(demos.obs, demos.actions if self.use_actions else None, demos.deltas)
        bces, d_exp_mean, d_pol_mean, steps = [], [], [], 0
        for idx in _minibatch_slices(x_pol.shape[0], self.minibatch, rng):
            exp_idx = rng.integers(0, x_exp.shape[0], size=idx.size)
            x = np.concatenate([x_exp[exp_idx], x_pol[idx]], axis=0)
            y = np.concatenate([np.ones(idx.size), np.zeros(idx.size)])
            d, cache = forward(self.spec, self.params, x)
            bce, dlogit = _bce_and_dlogit(d[:, 0], y)
            # undo the sigmoid in backward(): feed d(loss)/d(sigmoid out)
            dout = (dlogit / np.maximum(d[:, 0] * (1.0 - d[:, 0]), 1e-12))[:, None]
            grad, _ = backward(self.spec, cache, dout)
            adam_step(self.params, grad, self._adam, self.lr)
            bces.append(bce)
            d_exp_mean.append(float(d[:idx.size, 0].mean()))
            d_pol_mean.append(float(d[idx.size:, 0].mean()))
            steps += 1
        return {"bce": float(np.mean(bces)), "d_expert": float(np.mean(d_exp_mean)),
                "d_policy": float(np.mean(d_pol_mean)), "minibatches": steps}


class VailModel:
    """Variational discriminator: encoder to a stochastic latent, linear head on it.

    The dual variable beta keeps the batch KL between the encoder and the unit
    Gaussian prior near the information constraint ic.
    """

    def __init__(self, obs_dim: int, act_dim: int, k: int, *,
                 measure_conditioned: bool = True, use_actions: bool = True,
                 hidden: tuple[int, ...] = (32, 32), latent: int = 50,
                 bonus: BonusParams = BonusParams(), ic: float = 0.5,
                 dual_step: float = 1e-4, lr: float = 3e-4, minibatch: int = 256,
                 rng: np.random.Generator | None = None):
        self.obs_dim, self.act_dim, self.k = obs_dim, act_dim, k
        self.measure_conditioned = measure_conditioned
        self.use_actions = use_actions
        self.bonus = bonus
        self.latent, self.ic, self.dual_step = latent, ic, dual_step
        self.lr, self.minibatch = lr, minibatch
        self.beta = 0.0
        in_dim = obs_dim + (act_dim if use_actions else 0) + (k if measure_conditioned else 0)
        self.enc_spec = MlpSpec((in_dim, *hidden, 2 * latent), head="identity")
        self.disc_spec = MlpSpec((latent, 1), head="sigmoid")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.enc_params = init_params(self.enc_spec, rng, out_gain=0.01)
        self.disc_params = init_params(self.disc_spec, rng, out_gain=0.01)
        self._enc_adam = AdamState.zeros(self.enc_spec.param_count)
        self._disc_adam = AdamState.zeros(self.disc_spec.param_count)

    features = GailModel.features

    def vib_encode(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        out, _ = forward(self.enc_spec, self.enc_params, x)
        return out[:, :self.latent], out[:, self.latent:]

    @staticmethod
    def kl_to_prior(mu: np.ndarray, log_sigma: np.ndarray) -> np.ndarray:
        """KL(N(mu, diag sigma^2) || N(0, I)) per row."""
        var = np.exp(2.0 * log_sigma)
        return 0.5 * (mu * mu + var - 1.0 - 2.0 * log_sigma).sum(axis=1)

    def discriminate(self, obs, actions, deltas) -> np.ndarray:
        mu, _ = self.vib_encode(self.features(obs, actions, deltas))
        d, _ = forward(self.disc_spec, self.disc_params, mu)   # reward path uses the mean latent
        return d[:, 0]

    step_rewards = GailModel.step_rewards
    episode_rewards = GailModel.episode_rewards
    episode_bonus = GailModel.episode_bonus

    def update(self, demos, obs, actions, deltas, rng: np.random.Generator) -> dict:
        x_pol = self.features(obs, actions, deltas)
        x_exp = self.features(demos.obs, demos.actions if self.use_actions else None, demos.deltas)
        bces, kls, steps = [], [], 0
        for idx in _minibatch_slices(x_pol.shape[0], self.minibatch, rng):
            exp_idx = rng.integers(0, x_exp.shape[0], size=idx.size)
            x = np.concatenate([x_exp[exp_idx], x_pol[idx]], axis=0)
            y = np.concatenate([np.ones(idx.size), np.zeros(idx.size)])
            n = x.shape[0]

            enc_out, enc_cache = forward(self.enc_spec, self.enc_params, x)
            mu, log_sigma = enc_out[:, :self.latent], enc_out[:, self.latent:]
            sigma = np.exp(log_sigma)
            eps = rng.standard_normal(mu.shape)
            z = mu + sigma * eps
            d, disc_cache = forward(self.disc_spec, self.disc_params, z)
            bce, dlogit = _bce_and_dlogit(d[:, 0], y)
            kl = self.kl_to_prior(mu, log_sigma)
            kl_mean = float(kl.mean())

            dout = (dlogit / np.maximum(d[:, 0] * (1.0 - d[:, 0]), 1e-12))[:, None]
            disc_grad, dz = backward(self.disc_spec, disc_cache, dout)
            d_enc = np.empty_like(enc_out)
            d_enc[:, :self.latent] = dz + (self.beta / n) * mu
            d_enc[:, self.latent:] = dz * eps * sigma + (self.beta / n) * (sigma * sigma - 1.0)
            enc_grad, _ = backward(self.enc_spec, enc_cache, d_enc)

            adam_step(self.disc_params, disc_grad, self._disc_adam, self.lr)
            adam_step(self.enc_params, enc_grad, self._enc_adam, self.lr)
            self.beta = max(0.0, self.beta + self.dual_step * (kl_mean - self.ic))
            bces.append(bce)
            kls.append(kl_mean)
            steps += 1
        return {"bce": float(np.mean(bces)), "kl": float(np.mean(kls)),
                "beta": self.beta, "minibatches": steps}


class BonusOnlyModel:
    """Degenerate reward model: zero per-step term, bonus only.

    With p=0, q=1 the episode reward is exactly the indicator of landing in an
    unoccupied cell, the signal used to check that policy-gradient steps raise
    the probability of reaching a measure region.
    """

    def __init__(self, bonus: BonusParams = BonusParams()):
        self.bonus = bonus

    def step_rewards(self, obs, actions, deltas) -> np.ndarray:
        return np.zeros(np.atleast_2d(obs).shape[0])

    def episode_rewards(self, obs, actions, deltas, measures, snapshot: ArchiveSnapshot) -> np.ndarray:
        b, t = obs.shape[0], obs.shape[1]
        return np.zeros((b, t)) + measure_bonus(measures, snapshot, self.bonus)[:, None]

    def episode_bonus(self, measures, snapshot: ArchiveSnapshot) -> np.ndarray:
        return measure_bonus(measures, snapshot, self.bonus)

    def update(self, demos, obs, actions, deltas, rng) -> dict:
        return {"bce": float("nan"), "minibatches": 0}
