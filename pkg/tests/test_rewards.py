"""Reward-model tests: discriminator rewards, measure bonus, VIB terms, update math."""

from types import SimpleNamespace

import numpy as np
import pytest

from qdil.archive import ArchiveConfig, GridArchive
from qdil.nets import forward, split_params
from qdil.rewards import (
    BonusOnlyModel,
    BonusParams,
    GailModel,
    VailModel,
    measure_bonus,
)

LN2 = 0.6931471805599453


def snapshot_25x25(occupied=((0.52, 0.10),)):
    arch = GridArchive(ArchiveConfig(lo=(0.0, 0.0), hi=(1.0, 1.0), cells_per_dim=(25, 25)))
    for m in occupied:
        arch.insert(np.zeros(3), 1.0, np.asarray(m))
    return arch.snapshot()


def toy_demos(rng, n=200, obs_dim=3, act_dim=2, k=1, loc=2.0):
    obs = rng.normal(loc, 0.1, size=(n, obs_dim))
    return SimpleNamespace(obs=obs,
                           actions=np.clip(rng.normal(0.5, 0.1, size=(n, act_dim)), -1, 1),
                           deltas=(rng.random((n, k)) < 0.7).astype(float))


def test_zero_params_give_exact_ln2_reward():
    m = GailModel(3, 2, 1, rng=np.random.default_rng(0))
    m.params[:] = 0.0
    r = m.step_rewards(np.zeros((4, 3)), np.zeros((4, 2)), np.zeros((4, 1)))
    np.testing.assert_array_equal(r, np.full(4, LN2))


def test_three_step_episode_reward_composition():
    # D = 0.5 per step and an unoccupied cell: every step gets ln 2 + p + q = 1.6931...
    m = GailModel(3, 2, 2, rng=np.random.default_rng(0))
    m.params[:] = 0.0
    obs = np.zeros((1, 3, 3))
    act = np.zeros((1, 3, 2))
    deltas = np.zeros((1, 3, 2))
    r = m.episode_rewards(obs, act, deltas, np.array([[0.9, 0.9]]), snapshot_25x25())
    assert r.shape == (1, 3)
    np.testing.assert_allclose(r, LN2 + 1.0, rtol=0, atol=1e-15)


def test_reward_clamp_keeps_reward_finite():
    m = GailModel(2, 1, 1, hidden=(4,), rng=np.random.default_rng(0))
    _, biases, _ = split_params(m.spec, m.params)
    biases[-1][:] = 1000.0          # sigmoid saturates to 1 exactly in float
    r_hi = m.step_rewards(np.zeros((1, 2)), np.zeros((1, 1)), np.zeros((1, 1)))
    np.testing.assert_array_equal(r_hi, -np.log(1.0 - (1.0 - 1e-6)))
    assert abs(r_hi[0] - 13.815510557964274) < 1e-9
    biases[-1][:] = -1000.0
    r_lo = m.step_rewards(np.zeros((1, 2)), np.zeros((1, 1)), np.zeros((1, 1)))
    assert 0.0 < r_lo[0] < 2e-6 and np.isfinite(r_lo[0])


def test_measure_bonus_values():
    snap = snapshot_25x25()
    ms = np.array([[0.52, 0.10], [0.90, 0.90]])
    np.testing.assert_array_equal(measure_bonus(ms, snap, BonusParams(0.5, 0.5)), [0.5, 1.0])
    np.testing.assert_array_equal(measure_bonus(ms, snap, BonusParams(0.5, 0.0)), [0.5, 0.5])
    np.testing.assert_array_equal(measure_bonus(ms, snap, BonusParams(0.0, 1.0)), [0.0, 1.0])


def test_bonus_params_reject_negative():
    with pytest.raises(ValueError):
        BonusParams(-0.1, 0.5)


def test_untrained_bce_near_chance():
    rng = np.random.default_rng(3)
    m = GailModel(3, 2, 1, hidden=(16,), minibatch=64, rng=rng)
    stats = m.update(toy_demos(rng), rng.normal(size=(64, 3)),
                     rng.normal(size=(64, 2)), np.zeros((64, 1)), rng)
    assert abs(stats["bce"] - LN2) < 0.02


def test_update_separates_expert_from_policy():
    rng = np.random.default_rng(4)
    demos = toy_demos(rng, loc=2.0)
    m = GailModel(3, 2, 1, hidden=(16, 16), minibatch=64, rng=rng)
    pol_obs = rng.normal(-2.0, 0.1, size=(256, 3))
    pol_act = np.clip(rng.normal(-0.5, 0.1, size=(256, 2)), -1, 1)
    pol_d = (rng.random((256, 1)) < 0.3).astype(float)
    for _ in range(40):
        stats = m.update(demos, pol_obs, pol_act, pol_d, rng)
    assert stats["bce"] < LN2 - 0.2
    assert stats["d_expert"] > stats["d_policy"] + 0.3


def test_minibatch_count_is_ceil():
    rng = np.random.default_rng(5)
    m = GailModel(3, 2, 1, hidden=(8,), minibatch=32, rng=rng)
    stats = m.update(toy_demos(rng, n=50), rng.normal(size=(100, 3)),
                     rng.normal(size=(100, 2)), np.zeros((100, 1)), rng)
    assert stats["minibatches"] == 4


def test_update_is_deterministic_given_rng_state():
    demos = toy_demos(np.random.default_rng(6))
    obs = np.random.default_rng(7).normal(size=(96, 3))
    act = np.zeros((96, 2))
    dl = np.zeros((96, 1))
    out = []
    for _ in range(2):
        m = GailModel(3, 2, 1, hidden=(8,), minibatch=32, rng=np.random.default_rng(8))
        m.update(demos, obs, act, dl, np.random.default_rng(9))
        out.append(m.params.copy())
    np.testing.assert_array_equal(out[0], out[1])


def test_actions_are_clipped_before_discriminator():
    m = GailModel(2, 2, 1, rng=np.random.default_rng(1))
    obs, dl = np.ones((3, 2)), np.ones((3, 1))
    d_big = m.discriminate(obs, np.full((3, 2), 5.0), dl)
    d_one = m.discriminate(obs, np.ones((3, 2)), dl)
    np.testing.assert_array_equal(d_big, d_one)


def test_observation_only_model_ignores_actions():
    m = GailModel(3, 2, 1, use_actions=False, rng=np.random.default_rng(1))
    assert m.spec.layer_sizes[0] == 4
    r = m.step_rewards(np.zeros((2, 3)), None, np.zeros((2, 1)))
    assert r.shape == (2,)
    m_act = GailModel(3, 2, 1, rng=np.random.default_rng(1))
    with pytest.raises(ValueError):
        m_act.step_rewards(np.zeros((2, 3)), None, np.zeros((2, 1)))


def test_unconditioned_model_drops_measure_flags():
    m = GailModel(3, 2, 2, measure_conditioned=False, rng=np.random.default_rng(1))
    assert m.spec.layer_sizes[0] == 5
    x = m.features(np.zeros((2, 3)), np.zeros((2, 2)), np.zeros((2, 2)))
    assert x.shape == (2, 5)


def test_feature_width_validation():
    m = GailModel(3, 2, 1, rng=np.random.default_rng(1))
    with pytest.raises(ValueError):
        m.features(np.zeros((2, 4)), np.zeros((2, 2)), np.zeros((2, 1)))
    with pytest.raises(ValueError):
        m.features(np.zeros((2, 3)), np.zeros((2, 1)), np.zeros((2, 1)))
    with pytest.raises(ValueError):
        m.features(np.zeros((2, 3)), np.zeros((2, 2)), np.zeros((2, 3)))


def test_gail_gradient_matches_finite_differences():
    rng = np.random.default_rng(11)
    m = GailModel(3, 2, 1, hidden=(8,), rng=rng)
    x = m.features(rng.normal(size=(6, 3)), rng.normal(size=(6, 2)), np.zeros((6, 1)))
    y = np.array([1.0, 1.0, 1.0, 0.0, 0.0, 0.0])

    def loss(p):
        d, _ = forward(m.spec, p, x)
        dc = np.clip(d[:, 0], 1e-6, 1 - 1e-6)
        return -float(np.mean(y * np.log(dc) + (1 - y) * np.log(1 - dc)))

    d, cache = forward(m.spec, m.params, x)
    dlogit = (d[:, 0] - y) / y.size
    dout = (dlogit / np.maximum(d[:, 0] * (1 - d[:, 0]), 1e-12))[:, None]
    from qdil.nets import backward
    grad, _ = backward(m.spec, cache, dout)
    h = 1e-6
    for i in range(m.params.size):
        pp = m.params.copy(); pp[i] += h
        pm = m.params.copy(); pm[i] -= h
        fd = (loss(pp) - loss(pm)) / (2 * h)
        assert abs(grad[i] - fd) / max(abs(grad[i]), abs(fd), 1e-3) < 1e-4


# --- VAIL ---


def test_kl_closed_form_examples():
    # 1-D: mu=1, sigma=1 -> 0.5; mu=0, sigma=e -> 0.5 (e^2 - 3)
    kl = VailModel.kl_to_prior(np.array([[1.0]]), np.array([[0.0]]))
    np.testing.assert_allclose(kl, [0.5], rtol=1e-15)
    kl = VailModel.kl_to_prior(np.array([[0.0]]), np.array([[1.0]]))
    np.testing.assert_allclose(kl, [0.5 * (np.e ** 2 - 3.0)], rtol=1e-12)
    assert abs(kl[0] - 2.194528049465325) < 1e-12


def test_zero_encoder_gives_zero_kl_and_ln2_reward():
    m = VailModel(3, 2, 1, hidden=(8,), latent=4, rng=np.random.default_rng(0))
    m.enc_params[:] = 0.0
    m.disc_params[:] = 0.0
    mu, ls = m.vib_encode(np.ones((5, 6)))
    np.testing.assert_array_equal(mu, 0.0)
    np.testing.assert_array_equal(ls, 0.0)
    np.testing.assert_array_equal(VailModel.kl_to_prior(mu, ls), np.zeros(5))
    r = m.step_rewards(np.zeros((2, 3)), np.zeros((2, 2)), np.zeros((2, 1)))
    np.testing.assert_array_equal(r, np.full(2, LN2))


def test_vail_reward_is_deterministic():
    m = VailModel(3, 2, 1, hidden=(8,), latent=4, rng=np.random.default_rng(2))
    obs = np.random.default_rng(3).normal(size=(10, 3))
    r1 = m.step_rewards(obs, np.zeros((10, 2)), np.zeros((10, 1)))
    r2 = m.step_rewards(obs, np.zeros((10, 2)), np.zeros((10, 1)))
    np.testing.assert_array_equal(r1, r2)


def test_beta_stays_zero_below_constraint_and_rises_above():
    rng = np.random.default_rng(4)
    m = VailModel(3, 2, 1, hidden=(8,), latent=4, dual_step=1e-2,
                  minibatch=32, rng=rng)
    m.enc_params[:] = 0.0           # KL = 0 < ic
    demos = toy_demos(rng)
    m.update(demos, rng.normal(size=(32, 3)), np.zeros((32, 2)), np.zeros((32, 1)), rng)
    assert m.beta == 0.0
    # force mu = 2 everywhere: KL per row = 2 * latent >> ic
    _, biases, _ = split_params(m.enc_spec, m.enc_params)
    biases[-1][:4] = 2.0
    m.update(demos, rng.normal(size=(32, 3)), np.zeros((32, 2)), np.zeros((32, 1)), rng)
    assert m.beta > 0.0


def test_beta_never_negative_over_training():
    rng = np.random.default_rng(5)
    m = VailModel(3, 2, 1, hidden=(8,), latent=4, dual_step=1e-2,
                  minibatch=64, rng=rng)
    demos = toy_demos(rng)
    for _ in range(30):
        stats = m.update(demos, rng.normal(-2.0, 0.1, size=(64, 3)),
                         np.zeros((64, 2)), np.zeros((64, 1)), rng)
        assert m.beta >= 0.0
    assert np.isfinite(stats["kl"])


def test_vail_update_learns_separable_data():
    rng = np.random.default_rng(6)
    demos = toy_demos(rng, loc=2.0)
    m = VailModel(3, 2, 1, hidden=(16,), latent=4, minibatch=64, rng=rng)
    pol_obs = rng.normal(-2.0, 0.1, size=(256, 3))
    first = m.update(demos, pol_obs, np.zeros((256, 2)), np.zeros((256, 1)), rng)
    for _ in range(60):
        stats = m.update(demos, pol_obs, np.zeros((256, 2)), np.zeros((256, 1)), rng)
    assert stats["bce"] < first["bce"] - 0.1
    assert stats["bce"] < 0.6


def test_vail_gradient_matches_finite_differences():
    rng = np.random.default_rng(12)
    m = VailModel(4, 1, 1, hidden=(8,), latent=3, rng=rng)
    m.beta = 0.7
    x = rng.normal(size=(6, 6))
    y = np.array([1.0, 1.0, 1.0, 0.0, 0.0, 0.0])
    eps = rng.standard_normal((6, 3))

    def loss(enc_p, disc_p):
        out, _ = forward(m.enc_spec, enc_p, x)
        mu, ls = out[:, :3], out[:, 3:]
        z = mu + np.exp(ls) * eps
        d, _ = forward(m.disc_spec, disc_p, z)
        dc = np.clip(d[:, 0], 1e-6, 1 - 1e-6)
        bce = -float(np.mean(y * np.log(dc) + (1 - y) * np.log(1 - dc)))
        kl = 0.5 * (mu ** 2 + np.exp(2 * ls) - 1 - 2 * ls).sum(axis=1)
        return bce + m.beta * float(kl.mean())

    from qdil.nets import backward
    out, enc_cache = forward(m.enc_spec, m.enc_params, x)
    mu, ls = out[:, :3], out[:, 3:]
    sigma = np.exp(ls)
    z = mu + sigma * eps
    d, disc_cache = forward(m.disc_spec, m.disc_params, z)
    dlogit = (d[:, 0] - y) / y.size
    dout = (dlogit / np.maximum(d[:, 0] * (1 - d[:, 0]), 1e-12))[:, None]
    disc_grad, dz = backward(m.disc_spec, disc_cache, dout)
    d_enc = np.empty_like(out)
    n = x.shape[0]
    d_enc[:, :3] = dz + (m.beta / n) * mu
    d_enc[:, 3:] = dz * eps * sigma + (m.beta / n) * (sigma * sigma - 1.0)
    enc_grad, _ = backward(m.enc_spec, enc_cache, d_enc)

    h = 1e-6
    for i in range(m.enc_params.size):
        pp = m.enc_params.copy(); pp[i] += h
        pm = m.enc_params.copy(); pm[i] -= h
        fd = (loss(pp, m.disc_params) - loss(pm, m.disc_params)) / (2 * h)
        assert abs(enc_grad[i] - fd) / max(abs(enc_grad[i]), abs(fd), 1e-3) < 1e-4
    for i in range(m.disc_params.size):
        pp = m.disc_params.copy(); pp[i] += h
        pm = m.disc_params.copy(); pm[i] -= h
        fd = (loss(m.enc_params, pp) - loss(m.enc_params, pm)) / (2 * h)
        assert abs(disc_grad[i] - fd) / max(abs(disc_grad[i]), abs(fd), 1e-3) < 1e-4


def test_bonus_only_model():
    m = BonusOnlyModel(BonusParams(0.0, 1.0))
    np.testing.assert_array_equal(m.step_rewards(np.zeros((3, 2)), None, None), np.zeros(3))
    snap = snapshot_25x25()
    r = m.episode_rewards(np.zeros((2, 3, 2)), None, np.zeros((2, 3, 1)),
                          np.array([[0.52, 0.10], [0.9, 0.9]]), snap)
    np.testing.assert_array_equal(r, np.array([[0.0] * 3, [1.0] * 3]))
    assert m.update(None, None, None, None, None)["minibatches"] == 0
