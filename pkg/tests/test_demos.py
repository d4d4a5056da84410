"""Demonstration pipeline tests: generation, greedy selection, JSONL round-trips."""

import numpy as np
import pytest

from qdil.demos import (
    CandidatePool,
    DemoSet,
    generate_candidates,
    load_demos,
    save_demos,
    select_demonstrations,
    target_grid,
)
from qdil.envs import EpisodeRecord
from qdil.rewards import GailModel


def synthetic_pool(measures, returns, k=1):
    eps = []
    for m, r in zip(measures, returns):
        m = np.atleast_1d(np.asarray(m, dtype=np.float64))
        eps.append(EpisodeRecord(obs=np.zeros((3, 2)), actions=np.zeros((3, 1)),
                                 deltas=np.tile(m, (3, 1)), measure=m,
                                 ret=float(r), length=3))
    return CandidatePool(env="ChainHopper", obs_dim=2, act_dim=1, k=k, episodes=eps)


def test_target_grid_shapes():
    g = target_grid(2, 5)
    assert g.shape == (25, 2)
    assert g.min() == 0.0 and g.max() == 1.0
    assert len(np.unique(g[:, 0])) == 5
    g1 = target_grid(1, 3)
    np.testing.assert_allclose(g1[:, 0], [0.0, 0.5, 1.0])


def test_generate_candidates_counts_and_accuracy():
    pool = generate_candidates("PointFlyer", 50, target_grid(2, 5))
    assert len(pool.episodes) == 25
    for target, ep in zip(target_grid(2, 5), pool.episodes):
        assert np.all(np.abs(ep.measure - target) <= 2.0 / 50 + 1e-12)
        assert np.isfinite(ep.ret)


def test_generate_candidates_deterministic():
    pools = [generate_candidates("ChainHopper", 20, target_grid(1, 4)) for _ in range(2)]
    for a, b in zip(pools[0].episodes, pools[1].episodes):
        np.testing.assert_array_equal(a.obs, b.obs)
        np.testing.assert_array_equal(a.actions, b.actions)
        assert a.ret == b.ret


def test_generate_candidates_rejects_bad_targets():
    with pytest.raises(ValueError):
        generate_candidates("ChainHopper", 10, np.zeros((3, 2)))


def test_select_single_is_highest_return():
    pool = synthetic_pool([0.1, 0.9, 0.5], [1.0, 3.0, 2.0])
    out = select_demonstrations(pool, n=1)
    assert out.episodes[0].ret == 3.0


def test_select_greedy_maxmin_hand_example():
    # equal returns except a max at measure 0.0; greedy picks 0.0, 1.0, 0.5
    ms = [i / 10 for i in range(11)]
    rets = [6.0] + [5.0] * 10
    out = select_demonstrations(synthetic_pool(ms, rets), n=3)
    np.testing.assert_allclose(sorted(ep.measure[0] for ep in out.episodes),
                               [0.0, 0.5, 1.0])
    assert out.episodes[0].measure[0] == 0.0
    assert out.episodes[1].measure[0] == 1.0
    assert out.episodes[2].measure[0] == 0.5


def test_select_whole_pool_in_selection_order():
    pool = synthetic_pool([0.0, 1.0, 0.4], [2.0, 1.0, 1.0])
    out = select_demonstrations(pool, n=3)
    got = [ep.measure[0] for ep in out.episodes]
    assert got == [0.0, 1.0, 0.4]


def test_select_distance_ties_broken_by_return_then_index():
    # two candidates at the same measure: higher return wins
    pool = synthetic_pool([0.0, 0.5, 0.5], [5.0, 1.0, 2.0])
    out = select_demonstrations(pool, n=2)
    assert out.episodes[1].ret == 2.0
    # equal returns too: lower pool index wins
    pool = synthetic_pool([0.0, 0.5, 0.5], [5.0, 1.0, 1.0])
    out = select_demonstrations(pool, n=2)
    assert out.episodes[1].measure[0] == 0.5
    assert out.episodes[1] is pool.episodes[1]


def test_select_top_k_filters_low_returns():
    pool = synthetic_pool([0.50, 0.52, 0.48, 0.0], [10.0, 9.0, 8.0, 1.0])
    out = select_demonstrations(pool, n=2, top_k=3)
    picked = {ep.measure[0] for ep in out.episodes}
    assert 0.0 not in picked
    assert picked == {0.50, 0.52}


def test_select_validates_sizes():
    pool = synthetic_pool([0.1, 0.2], [1.0, 2.0])
    with pytest.raises(ValueError):
        select_demonstrations(pool, n=3)
    with pytest.raises(ValueError):
        select_demonstrations(pool, n=2, top_k=1)


def test_select_last_pick_is_locally_optimal():
    rng = np.random.default_rng(0)
    for _ in range(20):
        ms = rng.random(7)
        rets = rng.random(7)
        pool = synthetic_pool(ms, rets)
        out = select_demonstrations(pool, n=3)
        sel = [ep.measure[0] for ep in out.episodes]

        def min_pairwise(vals):
            vals = np.asarray(vals)
            d = np.abs(vals[:, None] - vals[None, :])
            return d[np.triu_indices(len(vals), 1)].min()

        base = min_pairwise(sel)
        chosen_ids = {id(ep) for ep in out.episodes}
        for ep in pool.episodes:
            if id(ep) in chosen_ids:
                continue
            swapped = sel[:-1] + [ep.measure[0]]
            assert min_pairwise(swapped) <= base + 1e-12


def test_roundtrip_is_exact(tmp_path):
    pool = generate_candidates("PointFlyer", 25, target_grid(2, 3))
    demos = select_demonstrations(pool, n=4)
    path = tmp_path / "demos.jsonl"
    save_demos(path, demos)
    back = load_demos(path)
    assert back.env == demos.env and back.k == demos.k
    assert back.has_actions
    assert len(back.episodes) == 4
    for a, b in zip(demos.episodes, back.episodes):
        np.testing.assert_array_equal(a.obs, b.obs)
        np.testing.assert_array_equal(a.actions, b.actions)
        np.testing.assert_array_equal(a.deltas, b.deltas)
        np.testing.assert_array_equal(a.measure, b.measure)
        assert a.ret == b.ret


def test_observation_only_roundtrip(tmp_path):
    pool = generate_candidates("ChainHopper", 10, target_grid(1, 4))
    demos = select_demonstrations(pool, n=3).without_actions()
    path = tmp_path / "demos_obs.jsonl"
    save_demos(path, demos)
    raw = path.read_text().splitlines()
    assert all("actions" not in ln for ln in raw[1:])
    back = load_demos(path)
    assert not back.has_actions
    assert back.actions is None
    # the observation-only discriminator trains on such a set
    m = GailModel(3, 1, 1, use_actions=False, hidden=(8,), minibatch=16,
                  rng=np.random.default_rng(0))
    stats = m.update(back, np.zeros((16, 3)), None, np.zeros((16, 1)),
                     np.random.default_rng(1))
    assert np.isfinite(stats["bce"])


def test_load_errors_name_line_numbers(tmp_path):
    path = tmp_path / "demos.jsonl"
    pool = generate_candidates("ChainHopper", 5, target_grid(1, 3))
    demos = select_demonstrations(pool, n=3)
    save_demos(path, demos)
    lines = path.read_text().splitlines()

    path.write_text("")
    with pytest.raises(ValueError, match="line 1"):
        load_demos(path)

    path.write_text("{not json}\n")
    with pytest.raises(ValueError, match="line 1"):
        load_demos(path)

    path.write_text('{"env": "ChainHopper", "obs_dim": 3}\n')
    with pytest.raises(ValueError, match="line 1.*missing key"):
        load_demos(path)

    # header promises 3 but only 2 episodes present
    path.write_text("\n".join(lines[:3]) + "\n")
    with pytest.raises(ValueError, match="truncated"):
        load_demos(path)

    broken = dict_line_without(lines[2], "obs")
    path.write_text("\n".join([lines[0], lines[1], broken]) + "\n")
    with pytest.raises(ValueError, match="line 3.*obs"):
        load_demos(path)


def dict_line_without(line, key):
    import json
    rec = json.loads(line)
    del rec[key]
    return json.dumps(rec)


def test_load_rejects_dim_mismatch(tmp_path):
    import json
    path = tmp_path / "demos.jsonl"
    header = {"env": "ChainHopper", "obs_dim": 3, "act_dim": 1, "k": 1, "count": 1}
    ep = {"obs": [[0.0, 0.0]], "actions": [[0.0]], "deltas": [[1.0]],
          "measure": [1.0], "ret": 1.0}
    path.write_text(json.dumps(header) + "\n" + json.dumps(ep) + "\n")
    with pytest.raises(ValueError, match="line 2.*obs"):
        load_demos(path)


def test_load_rejects_mixed_action_presence(tmp_path):
    import json
    path = tmp_path / "demos.jsonl"
    header = {"env": "ChainHopper", "obs_dim": 1, "act_dim": 1, "k": 1, "count": 2}
    with_a = {"obs": [[0.0]], "actions": [[0.0]], "deltas": [[1.0]],
              "measure": [1.0], "ret": 1.0}
    without_a = {kk: vv for kk, vv in with_a.items() if kk != "actions"}
    path.write_text("\n".join([json.dumps(header), json.dumps(with_a),
                               json.dumps(without_a)]) + "\n")
    with pytest.raises(ValueError, match="line 3.*mixed"):
        load_demos(path)


def test_demoset_validates_header_dims():
    ep = EpisodeRecord(obs=np.zeros((2, 3)), actions=np.zeros((2, 1)),
                       deltas=np.zeros((2, 1)), measure=np.zeros(1), ret=0.0, length=2)
    with pytest.raises(ValueError):
        DemoSet(env="x", obs_dim=4, act_dim=1, k=1, episodes=[ep])
    with pytest.raises(ValueError):
        DemoSet(env="x", obs_dim=3, act_dim=1, k=1, episodes=[])
