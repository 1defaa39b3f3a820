import logging

import numpy as np
import pytest

from aoinet.gnn import AggregationGnn, GnnConfig, GraphBatch, build_networks, segment_log_softmax
from aoinet.knowledge import NODE_FEATURES, LocalGraph
from aoinet.nn import Tape, adam_step
from aoinet.protocol import World
from aoinet.rl import (
    PpoConfig,
    ValueNorm,
    collect_rollouts,
    gae_advantages,
    policy_loss_grad,
    ppo_update,
    reward,
    train,
)
from aoinet.scenario import MissionConfig

TINY = MissionConfig(n_agents=3, n_windows=10, side_length_m=200.0)
TINY_NET = GnnConfig(receptive_field=1, hidden=8, mlp_layers=2)


def test_gae_hand_case():
    adv, ret = gae_advantages([1.0, 2.0, 3.0], [0.5, 0.5, 0.5], [False, False, True], 1.0, 1.0, normalize=False)
    assert adv.tolist() == [5.5, 4.5, 2.5]
    assert ret.tolist() == [6.0, 5.0, 3.0]


def test_gae_myopic_limit():
    r, v = np.array([1.0, -2.0, 0.5]), np.array([0.3, 0.1, -0.4])
    adv, _ = gae_advantages(r, v, [False, False, True], 0.0, 0.95, normalize=False)
    assert np.allclose(adv, r - v)


def test_gae_episode_boundary():
    adv, _ = gae_advantages([1.0, 1.0, 1.0, 1.0], [0.0] * 4, [False, True, False, True], 1.0, 1.0, normalize=False)
    assert adv.tolist() == [2.0, 1.0, 2.0, 1.0]


def test_gae_normalization_guard():
    adv, _ = gae_advantages([-1.0] * 5, [-1.0] * 5, [False] * 4 + [True], 0.0, 1.0)
    assert np.all(adv == 0.0)
    adv, _ = gae_advantages([3.0, 1.0, 2.0], [0.0] * 3, [False, False, True], 0.9, 0.9)
    assert abs(adv.mean()) < 1e-12 and adv.std() == pytest.approx(1.0)


def test_rewards():
    cfg = MissionConfig(n_agents=4)
    world = World.create(cfg, np.zeros((4, 2)))
    world.knowledge.observe_all(world.states(), 7)
    assert reward(world, 7, "aoi") == pytest.approx(-7 / 500)
    world.knowledge.ts[:] = 7
    assert reward(world, 7, "aoi") == 0.0
    world.velocities[:] = [1.0, 2.0]
    assert reward(world, 7, "velvar") == 0.0
    with pytest.raises(ValueError):
        reward(world, 7, "fun")


def test_value_norm_matches_pooled_statistics(rng):
    chunks = [rng.normal(3.0, 5.0, size=k) for k in (7, 1, 40, 13)]
    vn = ValueNorm()
    for c in chunks:
        vn.update(c)
    pooled = np.concatenate(chunks)
    assert vn.mean == pytest.approx(pooled.mean(), rel=1e-12)
    assert vn.var == pytest.approx(pooled.var(), rel=1e-12)
    assert np.allclose(vn.denormalize(vn.normalize(pooled)), pooled, rtol=1e-12)


def test_ppo_config_validation():
    with pytest.raises(ValueError):
        PpoConfig(clip=0.0)
    with pytest.raises(ValueError):
        PpoConfig(gamma=1.5)
    with pytest.raises(ValueError):
        PpoConfig(minibatch_unit="agent")


def rollout(seed=0, episodes=2):
    pi, ps, vf, vs = build_networks(TINY_NET, seed)
    batch = collect_rollouts(pi, ps, vf, vs, TINY, [seed + 1 + e for e in range(episodes)])
    return batch, pi, ps, vf, vs


def test_rollout_bookkeeping():
    batch, *_ = rollout()
    assert batch.n_windows == 20
    assert batch.n_decisions == 60
    assert len(batch.values) == 20 and batch.dones.count(True) == 2


def test_rollout_determinism():
    a, *_ = rollout(3)
    b, *_ = rollout(3)
    assert a.rewards == b.rewards and a.values == b.values
    assert all(np.array_equal(x, y) for x, y in zip(a.logp, b.logp))


@pytest.mark.parametrize("unit", ["decision", "window"])
def test_first_epoch_ratio_exactly_one(unit):
    batch, pi, ps, vf, vs = rollout(1)
    cfg = PpoConfig(batch_size=16, epochs=1, minibatch_unit=unit)
    hist = ppo_update(batch, pi, ps, vf, vs, cfg, np.random.default_rng(0))
    first = next(h for h in hist if "ratio_max_dev" in h)
    assert first["ratio_max_dev"] == 0.0
    assert first["clip_fraction"] == 0.0


def test_new_equals_old_gives_minus_mean_advantage(rng):
    G, n = 8, 3
    gb = GraphBatch(np.zeros((G * n, NODE_FEATURES)), np.zeros(0, int), np.zeros(0, int),
                    np.repeat(np.arange(G), n), np.arange(G) * n)
    z = rng.normal(size=G * n)
    a = rng.integers(0, n, G)
    old = segment_log_softmax(z, gb.node_graph, G)[np.arange(G) * n + a]
    adv = rng.normal(size=G)
    _, _, stats = policy_loss_grad(z, gb, a, old, adv, 0.2, 0.0)
    assert stats["policy_loss"] == pytest.approx(-adv.mean(), rel=1e-12)
    assert stats["entropy"] <= np.log(n) + 1e-12 and stats["entropy"] >= 0


def update_norm(clip, epochs=4):
    batch, pi, ps, vf, vs = rollout(2)
    before = ps.flat().copy()
    ppo_update(batch, pi, ps, vf, vs, PpoConfig(clip=clip, epochs=epochs, batch_size=16, ent_coef=0.0),
               np.random.default_rng(0))
    return np.linalg.norm(ps.flat() - before), ps.size()


def test_clip_limit_shrinks_update():
    norms = [update_norm(c)[0] for c in (0.5, 0.2, 0.05, 1e-4, 1e-9)]
    assert all(a >= b for a, b in zip(norms, norms[1:]))
    assert norms[-1] < 0.75 * norms[1]


def test_clipped_decisions_carry_no_gradient(rng):
    G, n = 6, 3
    gb = GraphBatch(np.zeros((G * n, NODE_FEATURES)), np.zeros(0, int), np.zeros(0, int),
                    np.repeat(np.arange(G), n), np.arange(G) * n)
    z = rng.normal(size=G * n)
    a = rng.integers(0, n, G)
    lp = segment_log_softmax(z, gb.node_graph, G)[np.arange(G) * n + a]
    # ratios 1.5 with positive and 0.5 with negative advantages sit on the clip
    old = lp - np.log(np.where(np.arange(G) % 2 == 0, 1.5, 0.5))
    adv = np.where(np.arange(G) % 2 == 0, 1.0, -1.0)
    _, dz, stats = policy_loss_grad(z, gb, a, old, adv, 0.2, 0.0)
    assert np.all(dz == 0.0)
    assert stats["clip_fraction"] == 1.0


def bandit_graphs(G, feats):
    graphs = [LocalGraph(feats.copy(), np.zeros((0, 2), dtype=np.int64), 0) for _ in range(G)]
    return GraphBatch.from_graphs(graphs)


@pytest.mark.parametrize("seed", range(20))
def test_bandit_update_favours_best_action(seed):
    rng = np.random.default_rng(seed)
    net = AggregationGnn(GnnConfig(receptive_field=0, hidden=8, mlp_layers=2), exact_rows=True)
    store = net.init_params(rng)
    feats = rng.normal(size=(3, NODE_FEATURES))
    payoff = np.array([0.0, 1.0, 0.3])
    G = 64
    gb = bandit_graphs(G, feats)

    def p_best():
        return np.exp(segment_log_softmax(net.evaluate(store, gb), gb.node_graph, G))[1]

    before = p_best()
    logp = segment_log_softmax(net.evaluate(store, gb), gb.node_graph, G)
    actions = np.array([rng.choice(3, p=np.exp(logp[:3])) for _ in range(G)])
    adv = payoff[actions] - payoff[actions].mean()
    tape = Tape()
    out = net.forward(tape, store, gb)
    _, dz, _ = policy_loss_grad(out.value[:, 0], gb, actions, logp[np.arange(G) * 3 + actions], adv, 0.2, 0.01)
    tape.backward({out: dz[:, None]})
    adam_step(store)
    assert p_best() > before


def test_relabeled_agents_give_same_loss(rng):
    batch, pi, ps, *_ = rollout(4, episodes=1)
    w = 5
    graphs = batch.graphs[w]
    n = len(batch.actions[w])
    perm = rng.permutation(n)
    shuffled = graphs.select(perm)
    adv = np.full(n, 0.7)
    z = pi.evaluate(ps, graphs)
    zs = pi.evaluate(ps, shuffled)
    a = batch.actions[w]
    la, _, _ = policy_loss_grad(z, graphs, a, batch.logp[w], adv, 0.2, 0.01)
    lb, _, _ = policy_loss_grad(zs, shuffled, a[perm], batch.logp[w][perm], adv, 0.2, 0.01)
    assert la == pytest.approx(lb, rel=1e-12)


def test_small_budget_warns_and_skips(tmp_path, caplog):
    with caplog.at_level(logging.WARNING):
        res = train(TINY, TINY_NET, PpoConfig(total_observations=5, eval_episodes=1), seed=0, out_dir=tmp_path)
    assert res.updates == 0
    assert "no training performed" in caplog.text
    assert (tmp_path / "checkpoint.json").exists()


def test_training_is_reproducible(tmp_path):
    ppo = PpoConfig(total_observations=90, eval_episodes=1, eval_every=1, batch_size=8)
    a = train(TINY, TINY_NET, ppo, seed=5, out_dir=tmp_path / "a")
    b = train(TINY, TINY_NET, ppo, seed=5, out_dir=tmp_path / "b")
    assert a.updates == 3
    assert (tmp_path / "a" / "learning_curve.csv").read_text() == (tmp_path / "b" / "learning_curve.csv").read_text()
    assert np.array_equal(a.pi_store.flat(), b.pi_store.flat())
