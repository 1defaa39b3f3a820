import itertools

import numpy as np
import pytest

from aoinet.channel import BROADCAST, SILENT
from aoinet.knowledge import KnowledgeTable
from aoinet.policies import (
    MinimumSpanningTree,
    RandomFlooding,
    RoundRobin,
    Silent,
    euclidean_mst,
    nearest_to_centroid,
    parse_policy,
    tree_parents,
)
from aoinet.scenario import MissionConfig


def prufer_trees(n):
    """Every labelled tree on n nodes, decoded from its Prufer sequence."""
    for seq in itertools.product(range(n), repeat=n - 2):
        degree = [1] * n
        for s in seq:
            degree[s] += 1
        edges = []
        for s in seq:
            leaf = min(i for i in range(n) if degree[i] == 1)
            edges.append((leaf, s))
            degree[leaf] -= 1
            degree[s] -= 1
        u, v = [i for i in range(n) if degree[i] == 1]
        edges.append((u, v))
        yield edges


def tree_weight(pos, edges):
    return sum(np.linalg.norm(pos[i] - pos[j]) for i, j in edges)


@pytest.mark.parametrize("n", [3, 4, 5, 6])
def test_mst_matches_exhaustive_search(n, rng):
    for _ in range(5):
        pos = rng.uniform(0, 100, (n, 2))
        best = min(tree_weight(pos, e) for e in prufer_trees(n))
        edges = euclidean_mst(pos)
        assert len(edges) == n - 1
        assert tree_weight(pos, edges) == pytest.approx(best, rel=1e-12)


def test_mst_tie_break_is_deterministic():
    square = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    assert euclidean_mst(square) == [(0, 1), (0, 2), (1, 3)]


def test_tree_parents_rooted():
    parent = tree_parents(5, [(0, 1), (1, 2), (1, 3), (3, 4)], root=1)
    assert parent.tolist() == [1, -1, 1, 1, 3]


def test_nearest_to_centroid():
    pos = np.array([[0.0, 0.0], [10.0, 0.0], [4.0, 1.0], [0.0, 10.0]])
    assert nearest_to_centroid(pos) == 2


def tables(n):
    return [KnowledgeTable.fresh(i, n) for i in range(n)]


def test_round_robin_schedule():
    rr = RoundRobin(base=2, n_agents=5)
    seen = [rr.scheduled(t) for t in range(1, 9)]
    assert seen == [1, 3, 4, 0, 1, 3, 4, 0]
    plan = rr.plan(tables(5), 1, [None] * 5)
    assert plan.tolist() == [SILENT, 2, SILENT, SILENT, SILENT]
    assert rr.act(tables(5)[1], 1, None) == 2


def test_round_robin_bind_picks_central_base():
    pos = np.array([[0.0, 0.0], [100.0, 0.0], [50.0, 5.0]])
    rr = RoundRobin().bind(MissionConfig(n_agents=3), pos)
    assert rr.base == 2
    with pytest.raises(RuntimeError):
        RoundRobin().scheduled(1)


def test_single_agent_round_robin_is_silent():
    rr = RoundRobin(base=0, n_agents=1)
    assert rr.plan(tables(1), 5, [None]).tolist() == [SILENT]


def test_flooding_rate(rng):
    pol = RandomFlooding(0.3)
    acts = np.array([pol.act(None, 1, rng) for _ in range(20000)])
    assert set(np.unique(acts)) <= {BROADCAST, SILENT}
    assert np.mean(acts == BROADCAST) == pytest.approx(0.3, abs=0.015)
    with pytest.raises(ValueError):
        RandomFlooding(1.5)


def test_mst_policy_targets_parent(rng):
    pos = np.array([[0.0, 0.0], [10.0, 0.0], [20.0, 0.0], [30.0, 0.0]])
    pol = MinimumSpanningTree(1.0).bind(MissionConfig(n_agents=4), pos)
    plan = pol.plan(tables(4), 1, [rng] * 4)
    # root is agent 1 (nearest the centroid, lower id on a tie)
    assert plan.tolist() == [1, SILENT, 1, 2]
    assert MinimumSpanningTree(0.0).bind(None, pos).plan(tables(4), 1, [rng] * 4).tolist() == [SILENT] * 4


def test_silent_plan():
    assert Silent().plan(tables(3), 1, [None] * 3).tolist() == [SILENT] * 3


def test_parse_policy():
    assert parse_policy("flood(0.25)").p == 0.25
    assert isinstance(parse_policy("roundrobin"), RoundRobin)
    assert isinstance(parse_policy(" silent "), Silent)
    assert parse_policy("mst", default_p=0.4).p == 0.4
    for bad in ["mst", "gnn", "teleport", "flood(x"]:
        with pytest.raises(ValueError):
            parse_policy(bad)
