"""Communication policies: the interface and the three baselines.

A policy maps one agent's read-only :class:`~aoinet.knowledge.KnowledgeTable`,
the window index and that agent's rng to an action: a target id,
``SILENT`` or ``BROADCAST``. Targeting yourself means silent. Policies that
need episode-level setup (round robin, MST) implement :meth:`Policy.bind`,
which returns a new, immutable per-episode instance.
"""

from collections import deque
import re

import numpy as np

from .channel import BROADCAST, SILENT


class Policy:
    name = "policy"
    # flooding: a fresh decision in each phase and no response phase
    floods = False

    def bind(self, config, positions):
        return self

    def act(self, table, t, rng):
        raise NotImplementedError

    def plan(self, tables, t, rngs):
        return np.array([self.act(tab, t, rng) for tab, rng in zip(tables, rngs)], dtype=np.int64)

    def __repr__(self):
        return self.name


class Silent(Policy):
    name = "silent"

    def act(self, table, t, rng):
        return SILENT

    def plan(self, tables, t, rngs):
        return np.full(len(tables), SILENT, dtype=np.int64)


class RandomFlooding(Policy):
    """Broadcast with probability ``p``, independently in each phase."""

    floods = True

    def __init__(self, p):
        if not 0.0 <= p <= 1.0:
            raise ValueError("flooding probability must lie in [0, 1]")
        self.p = float(p)
        self.name = f"flood({self.p:g})"

    def act(self, table, t, rng):
        return BROADCAST if rng.random() < self.p else SILENT


def nearest_to_centroid(positions):
    positions = np.asarray(positions, dtype=float)
    d = ((positions - positions.mean(axis=0)) ** 2).sum(axis=1)
    return int(np.argmin(d))


class RoundRobin(Policy):
    """One non-base agent per window exchanges tables with the base station.

    At window ``t`` the agent at index ``t mod (n - 1)`` of the sorted
    non-base ids targets the base; the base answers in the response phase.
    """

    name = "roundrobin"

    def __init__(self, base=None, n_agents=None):
        self.base = base
        self.n_agents = n_agents
        self._others = None
        if base is not None and n_agents is not None:
            if not 0 <= base < n_agents:
                raise ValueError("base must be an agent id")
            self._others = np.array([a for a in range(n_agents) if a != base], dtype=np.int64)

    def bind(self, config, positions):
        base = nearest_to_centroid(positions) if self.base is None else self.base
        return RoundRobin(base, len(positions))

    def scheduled(self, t):
        if self._others is None:
            raise RuntimeError("round robin used before bind()")
        if len(self._others) == 0:
            return None
        return int(self._others[t % len(self._others)])

    def act(self, table, t, rng):
        return self.base if table.owner == self.scheduled(t) else SILENT

    def plan(self, tables, t, rngs):
        out = np.full(len(tables), SILENT, dtype=np.int64)
        who = self.scheduled(t)
        if who is not None:
            out[who] = self.base
        return out


def euclidean_mst(positions):
    """Kruskal on the complete graph; equal weights resolve by (i, j) order.

    Returns the list of undirected edges ``(i, j)`` with ``i < j``.
    """
    positions = np.asarray(positions, dtype=float)
    n = len(positions)
    iu, ju = np.triu_indices(n, k=1)
    w = np.sqrt(((positions[iu] - positions[ju]) ** 2).sum(axis=1))
    order = np.lexsort((ju, iu, w))
    root = list(range(n))

    def find(a):
        while root[a] != a:
            root[a] = root[root[a]]
            a = root[a]
        return a

    edges = []
    for e in order:
        a, b = find(iu[e]), find(ju[e])
        if a != b:
            root[a] = b
            edges.append((int(iu[e]), int(ju[e])))
            if len(edges) == n - 1:
                break
    return edges


def tree_parents(n, edges, root):
    adj = [[] for _ in range(n)]
    for i, j in edges:
        adj[i].append(j)
        adj[j].append(i)
    parent = np.full(n, -1, dtype=np.int64)
    seen = {root}
    queue = deque([root])
    while queue:
        u = queue.popleft()
        for v in sorted(adj[u]):
            if v not in seen:
                seen.add(v)
                parent[v] = u
                queue.append(v)
    return parent


class MinimumSpanningTree(Policy):
    """Each non-root agent targets its MST parent with probability ``p``.

    The tree is built once from the initial positions and rooted at the
    agent nearest the centroid; it is never rebuilt.
    """

    def __init__(self, p, parents=None):
        if not 0.0 <= p <= 1.0:
            raise ValueError("MST probability must lie in [0, 1]")
        self.p = float(p)
        self.parents = parents
        self.name = f"mst({self.p:g})"

    def bind(self, config, positions):
        edges = euclidean_mst(positions)
        parents = tree_parents(len(positions), edges, nearest_to_centroid(positions))
        return MinimumSpanningTree(self.p, parents)

    def act(self, table, t, rng):
        if self.parents is None:
            raise RuntimeError("MST policy used before bind()")
        par = self.parents[table.owner]
        if par < 0:
            return SILENT
        return int(par) if rng.random() < self.p else SILENT


_CALL = re.compile(r"^\s*([a-z_]+)\s*(?:\(\s*(.*?)\s*\))?\s*$")


def parse_policy(spec, default_p=None):
    """Build a policy from ``flood(p)``, ``roundrobin``, ``mst(p)``, ``silent`` or ``gnn(path)``.

    ``flood`` and ``mst`` without an argument use ``default_p`` (normally
    the tuned value) and fail if it is missing.
    """
    if isinstance(spec, Policy):
        return spec
    m = _CALL.match(spec)
    if not m:
        raise ValueError(f"cannot parse policy {spec!r}")
    name, arg = m.group(1), m.group(2)
    if name in ("flood", "mst"):
        if arg:
            p = float(arg)
        elif default_p is not None:
            p = float(default_p)
        else:
            raise ValueError(f"policy {name} needs a probability, e.g. {name}(0.3)")
        return RandomFlooding(p) if name == "flood" else MinimumSpanningTree(p)
    if name in ("roundrobin", "round_robin"):
        return RoundRobin()
    if name == "silent":
        return Silent()
    if name == "gnn":
        if not arg:
            raise ValueError("gnn policy needs a checkpoint path, e.g. gnn(model.json)")
        from .gnn import GnnPolicy

        return GnnPolicy.from_checkpoint(arg)
    raise ValueError(f"unknown policy {name!r}")
