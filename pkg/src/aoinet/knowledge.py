"""Per-agent knowledge tables: timestamps, cached states, parents, last contact.

Time is counted in whole windows starting at 1; timestamp 0 means "never
heard from" and parent -1 means unknown. The team's tables are stored as
stacked ``(n, n, ...)`` arrays in :class:`TeamKnowledge`; row ``i`` is agent
i's table and :meth:`TeamKnowledge.table` hands out per-agent views.
"""

from dataclasses import dataclass

import numpy as np

from . import _kernels

UNKNOWN = -1
STATE_DIM = 4
NODE_FEATURES = 7


@dataclass
class KnowledgeTable:
    owner: int
    ts: np.ndarray  # (n,) int64, last observed window per agent
    state: np.ndarray  # (n, 4) cached [px, py, vx, vy]
    parent: np.ndarray  # (n,) int64
    last_contact: np.ndarray  # (n,) int64

    @classmethod
    def fresh(cls, owner, n):
        return cls(
            owner,
            np.zeros(n, dtype=np.int64),
            np.zeros((n, STATE_DIM)),
            np.full(n, UNKNOWN, dtype=np.int64),
            np.zeros(n, dtype=np.int64),
        )

    @property
    def n(self):
        return len(self.ts)

    def copy(self):
        return KnowledgeTable(
            self.owner, self.ts.copy(), self.state.copy(), self.parent.copy(), self.last_contact.copy()
        )

    def frozen(self):
        """A read-only copy, the only thing a policy is allowed to see."""
        t = self.copy()
        for a in (t.ts, t.state, t.parent, t.last_contact):
            a.flags.writeable = False
        return t

    def relabel(self, perm):
        """Table after renaming agent ``k`` to ``perm[k]``."""
        perm = np.asarray(perm)
        inv = np.argsort(perm)
        parent = self.parent[inv]
        parent = np.where(parent >= 0, perm[np.maximum(parent, 0)], UNKNOWN)
        return KnowledgeTable(
            int(perm[self.owner]), self.ts[inv], self.state[inv], parent, self.last_contact[inv]
        )


class TeamKnowledge:
    """All agents' tables as stacked arrays (row = owner)."""

    def __init__(self, n):
        self.n = n
        self.ts = np.zeros((n, n), dtype=np.int64)
        self.state = np.zeros((n, n, STATE_DIM))
        self.parent = np.full((n, n), UNKNOWN, dtype=np.int64)
        self.last_contact = np.zeros((n, n), dtype=np.int64)

    def table(self, i) -> KnowledgeTable:
        return KnowledgeTable(i, self.ts[i], self.state[i], self.parent[i], self.last_contact[i])

    def tables(self):
        return [self.table(i) for i in range(self.n)]

    def observe_all(self, states, t):
        idx = np.arange(self.n)
        self.ts[idx, idx] = t
        self.state[idx, idx] = states

    def snapshot(self):
        return self.ts.copy(), self.state.copy(), self.parent.copy()

    def merge_phase(self, decoded, snapshot=None):
        """Every agent merges the snapshot table of the source it decoded."""
        if snapshot is None:
            snapshot = self.snapshot()
        return _kernels.merge(self.ts, self.state, self.parent, *snapshot, np.asarray(decoded, dtype=np.int64))

    def record_attempts(self, targets, t):
        targets = np.asarray(targets)
        src = np.flatnonzero(targets >= 0)
        self.last_contact[src, targets[src]] = t

    def mean_aoi(self, t):
        return mean_aoi(self.ts, t)


def observe_self(table: KnowledgeTable, state, t):
    if t < table.ts[table.owner]:
        raise ValueError("time went backwards for the table owner")
    table.state[table.owner] = state
    table.ts[table.owner] = t


def merge(table: KnowledgeTable, received: KnowledgeTable, t=None):
    """Adopt every record of ``received`` that is strictly newer.

    A record for the sender itself gets this table's owner as parent; other
    adopted records keep the sender's parent pointer. Returns the number of
    records replaced.
    """
    newer = received.ts > table.ts
    table.ts[newer] = received.ts[newer]
    table.state[newer] = received.state[newer]
    table.parent[newer] = received.parent[newer]
    if newer[received.owner]:
        table.parent[received.owner] = table.owner
    return int(newer.sum())


def record_attempt(table: KnowledgeTable, target, t):
    table.last_contact[target] = t


def parents_acyclic(table: KnowledgeTable) -> bool:
    """Following parent pointers from any record never revisits a node."""
    n = table.n
    for k in range(n):
        seen = set()
        node = k
        while node != UNKNOWN and node != table.owner:
            if node in seen:
                return False
            seen.add(node)
            node = int(table.parent[node])
    return True


def mean_aoi(team_ts, t):
    """Mean of ``t - T[i, j]`` over ordered pairs ``i != j``; 0 for a single agent."""
    team_ts = np.asarray(team_ts)
    n = team_ts.shape[0]
    if n < 2:
        return 0.0
    total = n * (n - 1) * t - (int(team_ts.sum()) - int(np.trace(team_ts)))
    return float(total) / (n * (n - 1))


@dataclass
class FeatureScale:
    n_windows: int
    p_max: float
    v_max: float

    @classmethod
    def from_config(cls, config):
        return cls(max(config.n_windows, 1), config.p_max, config.vmax)


@dataclass
class LocalGraph:
    """Node features and directed (receiver, sender) edges of one table."""

    nodes: np.ndarray  # (n, 7)
    edges: np.ndarray  # (m, 2) int64
    self_index: int

    @property
    def n_nodes(self):
        return len(self.nodes)


def node_features(table: KnowledgeTable, t, scale: FeatureScale):
    n = table.n
    f = np.zeros((n, NODE_FEATURES))
    v_max = scale.v_max if scale.v_max > 0 else 1.0
    f[:, 0] = (t - table.ts) / scale.n_windows
    f[:, 1:3] = table.state[:, 0:2] / scale.p_max
    f[:, 3:5] = table.state[:, 2:4] / v_max
    f[:, 5] = (t - table.last_contact) / scale.n_windows
    f[table.owner, 6] = 1.0
    unheard = table.ts == 0
    unheard[table.owner] = False
    f[unheard, 0] = 1.0
    f[unheard, 1:5] = 0.0
    f[unheard, 5] = 1.0
    return f


def graph_edges(table: KnowledgeTable):
    senders = np.flatnonzero(table.parent >= 0)
    senders = senders[senders != table.owner]
    return np.stack([table.parent[senders], senders], axis=1).astype(np.int64).reshape(-1, 2)


def extract_graph(table: KnowledgeTable, t, scale) -> LocalGraph:
    if not isinstance(scale, FeatureScale):
        scale = FeatureScale.from_config(scale)
    return LocalGraph(node_features(table, t, scale), graph_edges(table), table.owner)
