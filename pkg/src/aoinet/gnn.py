"""Aggregation GNN over local knowledge graphs, as policy and value network.

Encode-process-decode: nodes (and edge attributes) are encoded by ``enc``,
``K`` weight-shared GN blocks update edges then nodes with mean
aggregation over incoming edges, every stage is decoded by ``dec``, and
the concatenated stage outputs go through a linear ``out`` layer giving
one scalar per node.
"""

from dataclasses import asdict, dataclass

import numpy as np

from .channel import SILENT
from .knowledge import NODE_FEATURES, FeatureScale, LocalGraph, extract_graph
from .nn import Mlp, ParamStore, Tape, fill_store, glorot, read_checkpoint, save_checkpoint
from .policies import Policy


@dataclass
class GnnConfig:
    receptive_field: int = 5
    hidden: int = 64
    mlp_layers: int = 3
    bidirectional_edges: bool = False

    def __post_init__(self):
        if self.receptive_field < 0:
            raise ValueError("receptive_field must be >= 0")
        if self.hidden < 1 or self.mlp_layers < 1:
            raise ValueError("hidden and mlp_layers must be >= 1")


@dataclass
class GraphBatch:
    """Disjoint union of graphs with global node indices."""

    nodes: np.ndarray  # (N, F)
    receivers: np.ndarray  # (E,)
    senders: np.ndarray  # (E,)
    node_graph: np.ndarray  # (N,)
    self_nodes: np.ndarray  # (G,)

    @property
    def n_nodes(self):
        return len(self.nodes)

    @property
    def n_graphs(self):
        return len(self.self_nodes)

    @classmethod
    def from_graphs(cls, graphs):
        nodes, rcv, snd, gid, selfs = [], [], [], [], []
        off = 0
        for g, graph in enumerate(graphs):
            nodes.append(graph.nodes)
            rcv.append(graph.edges[:, 0] + off)
            snd.append(graph.edges[:, 1] + off)
            gid.append(np.full(graph.n_nodes, g, dtype=np.int64))
            selfs.append(graph.self_index + off)
            off += graph.n_nodes
        return cls(
            np.concatenate(nodes).reshape(-1, NODE_FEATURES),
            np.concatenate(rcv).astype(np.int64),
            np.concatenate(snd).astype(np.int64),
            np.concatenate(gid),
            np.asarray(selfs, dtype=np.int64),
        )

    @classmethod
    def from_tables(cls, tables, t, scale: FeatureScale):
        """Vectorized graph extraction for a team of equally sized tables."""
        g = len(tables)
        n = tables[0].n
        owners = np.array([tab.owner for tab in tables])
        ts = np.stack([tab.ts for tab in tables])
        state = np.stack([tab.state for tab in tables])
        parent = np.stack([tab.parent for tab in tables])
        lc = np.stack([tab.last_contact for tab in tables])
        rows = np.arange(g)
        v_max = scale.v_max if scale.v_max > 0 else 1.0
        f = np.zeros((g, n, NODE_FEATURES))
        f[..., 0] = (t - ts) / scale.n_windows
        f[..., 1:3] = state[..., 0:2] / scale.p_max
        f[..., 3:5] = state[..., 2:4] / v_max
        f[..., 5] = (t - lc) / scale.n_windows
        f[rows, owners, 6] = 1.0
        unheard = ts == 0
        unheard[rows, owners] = False
        f[unheard, 0] = 1.0
        f[unheard, 1:5] = 0.0
        f[unheard, 5] = 1.0
        has = parent >= 0
        has[rows, owners] = False
        gi, k = np.nonzero(has)
        off = gi * n
        return cls(
            f.reshape(g * n, NODE_FEATURES),
            (parent[gi, k] + off).astype(np.int64),
            (k + off).astype(np.int64),
            np.repeat(rows, n).astype(np.int64),
            (owners + rows * n).astype(np.int64),
        )

    def select(self, graph_ids):
        """Sub-batch of the given graphs, renumbered in the given order."""
        graph_ids = np.asarray(graph_ids, dtype=np.int64)
        new_gid = np.full(self.n_graphs, -1, dtype=np.int64)
        new_gid[graph_ids] = np.arange(len(graph_ids))
        g = new_gid[self.node_graph]
        keep = np.flatnonzero(g >= 0)
        order = keep[np.argsort(g[keep], kind="stable")]
        new_node = np.full(self.n_nodes, -1, dtype=np.int64)
        new_node[order] = np.arange(len(order))
        emask = new_node[self.receivers] >= 0
        return GraphBatch(
            self.nodes[order],
            new_node[self.receivers[emask]],
            new_node[self.senders[emask]],
            g[order],
            new_node[self.self_nodes[graph_ids]],
        )

    @classmethod
    def concat(cls, batches):
        nodes, rcv, snd, gid, selfs = [], [], [], [], []
        noff = goff = 0
        for b in batches:
            nodes.append(b.nodes)
            rcv.append(b.receivers + noff)
            snd.append(b.senders + noff)
            gid.append(b.node_graph + goff)
            selfs.append(b.self_nodes + noff)
            noff += b.n_nodes
            goff += b.n_graphs
        return cls(np.concatenate(nodes), np.concatenate(rcv), np.concatenate(snd),
                   np.concatenate(gid), np.concatenate(selfs))


class AggregationGnn:
    """Architecture description; weights live in a :class:`ParamStore`."""

    def __init__(self, config: GnnConfig, prefix="net", exact_rows=False):
        self.config = config
        self.prefix = prefix
        # batch-invariant rows, so re-batched log-probabilities match exactly
        self.exact_rows = exact_rows
        h, L = config.hidden, config.mlp_layers

        def widths(a, b):
            return (a,) + (h,) * (L - 1) + (b,)

        self.enc = Mlp(f"{prefix}.enc", widths(NODE_FEATURES, h))
        self.edge = Mlp(f"{prefix}.edge", widths(3 * h, h))
        self.node = Mlp(f"{prefix}.node", widths(2 * h, h))
        self.dec = Mlp(f"{prefix}.dec", widths(h, h))
        self.out = Mlp(f"{prefix}.out", ((config.receptive_field + 1) * h, 1))

    def mlps(self):
        return (self.enc, self.edge, self.node, self.dec, self.out)

    def init_params(self, rng, store=None):
        store = ParamStore() if store is None else store
        for mlp in self.mlps():
            for k, (a, b) in enumerate(zip(mlp.widths[:-1], mlp.widths[1:])):
                store.add(f"{mlp.prefix}.w{k}", glorot(rng, a, b))
                store.add(f"{mlp.prefix}.b{k}", np.zeros(b))
        return store

    def gn_block(self, tape, store, h, e, receivers, senders):
        """One GN application: edges, then mean over incoming edges, then nodes."""
        ex = self.exact_rows
        e = self.edge.forward(tape, store, tape.concat([e, tape.gather(h, receivers), tape.gather(h, senders)]), ex)
        agg = tape.segment_mean(e, receivers, h.value.shape[0])
        h = self.node.forward(tape, store, tape.concat([agg, h]), ex)
        return h, e

    def forward(self, tape, store, batch: GraphBatch):
        """Per-node scalar outputs, shape ``(N, 1)``."""
        r, s = batch.receivers, batch.senders
        if self.config.bidirectional_edges:
            r, s = np.concatenate([r, s]), np.concatenate([s, r])
        ex = self.exact_rows
        x = tape.const(batch.nodes)
        h = self.enc.forward(tape, store, x, ex)
        e = self.enc.forward(tape, store, tape.const(batch.nodes[s] - batch.nodes[r]), ex)
        stages = [self.dec.forward(tape, store, h, ex)]
        for _ in range(self.config.receptive_field):
            h, e = self.gn_block(tape, store, h, e, r, s)
            stages.append(self.dec.forward(tape, store, h, ex))
        out = self.out.forward(tape, store, tape.concat(stages), ex)
        if not np.all(np.isfinite(out.value)):
            raise FloatingPointError("non-finite GNN output")
        return out

    def evaluate(self, store, batch):
        return self.forward(Tape(record=False), store, batch).value[:, 0]


def segment_log_softmax(logits, node_graph, n_graphs):
    mx = np.full(n_graphs, -np.inf)
    np.maximum.at(mx, node_graph, logits)
    z = logits - mx[node_graph]
    lse = np.log(np.bincount(node_graph, weights=np.exp(z), minlength=n_graphs))
    return z - lse[node_graph]


def sample_actions(logp, batch: GraphBatch, rngs):
    """Categorical draw per graph from its own rng; returns local node indices."""
    n_graphs = batch.n_graphs
    starts = np.searchsorted(batch.node_graph, np.arange(n_graphs))
    ends = np.append(starts[1:], batch.n_nodes)
    actions = np.empty(n_graphs, dtype=np.int64)
    for g in range(n_graphs):
        p = np.exp(logp[starts[g] : ends[g]])
        c = np.cumsum(p)
        u = rngs[g].random() * c[-1]
        actions[g] = min(int(np.searchsorted(c, u, side="right")), len(c) - 1)
    return actions, starts


def policy_action(graph: LocalGraph, net: AggregationGnn, store, rng):
    """Sample one agent's action: ``(target or SILENT, log-probability)``."""
    batch = GraphBatch.from_graphs([graph])
    logp = segment_log_softmax(net.evaluate(store, batch), batch.node_graph, 1)
    (a,), _ = sample_actions(logp, batch, [rng])
    target = SILENT if a == graph.self_index else int(a)
    return target, float(logp[a])


def value_estimate(graphs, net: AggregationGnn, store):
    """Team value: per-node outputs summed over every agent's graph."""
    batch = GraphBatch.from_graphs(graphs)
    return float(net.evaluate(store, batch).sum())


class GnnPolicy(Policy):
    """Decentralized execution of a trained policy network."""

    def __init__(self, net: AggregationGnn, store: ParamStore, scale: FeatureScale = None, label="gnn"):
        self.net = net
        self.store = store
        self.scale = scale
        self.name = label

    def bind(self, config, positions):
        return GnnPolicy(self.net, self.store, FeatureScale.from_config(config), self.name)

    def distribution(self, tables, t):
        batch = GraphBatch.from_tables(tables, t, self.scale)
        logp = segment_log_softmax(self.net.evaluate(self.store, batch), batch.node_graph, batch.n_graphs)
        return batch, logp

    def decide(self, tables, t, rngs):
        batch, logp = self.distribution(tables, t)
        actions, starts = sample_actions(logp, batch, rngs)
        owners = np.array([tab.owner for tab in tables])
        targets = np.where(actions == owners, SILENT, actions).astype(np.int64)
        return targets, batch, actions, logp[starts + actions]

    def plan(self, tables, t, rngs):
        if self.scale is None:
            raise RuntimeError("GNN policy used before bind()")
        return self.decide(tables, t, rngs)[0]

    def act(self, table, t, rng):
        return int(self.plan([table], t, [rng])[0])

    @classmethod
    def from_checkpoint(cls, path):
        net, store, _, meta = load_networks(path)
        return cls(net, store, label=f"gnn({path})")


def build_networks(config: GnnConfig, seed=0):
    """Separate policy and value networks with independent initializations."""
    rng = np.random.default_rng([seed, 7])
    pi = AggregationGnn(config, "pi", exact_rows=True)
    vf = AggregationGnn(config, "vf")
    return pi, pi.init_params(rng), vf, vf.init_params(rng)


def save_networks(path, config: GnnConfig, pi_store, vf_store, extra=None):
    meta = {"gnn": asdict(config), **(extra or {})}
    save_checkpoint(path, {"policy": pi_store, "value": vf_store}, meta)


def load_networks(path):
    """Returns ``(policy_net, policy_store, value_store, meta)`` after shape validation."""
    doc = read_checkpoint(path)
    config = GnnConfig(**doc["meta"]["gnn"])
    pi, _, vf, _ = build_networks(config)
    pi_store = fill_store(pi.init_params(np.random.default_rng(0)), doc["stores"]["policy"])
    vf_store = fill_store(vf.init_params(np.random.default_rng(0)), doc["stores"]["value"])
    return pi, pi_store, vf_store, doc["meta"]


__all__ = [
    "GnnConfig",
    "GraphBatch",
    "AggregationGnn",
    "GnnPolicy",
    "build_networks",
    "extract_graph",
    "policy_action",
    "value_estimate",
]
