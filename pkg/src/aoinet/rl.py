"""PPO training of the GNN communication policy on protocol episodes.

Every agent in a window shares the team reward and therefore the window's
advantage. Decisions are grouped by window; a minibatch is a set of
windows so the team value target stays whole.
"""

from dataclasses import dataclass, field
import csv
import logging
import math
import os

import numpy as np

from .gnn import AggregationGnn, GnnConfig, GnnPolicy, GraphBatch, build_networks, save_networks, segment_log_softmax
from .knowledge import FeatureScale
from .nn import LrSchedule, ParamStore, Tape, adam_step
from .protocol import advance, run_episode, run_window, start_episode
from .scenario import MissionConfig, velocity_variance

log = logging.getLogger(__name__)

REWARD_KINDS = ("aoi", "velvar")
CURVE_FORMAT = "aoinet-curve/1"


class TrainingError(RuntimeError):
    pass


@dataclass
class PpoConfig:
    total_observations: int = 2_000_000
    batch_size: int = 64
    minibatch_unit: str = "decision"
    clip: float = 0.2
    gamma: float = 0.99
    lam: float = 0.95
    epochs: int = 4
    ent_coef: float = 0.01
    vf_coef: float = 0.5
    max_grad_norm: float = 0.5
    value_norm: bool = True
    episodes_per_update: int = 1
    lr: float = 1e-4
    lr_decay: float = 0.95
    lr_decay_every: int = 500
    eval_episodes: int = 4
    eval_every: int = 5

    def __post_init__(self):
        if not 0.0 < self.clip < 1.0:
            raise ValueError("clip must lie in (0, 1)")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must lie in [0, 1]")
        if self.minibatch_unit not in ("decision", "window"):
            raise ValueError("minibatch_unit must be 'decision' or 'window'")
        if self.batch_size < 1 or self.epochs < 1 or self.episodes_per_update < 1:
            raise ValueError("batch_size, epochs and episodes_per_update must be >= 1")

    @property
    def schedule(self):
        return LrSchedule(self.lr, self.lr_decay, self.lr_decay_every)


def reward(world, t, kind, aoi=None):
    """Team reward for the window that just ended."""
    cfg = world.config
    if kind == "aoi":
        a = world.knowledge.mean_aoi(t) if aoi is None else aoi
        return -a / max(cfg.n_windows, 1)
    if kind == "velvar":
        return -velocity_variance(world.velocities) / cfg.vmax**2
    raise ValueError(f"unknown reward kind {kind!r}")


@dataclass
class RolloutBatch:
    """Per-window observations of every deciding agent plus team signals."""

    graphs: list = field(default_factory=list)  # GraphBatch per window
    actions: list = field(default_factory=list)  # local node index per agent
    logp: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    values: list = field(default_factory=list)
    dones: list = field(default_factory=list)
    episode_returns: list = field(default_factory=list)
    advantages: np.ndarray = None
    returns: np.ndarray = None

    @property
    def n_windows(self):
        return len(self.graphs)

    @property
    def n_decisions(self):
        return int(sum(len(a) for a in self.actions))

    def extend(self, other):
        for name in ("graphs", "actions", "logp", "rewards", "values", "dones", "episode_returns"):
            getattr(self, name).extend(getattr(other, name))


class ValueNorm:
    """Running mean and variance of value targets.

    The value network predicts standardized returns; ``denormalize`` maps
    its output back to reward units for advantage estimation.
    """

    def __init__(self):
        self.count = 0
        self.mean = 0.0
        self.var = 1.0

    @property
    def std(self):
        return math.sqrt(max(self.var, 1e-8))

    def update(self, x):
        x = np.asarray(x, dtype=float)
        if x.size == 0:
            return
        n, m, v = x.size, float(x.mean()), float(x.var())
        if self.count == 0:
            self.count, self.mean, self.var = n, m, v
            return
        total = self.count + n
        delta = m - self.mean
        self.var = (self.count * self.var + n * v + delta**2 * self.count * n / total) / total
        self.mean += delta * n / total
        self.count = total

    def normalize(self, x):
        return (np.asarray(x, dtype=float) - self.mean) / self.std

    def denormalize(self, y):
        return np.asarray(y, dtype=float) * self.std + self.mean


def team_values(vf_net: AggregationGnn, vf_store, graphs, chunk=64, value_norm=None):
    """Team value per window: sum of every node output of every agent's graph."""
    out = []
    for i in range(0, len(graphs), chunk):
        part = graphs[i : i + chunk]
        batch = GraphBatch.concat(part)
        y = vf_net.evaluate(vf_store, batch)
        sizes = [g.n_nodes for g in part]
        out.extend(np.add.reduceat(y, np.cumsum([0] + sizes[:-1])).tolist() if len(y) else [0.0] * len(part))
    if value_norm is not None:
        out = value_norm.denormalize(out).tolist()
    return out


class _Recording:
    """Wraps a bound GNN policy and keeps what it saw and chose in the last window."""

    floods = False

    def __init__(self, policy):
        self.policy = policy
        self.last = None

    def plan(self, tables, t, rngs):
        targets, batch, actions, logp = self.policy.decide(tables, t, rngs)
        self.last = (batch, actions, logp)
        return targets


def run_training_episode(config, pi_net, pi_store, seed, reward_kind):
    """One episode under the policy, recording what PPO needs."""
    policy = GnnPolicy(pi_net, pi_store)
    world, bound, task_rng, agent_rngs = start_episode(config, policy, seed)
    recorder = _Recording(bound)
    ep = RolloutBatch()
    for t in range(1, config.n_windows + 1):
        report = run_window(world, recorder, t, agent_rngs)
        advance(world, task_rng)
        batch, actions, logp = recorder.last
        ep.graphs.append(batch)
        ep.actions.append(actions)
        ep.logp.append(logp)
        ep.rewards.append(reward(world, t, reward_kind, aoi=report.aoi))
        ep.dones.append(t == config.n_windows)
    ep.episode_returns.append(float(np.sum(ep.rewards)))
    return ep


def collect_rollouts(pi_net, pi_store, vf_net, vf_store, config: MissionConfig, seeds, reward_kind="aoi",
                     value_norm=None):
    """Run one episode per seed with read-only snapshots of both networks."""
    pi_snap = pi_store.copy()
    vf_snap = vf_store.copy()
    batch = RolloutBatch()
    for s in seeds:
        ep = run_training_episode(config, pi_net, pi_snap, int(s), reward_kind)
        ep.values = team_values(vf_net, vf_snap, ep.graphs, value_norm=value_norm)
        batch.extend(ep)
    return batch


def gae_advantages(rewards, values, dones, gamma, lam, normalize=True):
    """Generalized advantage estimates per window and value targets.

    The value after a terminal window is taken as zero. Returns
    ``(advantages, returns)``; returns use the raw advantages.
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=bool)
    n = len(rewards)
    adv = np.zeros(n)
    last = 0.0
    for t in range(n - 1, -1, -1):
        nonterminal = 0.0 if dones[t] else 1.0
        next_value = values[t + 1] if (t + 1 < n and not dones[t]) else 0.0
        delta = rewards[t] + gamma * next_value * nonterminal - values[t]
        last = delta + gamma * lam * nonterminal * last
        adv[t] = last
    returns = adv + values
    if normalize and n > 0:
        adv = adv - adv.mean()
        std = adv.std()
        if std > 1e-8:
            adv = adv / std
    return adv, returns


def compute_advantages(batch: RolloutBatch, cfg: PpoConfig):
    batch.advantages, batch.returns = gae_advantages(batch.rewards, batch.values, batch.dones, cfg.gamma, cfg.lam)
    return batch


def _minibatch(batch: RolloutBatch, idx):
    graphs = GraphBatch.concat([batch.graphs[i] for i in idx])
    actions = np.concatenate([batch.actions[i] for i in idx])
    old_logp = np.concatenate([batch.logp[i] for i in idx])
    adv = np.concatenate([np.full(len(batch.actions[i]), batch.advantages[i]) for i in idx])
    window_of_node = np.repeat(np.arange(len(idx)), [batch.graphs[i].n_nodes for i in idx])
    return graphs, actions, old_logp, adv, window_of_node


class _Decisions:
    """Flat view of every (window, agent) decision in a rollout."""

    def __init__(self, batch: RolloutBatch):
        self.graphs = GraphBatch.concat(batch.graphs)
        self.actions = np.concatenate(batch.actions)
        self.logp = np.concatenate(batch.logp)
        self.adv = np.repeat(batch.advantages, [len(a) for a in batch.actions])

    def __len__(self):
        return len(self.actions)

    def take(self, idx):
        return self.graphs.select(idx), self.actions[idx], self.logp[idx], self.adv[idx]


def policy_loss_grad(logits, graphs: GraphBatch, actions, old_logp, adv, clip, ent_coef):
    """Clipped-surrogate plus entropy loss and its gradient with respect to the node logits."""
    G = graphs.n_graphs
    logp_all = segment_log_softmax(logits, graphs.node_graph, G)
    p_all = np.exp(logp_all)
    starts = np.searchsorted(graphs.node_graph, np.arange(G))
    chosen = starts + actions
    logp = logp_all[chosen]
    ratio = np.exp(logp - old_logp)
    surr1 = ratio * adv
    surr2 = np.clip(ratio, 1.0 - clip, 1.0 + clip) * adv
    surr = np.minimum(surr1, surr2)
    plogp = p_all * logp_all
    entropy = -np.bincount(graphs.node_graph, weights=plogp, minlength=G)
    loss = -surr.mean() - ent_coef * entropy.mean()

    # d(-surr)/d logp: the unclipped branch is active whenever surr1 <= surr2
    active = surr1 <= surr2
    g_logp = -(ratio * adv * active) / G
    grad = -p_all * g_logp[graphs.node_graph]
    grad[chosen] += g_logp
    # d(-ent_coef * mean H)/dz = ent_coef / G * p * (log p + H)
    grad += (ent_coef / G) * p_all * (logp_all + entropy[graphs.node_graph])
    stats = {
        "policy_loss": float(-surr.mean()),
        "entropy": float(entropy.mean()),
        "clip_fraction": float(np.mean(np.abs(ratio - 1.0) > clip)),
        "approx_kl": float(np.mean(old_logp - logp)),
        "ratio_max_dev": float(np.max(np.abs(ratio - 1.0))) if len(ratio) else 0.0,
    }
    return loss, grad, stats


def value_loss_grad(node_values, window_of_node, n_windows, targets, vf_coef):
    v = np.bincount(window_of_node, weights=node_values, minlength=n_windows)
    err = v - targets
    loss = vf_coef * float(np.mean(err**2))
    g_window = 2.0 * vf_coef * err / n_windows
    return loss, g_window[window_of_node], v


def clip_grad_norm(store: ParamStore, max_norm):
    if max_norm is None or max_norm <= 0:
        return None
    norm = math.sqrt(sum(float((g * g).sum()) for g in store.grads.values()))
    if not math.isfinite(norm):
        raise FloatingPointError("non-finite gradient norm")
    if norm > max_norm:
        for g in store.grads.values():
            g *= max_norm / norm
    return norm


def _policy_step(pi_net, pi_store, graphs, actions, old_logp, adv, cfg, schedule):
    tape = Tape()
    out = pi_net.forward(tape, pi_store, graphs)
    loss, dz, stats = policy_loss_grad(out.value[:, 0], graphs, actions, old_logp, adv, cfg.clip, cfg.ent_coef)
    if not math.isfinite(loss):
        raise FloatingPointError(f"non-finite policy loss {loss}")
    tape.backward({out: dz[:, None]})
    clip_grad_norm(pi_store, cfg.max_grad_norm)
    adam_step(pi_store, schedule)
    return stats


def _value_step(vf_net, vf_store, batch, idx, targets, cfg, schedule):
    graphs, _, _, _, wnode = _minibatch(batch, idx)
    tape = Tape()
    out = vf_net.forward(tape, vf_store, graphs)
    loss, dv, _ = value_loss_grad(out.value[:, 0], wnode, len(idx), targets[idx], cfg.vf_coef)
    if not math.isfinite(loss):
        raise FloatingPointError(f"non-finite value loss {loss}")
    tape.backward({out: dv[:, None]})
    clip_grad_norm(vf_store, cfg.max_grad_norm)
    adam_step(vf_store, schedule)
    return loss


def ppo_update(batch: RolloutBatch, pi_net, pi_store, vf_net, vf_store, cfg: PpoConfig, rng, value_norm=None):
    """Several epochs of minibatch PPO; restores both networks on a non-finite loss.

    Policy minibatches hold ``batch_size`` decisions (or windows, with
    ``minibatch_unit="window"``). The team value is a per-window quantity,
    so value minibatches hold whole windows: as many as make up about
    ``batch_size`` decisions, or ``batch_size`` windows in window mode.
    With a ``value_norm`` the value net is fit to standardized returns; the
    statistics are updated with this batch first.
    """
    if batch.advantages is None:
        compute_advantages(batch, cfg)
    targets = batch.returns
    if value_norm is not None:
        value_norm.update(batch.returns)
        targets = value_norm.normalize(batch.returns)
    pi_backup, vf_backup = pi_store.copy(), vf_store.copy()
    schedule = cfg.schedule
    history = []
    n = batch.n_windows
    flat = _Decisions(batch) if cfg.minibatch_unit == "decision" else None
    if flat is None:
        value_windows = cfg.batch_size
    else:
        value_windows = max(1, int(round(cfg.batch_size * n / max(len(flat), 1))))
    try:
        for epoch in range(cfg.epochs):
            if flat is None:
                order = rng.permutation(n)
                for lo in range(0, n, cfg.batch_size):
                    idx = order[lo : lo + cfg.batch_size]
                    graphs, actions, old_logp, adv, _ = _minibatch(batch, idx)
                    stats = _policy_step(pi_net, pi_store, graphs, actions, old_logp, adv, cfg, schedule)
                    history.append({"epoch": epoch, **stats})
            else:
                order = rng.permutation(len(flat))
                for lo in range(0, len(flat), cfg.batch_size):
                    stats = _policy_step(pi_net, pi_store, *flat.take(order[lo : lo + cfg.batch_size]), cfg, schedule)
                    history.append({"epoch": epoch, **stats})
            order = rng.permutation(n)
            for lo in range(0, n, value_windows):
                vloss = _value_step(vf_net, vf_store, batch, order[lo : lo + value_windows], targets, cfg, schedule)
                history.append({"epoch": epoch, "value_loss": vloss})
        pi_store.assert_finite("policy")
        vf_store.assert_finite("value")
    except FloatingPointError:
        pi_store.load_from(pi_backup)
        vf_store.load_from(vf_backup)
        raise
    return history


def evaluate_policy(config, pi_net, pi_store, seeds):
    """Mean AoI of the stochastic policy over the given episode seeds."""
    policy = GnnPolicy(pi_net, pi_store)
    return float(np.mean([run_episode(config, policy, seed=int(s)).metrics["mean_aoi"] for s in seeds]))


@dataclass
class TrainResult:
    checkpoint: str
    curve: list
    initial_aoi: float
    final_aoi: float
    updates: int
    pi_store: ParamStore = None
    vf_store: ParamStore = None


def eval_seeds(seed, count):
    return [1_000_000 + 1000 * int(seed) + e for e in range(count)]


def train(config: MissionConfig, gnn_cfg: GnnConfig, ppo_cfg: PpoConfig, reward_kind="aoi", seed=0, out_dir=None):
    """Alternate rollouts and PPO updates until the observation budget is spent."""
    if reward_kind not in REWARD_KINDS:
        raise ValueError(f"reward kind must be one of {REWARD_KINDS}")
    pi_net, pi_store, vf_net, vf_store = build_networks(gnn_cfg, seed)
    rng = np.random.default_rng([seed, 11])
    value_norm = ValueNorm() if ppo_cfg.value_norm else None
    evals = eval_seeds(seed, ppo_cfg.eval_episodes)
    per_update = config.n_agents * config.n_windows * ppo_cfg.episodes_per_update
    initial = evaluate_policy(config, pi_net, pi_store, evals)
    curve = [(0, float("nan"), initial)]
    log.info("initial evaluation AoI %.3f", initial)
    if per_update == 0 or ppo_cfg.total_observations < per_update:
        log.warning("observation budget %d is below one update (%d); no training performed",
                    ppo_cfg.total_observations, per_update)
    observations = 0
    it = 0
    final = initial
    while per_update > 0 and observations + per_update <= ppo_cfg.total_observations:
        seeds = rng.integers(0, 2**31 - 1, size=ppo_cfg.episodes_per_update)
        batch = collect_rollouts(pi_net, pi_store, vf_net, vf_store, config, seeds, reward_kind, value_norm)
        compute_advantages(batch, ppo_cfg)
        try:
            ppo_update(batch, pi_net, pi_store, vf_net, vf_store, ppo_cfg, rng, value_norm)
        except FloatingPointError as exc:
            raise TrainingError(f"iteration {it}: {exc}") from exc
        observations += batch.n_decisions
        it += 1
        last = observations + per_update > ppo_cfg.total_observations
        eval_aoi = float("nan")
        if last or it % ppo_cfg.eval_every == 0:
            eval_aoi = evaluate_policy(config, pi_net, pi_store, evals)
            final = eval_aoi
            log.info("iter %d obs %d reward %.3f eval AoI %.3f", it, observations,
                     np.mean(batch.episode_returns), eval_aoi)
        curve.append((observations, float(np.mean(batch.episode_returns)), eval_aoi))

    ckpt = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        ckpt = os.path.join(out_dir, "checkpoint.json")
        save_networks(ckpt, gnn_cfg, pi_store, vf_store,
                      {"reward": reward_kind, "seed": int(seed), "observations": observations})
        write_curve(os.path.join(out_dir, "learning_curve.csv"), curve)
    return TrainResult(ckpt, curve, initial, final, it, pi_store, vf_store)


def write_curve(path, curve):
    with open(path, "w", newline="") as fh:
        fh.write(f"# format={CURVE_FORMAT}\n")
        w = csv.writer(fh)
        w.writerow(["observations", "mean_episode_reward", "eval_aoi"])
        for obs, rew, aoi in curve:
            w.writerow([obs, repr(float(rew)), repr(float(aoi))])
