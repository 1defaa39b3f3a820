"""The transmission-response engine and whole-episode runner."""

from dataclasses import asdict, dataclass, field

import numpy as np

from .channel import BROADCAST, SILENT, ReceptionOutcome, gain_matrix, resolve_receptions
from .knowledge import TeamKnowledge
from .scenario import (
    AgentState,
    MissionConfig,
    flocking_controls,
    init_positions,
    random_walk_control,
    step_dynamics,
    velocity_variance,
)

TRACE_FORMAT = "aoinet-trace"
TRACE_VERSION = 1


def episode_rngs(seed, n):
    """Independent streams for placement, task noise and each agent's policy."""
    init = np.random.default_rng([seed, 0])
    task = np.random.default_rng([seed, 1])
    agents = [np.random.default_rng([seed, 2, i]) for i in range(n)]
    return init, task, agents


@dataclass
class World:
    config: MissionConfig
    positions: np.ndarray
    velocities: np.ndarray
    knowledge: TeamKnowledge
    radio: object = None
    gain: np.ndarray = None

    def __post_init__(self):
        if self.radio is None:
            self.radio = self.config.link
        if self.gain is None:
            self.refresh_gain()

    @classmethod
    def create(cls, config, positions, velocities=None):
        positions = np.asarray(positions, dtype=float)
        if velocities is None:
            velocities = np.zeros_like(positions)
        return cls(config, positions, np.asarray(velocities, dtype=float), TeamKnowledge(len(positions)))

    @property
    def n(self):
        return len(self.positions)

    def refresh_gain(self):
        self.gain = gain_matrix(self.positions, self.radio.center_freq_hz)

    def states(self):
        return np.concatenate([self.positions, self.velocities], axis=1)


@dataclass
class WindowReport:
    t: int
    plan: np.ndarray
    outcome: ReceptionOutcome
    response_plan: np.ndarray
    response_outcome: ReceptionOutcome
    aoi: float
    velvar: float = 0.0

    def summary(self):
        return {
            "t": int(self.t),
            "plan": self.plan.tolist(),
            "decoded": self.outcome.decoded.tolist(),
            "response_plan": self.response_plan.tolist(),
            "response_decoded": self.response_outcome.decoded.tolist(),
            "aoi": float(self.aoi),
            "velvar": float(self.velvar),
        }


def sanitize_plan(plan, n):
    """Self-targets and invalid ids become silent."""
    plan = np.asarray(plan, dtype=np.int64).copy()
    ids = np.arange(n)
    bad = (plan == ids) | (plan >= n) | (plan < BROADCAST)
    plan[bad] = SILENT
    return plan


def response_plan(plan, decoded):
    """Designated recipients that decoded their transmitter answer it."""
    n = len(plan)
    resp = np.full(n, SILENT, dtype=np.int64)
    src = np.asarray(decoded)
    ok = src >= 0
    ok[ok] = plan[src[ok]] == np.flatnonzero(ok)
    resp[ok] = src[ok]
    return resp


def run_window(world: World, policy, t, rngs) -> WindowReport:
    """Execute one transmission-response window in place."""
    n = world.n
    kn = world.knowledge
    kn.observe_all(world.states(), t)
    velvar = velocity_variance(world.velocities)
    radio = world.radio

    plan = sanitize_plan(policy.plan(readonly_tables(kn), t, rngs), n)
    first = resolve_receptions(plan, radio=radio, gain=world.gain)
    kn.merge_phase(first.decoded)

    if policy.floods:
        second_plan = sanitize_plan(policy.plan(readonly_tables(kn), t, rngs), n)
        second_plan[second_plan >= 0] = SILENT
    else:
        second_plan = response_plan(plan, first.decoded)
    second = resolve_receptions(second_plan, radio=radio, gain=world.gain)
    kn.merge_phase(second.decoded)

    kn.record_attempts(plan, t)
    return WindowReport(t, plan, first, second_plan, second, kn.mean_aoi(t), velvar)


def readonly_tables(kn: TeamKnowledge):
    tables = kn.tables()
    for tab in tables:
        for a in (tab.ts, tab.state, tab.parent, tab.last_contact):
            a.flags.writeable = False
    return tables


def advance(world: World, task_rng):
    """Apply one window of task dynamics (static teams do not move)."""
    cfg = world.config
    if cfg.task == "static":
        return
    if cfg.task == "random_walk":
        u = random_walk_control(task_rng, cfg.a_max, world.n)
    else:
        u = flocking_controls(world.velocities, world.knowledge.ts, world.knowledge.state)
    nxt = step_dynamics(AgentState(world.positions, world.velocities), u, cfg.window_s, cfg)
    world.positions, world.velocities = nxt.position, nxt.velocity
    world.refresh_gain()


@dataclass
class EpisodeTrace:
    config: dict
    policy: str
    seed: int
    windows: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)

    def records(self):
        yield {
            "format": TRACE_FORMAT,
            "version": TRACE_VERSION,
            "kind": "header",
            "policy": self.policy,
            "seed": int(self.seed),
            "config": self.config,
        }
        for w in self.windows:
            yield {"kind": "window", **w}
        yield {"kind": "metrics", **self.metrics}


def episode_metrics(windows):
    if not windows:
        return {"mean_aoi": 0.0, "mean_velvar": 0.0, "initial_velvar": 0.0, "final_velvar": 0.0,
                "n_windows": 0, "flags": ["aoi_undefined"]}
    aoi = np.array([w["aoi"] for w in windows])
    vv = np.array([w["velvar"] for w in windows])
    return {
        "mean_aoi": float(aoi.mean()),
        "mean_velvar": float(vv.mean()),
        "initial_velvar": float(vv[0]),
        "final_velvar": float(vv[-1]),
        "n_windows": len(windows),
        "flags": [],
    }


def config_dict(config: MissionConfig):
    return asdict(config)


def start_episode(config: MissionConfig, policy, seed=None):
    """Place the team and bind the policy; returns ``(world, policy, task_rng, agent_rngs)``."""
    seed = config.seed if seed is None else seed
    init_rng, task_rng, agent_rngs = episode_rngs(seed, config.n_agents)
    pos, vel, _ = init_positions(config, init_rng)
    world = World.create(config, pos, vel)
    return world, policy.bind(config, pos), task_rng, agent_rngs


def run_episode(config: MissionConfig, policy, task=None, seed=None, on_window=None) -> EpisodeTrace:
    """Run ``config.n_windows`` windows; ``seed`` defaults to ``config.seed``."""
    if task is not None and task != config.task:
        from dataclasses import replace

        config = replace(config, task=task)
    seed = config.seed if seed is None else int(seed)
    world, bound, task_rng, agent_rngs = start_episode(config, policy, seed)
    trace = EpisodeTrace(config_dict(config.with_seed(seed)), repr(policy), seed)
    for t in range(1, config.n_windows + 1):
        report = run_window(world, bound, t, agent_rngs)
        trace.windows.append(report.summary())
        if on_window is not None:
            on_window(world, report)
        advance(world, task_rng)
    trace.metrics = episode_metrics(trace.windows)
    return trace
