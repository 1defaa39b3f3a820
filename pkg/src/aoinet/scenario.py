"""Mission configuration, point-mass kinematics and task controllers."""

from dataclasses import dataclass, field, replace
import logging
import math

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .channel import RadioConfig, power_for_range

log = logging.getLogger(__name__)

TASKS = ("static", "random_walk", "flocking")

# 40 agents per square kilometre
REFERENCE_AGENTS = 40
REFERENCE_SIDE_M = 1000.0


class InfeasiblePlacement(RuntimeError):
    pass


@dataclass
class MissionConfig:
    """One mission. Fields left as ``None`` are derived from the others.

    ``side_length_m`` defaults to the side holding 40 agents per km^2,
    ``v_max`` to ``velocity_ratio * side / mission duration`` and the radio
    power to the level whose interference-free range is
    ``comm_range_ratio * side``.
    """

    n_agents: int = 40
    side_length_m: float | None = None
    n_windows: int = 500
    window_s: float = 0.1
    comm_range_ratio: float = 0.25
    velocity_ratio: float = 0.15
    v_max: float | None = None
    a_max: float = 20.0
    radio: RadioConfig = field(default_factory=RadioConfig)
    seed: int = 0
    task: str = "static"
    connectivity_range_ratio: float = 0.25
    max_resample: int = 10_000

    def __post_init__(self):
        if isinstance(self.radio, dict):
            self.radio = RadioConfig(**self.radio)
        if self.n_agents < 1:
            raise ValueError("n_agents must be >= 1")
        if self.n_windows < 0:
            raise ValueError("n_windows must be >= 0")
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; expected one of {TASKS}")
        for name in ("window_s", "comm_range_ratio", "velocity_ratio", "connectivity_range_ratio"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.side_length_m is not None and not self.side_length_m > 0:
            raise ValueError("side_length_m must be positive")
        if self.v_max is not None and not self.v_max > 0:
            raise ValueError("v_max must be positive")
        if self.a_max < 0:
            raise ValueError("a_max must be non-negative")
        if self.max_resample < 1:
            raise ValueError("max_resample must be >= 1")

    @property
    def side(self) -> float:
        if self.side_length_m is not None:
            return float(self.side_length_m)
        return REFERENCE_SIDE_M * math.sqrt(self.n_agents / REFERENCE_AGENTS)

    @property
    def p_max(self) -> float:
        return self.side / 2.0

    @property
    def duration_s(self) -> float:
        return max(self.n_windows, 1) * self.window_s

    @property
    def vmax(self) -> float:
        if self.v_max is not None:
            return float(self.v_max)
        return self.velocity_ratio * self.side / self.duration_s

    @property
    def comm_range_m(self) -> float:
        return self.comm_range_ratio * self.side

    @property
    def connectivity_range_m(self) -> float:
        return self.connectivity_range_ratio * self.side

    @property
    def link(self) -> RadioConfig:
        """The radio with transmit power resolved."""
        if self.radio.tx_power_dbm is not None:
            return self.radio
        return replace(self.radio, tx_power_dbm=power_for_range(self.comm_range_m, self.radio))

    def with_seed(self, seed):
        return replace(self, seed=int(seed))


@dataclass
class AgentState:
    """Position and velocity; arrays may be ``(2,)`` or batched ``(n, 2)``."""

    position: np.ndarray
    velocity: np.ndarray

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float)
        self.velocity = np.asarray(self.velocity, dtype=float)

    def as_vector(self):
        return np.concatenate([self.position, self.velocity], axis=-1)


def step_dynamics(state: AgentState, control, dt, config: MissionConfig = None, *, p_max=None, v_max=None):
    """Advance first-order point-mass dynamics by ``dt``.

    Velocity is clipped to ``[-v_max, v_max]`` per component, then positions
    leaving the square are mirrored back and the offending velocity
    component is turned inward.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if config is not None:
        p_max = config.p_max if p_max is None else p_max
        v_max = config.vmax if v_max is None else v_max
    p = state.position + state.velocity * dt
    v = np.clip(state.velocity + np.asarray(control, dtype=float) * dt, -v_max, v_max)
    hi = p > p_max
    lo = p < -p_max
    p = np.where(hi, 2.0 * p_max - p, p)
    p = np.where(lo, -2.0 * p_max - p, p)
    v = np.where(hi, -np.abs(v), v)
    v = np.where(lo, np.abs(v), v)
    # a step longer than the whole square cannot be mirrored once
    p = np.clip(p, -p_max, p_max)
    return AgentState(p, v)


def random_walk_control(rng, a_max, n=None):
    """Zero-mean normal acceleration with standard deviation ``a_max / 3``."""
    size = (2,) if n is None else (n, 2)
    if a_max == 0:
        return np.zeros(size)
    return rng.normal(0.0, a_max / 3.0, size=size)


def flocking_control(self_state: AgentState, table, t=None):
    """Mean velocity difference to every teammate observed since the start."""
    seen = table.ts > 0
    seen[table.owner] = False
    if not seen.any():
        return np.zeros(2)
    return (table.state[seen, 2:4] - self_state.velocity).mean(axis=0)


def flocking_controls(velocities, team_ts, team_state):
    """Batched :func:`flocking_control` over all agents' tables."""
    n = len(velocities)
    seen = team_ts > 0
    seen[np.arange(n), np.arange(n)] = False
    counts = seen.sum(axis=1)
    diff = team_state[:, :, 2:4] - velocities[:, None, :]
    total = (diff * seen[..., None]).sum(axis=1)
    out = np.zeros((n, 2))
    has = counts > 0
    out[has] = total[has] / counts[has, None]
    return out


def velocity_variance(velocities) -> float:
    v = np.asarray(velocities, dtype=float)
    if len(v) == 0:
        raise ValueError("velocity_variance needs at least one agent")
    return float(((v - v.mean(axis=0)) ** 2).sum(axis=1).mean())


def is_connected(positions, range_m) -> bool:
    positions = np.asarray(positions, dtype=float)
    n = len(positions)
    if n <= 1:
        return True
    d2 = ((positions[:, None, :] - positions[None, :, :]) ** 2).sum(-1)
    adj = csr_matrix(d2 <= range_m * range_m)
    n_comp, _ = connected_components(adj, directed=False)
    return n_comp == 1


def init_positions(config: MissionConfig, rng):
    """Uniform placement, resampled until the disk graph is connected.

    Returns ``(positions, velocities, attempts)``.
    """
    n, p = config.n_agents, config.p_max
    for attempt in range(1, config.max_resample + 1):
        pos = rng.uniform(-p, p, size=(n, 2))
        if is_connected(pos, config.connectivity_range_m):
            break
    else:
        raise InfeasiblePlacement(
            f"no connected placement of {n} agents in {config.max_resample} draws "
            f"(side {config.side:.1f} m, range {config.connectivity_range_m:.1f} m)"
        )
    if config.task == "flocking":
        vel = rng.uniform(-config.vmax, config.vmax, size=(n, 2))
    else:
        vel = np.zeros((n, 2))
    if attempt > 1:
        log.debug("placement accepted after %d draws", attempt)
    return pos, vel, attempt
