"""Free-space path loss, SINR and deterministic packet reception."""

from dataclasses import dataclass

import numpy as np

from . import _kernels

SILENT = -1
BROADCAST = -2

# -20*log10(4*pi/c), c in m/s
FSPL_CONSTANT_DB = 147.55


def db_to_linear(db):
    return 10.0 ** (np.asarray(db, dtype=float) / 10.0)


def linear_to_db(x):
    return 10.0 * np.log10(x)


@dataclass
class RadioConfig:
    """Link-budget parameters shared by every agent.

    ``tx_power_dbm`` may be left as ``None``; the scenario then derives it
    from the configured communication range with :func:`power_for_range`.
    """

    center_freq_hz: float = 2.4e9
    noise_dbm: float = -50.0
    sinr_threshold_db: float = 1.0
    tx_power_dbm: float | None = None

    def __post_init__(self):
        if self.center_freq_hz <= 0:
            raise ValueError("center_freq_hz must be positive")

    @property
    def noise_mw(self) -> float:
        return float(db_to_linear(self.noise_dbm))

    @property
    def threshold_linear(self) -> float:
        return float(db_to_linear(self.sinr_threshold_db))

    @property
    def tx_power_mw(self) -> float:
        if self.tx_power_dbm is None:
            raise ValueError("tx_power_dbm is not set")
        return float(db_to_linear(self.tx_power_dbm))


@dataclass
class ReceptionOutcome:
    """``received[i, j]``: j's SINR for i passed; ``decoded[j]``: source decoded by j or -1."""

    received: np.ndarray
    decoded: np.ndarray

    def decoders_of(self, i):
        return np.flatnonzero(self.decoded == i)


def path_loss_db(distance_m, freq_hz):
    d = np.asarray(distance_m, dtype=float)
    if np.any(d <= 0):
        raise ValueError("path loss needs a strictly positive distance")
    out = 20.0 * np.log10(d) + 20.0 * np.log10(freq_hz) - FSPL_CONSTANT_DB
    return float(out) if out.ndim == 0 else out


def channel_gain(distance_m, freq_hz):
    out = 10.0 ** (-np.asarray(path_loss_db(distance_m, freq_hz)) / 10.0)
    return float(out) if out.ndim == 0 else out


def power_for_range(range_m, radio: RadioConfig) -> float:
    """Transmit power (dBm) at which interference-free SINR at ``range_m`` equals the threshold."""
    if range_m <= 0:
        raise ValueError("range must be positive")
    rho = radio.threshold_linear * radio.noise_mw / channel_gain(range_m, radio.center_freq_hz)
    return float(linear_to_db(rho))


def gain_matrix(positions, freq_hz):
    """Pairwise linear gains; the diagonal is zero (no self-link)."""
    positions = np.asarray(positions, dtype=float)
    diff = positions[:, None, :] - positions[None, :, :]
    dist = np.sqrt((diff**2).sum(-1))
    n = len(positions)
    gain = np.zeros((n, n))
    off = ~np.eye(n, dtype=bool)
    if n > 1:
        # coincident agents would make the path loss singular
        gain[off] = channel_gain(np.maximum(dist[off], 1e-3), freq_hz)
    return gain


def sinr(transmitter, receiver, active, positions, radio: RadioConfig) -> float:
    """SINR at ``receiver`` for ``transmitter`` given the set of active transmitters."""
    if receiver == transmitter:
        raise ValueError("receiver must differ from transmitter")
    active = set(active)
    if transmitter not in active:
        raise ValueError("transmitter must be active")
    positions = np.asarray(positions, dtype=float)
    p = radio.tx_power_mw

    def g(a, b):
        return channel_gain(np.linalg.norm(positions[a] - positions[b]), radio.center_freq_hz)

    interference = sum(p * g(k, receiver) for k in sorted(active) if k != transmitter and k != receiver)
    return p * g(transmitter, receiver) / (radio.noise_mw + interference)


def transmitting(plan) -> np.ndarray:
    plan = np.asarray(plan)
    return plan != SILENT


def resolve_receptions(plan, positions=None, radio: RadioConfig = None, gain=None) -> ReceptionOutcome:
    """Resolve one phase of simultaneous transmissions.

    ``plan[i]`` is a target id, ``SILENT`` or ``BROADCAST``. Transmitters
    never receive in the same phase. A precomputed ``gain`` matrix may be
    passed instead of positions.
    """
    tx = transmitting(plan)
    if gain is None:
        gain = gain_matrix(positions, radio.center_freq_hz)
    received, decoded = _kernels.resolve(
        tx, gain, radio.tx_power_mw, radio.noise_mw, radio.threshold_linear
    )
    return ReceptionOutcome(received, decoded)
