"""Hot inner loops of the protocol engine and the GNN aggregation.

Every kernel exists twice: a numba ``@njit`` version and a pure-numpy
version with identical floating-point operation order, so both paths give
bit-identical results. The numba path is used when numba imports and the
environment variable ``AOINET_DISABLE_NUMBA`` is unset (or ``0``).
"""

import os

import numpy as np

_DISABLED = os.environ.get("AOINET_DISABLE_NUMBA", "0").lower() not in ("", "0", "false", "no")

try:
    if _DISABLED:
        raise ImportError("numba disabled by AOINET_DISABLE_NUMBA")
    from numba import njit

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False


# ---------------------------------------------------------------------------
# pure numpy
# ---------------------------------------------------------------------------

def resolve_numpy(tx, gain, power_mw, noise_mw, threshold):
    """SINR reception for one phase.

    ``tx`` is a bool mask of transmitting agents, ``gain[i, j]`` the linear
    channel gain from i to j. Returns ``(received, decoded)`` where
    ``received[i, j]`` says j's SINR for i clears the threshold and
    ``decoded[j]`` is the single source j decodes (-1 for none).
    """
    n = tx.shape[0]
    signal = np.zeros((n, n))
    total = np.zeros(n)
    for i in np.flatnonzero(tx):
        signal[i] = power_mw * gain[i]
        total += signal[i]
    sinr = signal / (noise_mw + (total[None, :] - signal))
    valid = tx[:, None] & ~tx[None, :]
    np.fill_diagonal(valid, False)
    received = valid & (sinr >= threshold)
    masked = np.where(received, sinr, -1.0)
    decoded = np.argmax(masked, axis=0).astype(np.int64)
    decoded[~received.any(axis=0)] = -1
    return received, decoded


def merge_numpy(ts, state, parent, snap_ts, snap_state, snap_parent, decoded):
    """Apply every decode of one phase in place (strictly-newer rule).

    Receivers merge the sender's table as it was at the start of the phase
    (``snap_*``). A record taken directly from its owner gets the receiver
    as parent.
    """
    rcv = np.flatnonzero(decoded >= 0)
    if rcv.size == 0:
        return 0
    src = decoded[rcv]
    newer = snap_ts[src] > ts[rcv]
    ts[rcv] = np.where(newer, snap_ts[src], ts[rcv])
    state[rcv] = np.where(newer[..., None], snap_state[src], state[rcv])
    par = np.where(newer, snap_parent[src], parent[rcv])
    rows = np.arange(rcv.size)
    par[rows, src] = np.where(newer[rows, src], rcv, par[rows, src])
    parent[rcv] = par
    return int(newer.sum())


def affine_rows_numpy(x, w, b):
    """``x @ w + b`` accumulated over inputs in a fixed order.

    Each output row depends only on its own input row, bit for bit,
    whatever the batch it sits in (BLAS gives no such guarantee).
    """
    out = np.empty((x.shape[0], w.shape[1]))
    out[:] = b
    for k in range(x.shape[1]):
        out += x[:, k : k + 1] * w[k]
    return out


def segment_sum_numpy(values, segments, n_segments):
    out = np.zeros((n_segments, values.shape[1]))
    np.add.at(out, segments, values)
    return out


# ---------------------------------------------------------------------------
# numba
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def _resolve_nb(tx, gain, power_mw, noise_mw, threshold):
        n = tx.shape[0]
        signal = np.zeros((n, n))
        total = np.zeros(n)
        for i in range(n):
            if tx[i]:
                for j in range(n):
                    signal[i, j] = power_mw * gain[i, j]
                    total[j] += signal[i, j]
        received = np.zeros((n, n), dtype=np.bool_)
        decoded = np.full(n, -1, dtype=np.int64)
        for j in range(n):
            if tx[j]:
                continue
            best = -1.0
            for i in range(n):
                if not tx[i] or i == j:
                    continue
                s = signal[i, j] / (noise_mw + (total[j] - signal[i, j]))
                if s >= threshold:
                    received[i, j] = True
                    if s > best:
                        best = s
                        decoded[j] = i
        return received, decoded

    @njit(cache=True)
    def _merge_nb(ts, state, parent, snap_ts, snap_state, snap_parent, decoded):
        n = ts.shape[0]
        d = state.shape[2]
        count = 0
        for r in range(n):
            s = decoded[r]
            if s < 0:
                continue
            for k in range(n):
                if snap_ts[s, k] > ts[r, k]:
                    ts[r, k] = snap_ts[s, k]
                    for c in range(d):
                        state[r, k, c] = snap_state[s, k, c]
                    if k == s:
                        parent[r, k] = r
                    else:
                        parent[r, k] = snap_parent[s, k]
                    count += 1
        return count

    @njit(cache=True)
    def _segment_sum_nb(values, segments, n_segments):
        out = np.zeros((n_segments, values.shape[1]))
        for e in range(values.shape[0]):
            g = segments[e]
            for c in range(values.shape[1]):
                out[g, c] += values[e, c]
        return out

    @njit(cache=True)
    def _affine_rows_nb(x, w, b):
        n, d = x.shape
        m = w.shape[1]
        out = np.empty((n, m))
        for i in range(n):
            for j in range(m):
                out[i, j] = b[j]
            for k in range(d):
                xv = x[i, k]
                for j in range(m):
                    out[i, j] += xv * w[k, j]
        return out

    def affine_rows(x, w, b):
        return _affine_rows_nb(np.ascontiguousarray(x, dtype=np.float64), w, b)

    def resolve(tx, gain, power_mw, noise_mw, threshold):
        return _resolve_nb(tx, gain, float(power_mw), float(noise_mw), float(threshold))

    def merge(ts, state, parent, snap_ts, snap_state, snap_parent, decoded):
        return int(_merge_nb(ts, state, parent, snap_ts, snap_state, snap_parent, decoded))

    def segment_sum(values, segments, n_segments):
        return _segment_sum_nb(np.ascontiguousarray(values), segments, int(n_segments))

else:
    affine_rows = affine_rows_numpy
    resolve = resolve_numpy
    merge = merge_numpy
    segment_sum = segment_sum_numpy


BACKEND = "numba" if HAVE_NUMBA else "numpy"
