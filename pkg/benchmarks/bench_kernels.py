"""Time the numba kernels against their numpy fallbacks.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]

Kernels are timed in-process on representative inputs (40 agents, a
policy-network layer). A whole episode is timed in two subprocesses, one
per backend, since the backend is fixed at import time.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from aoinet import _kernels

EPISODE = (
    "import time; from aoinet import MissionConfig, run_episode, parse_policy;"
    "cfg = MissionConfig(n_agents=40, task='random_walk');"
    "run_episode(cfg, parse_policy('flood(0.3)'), seed=0);"
    "t = time.perf_counter(); run_episode(cfg, parse_policy('flood(0.3)'), seed=1);"
    "print(time.perf_counter() - t)"
)


def inputs(rng, n=40):
    pos = rng.uniform(0, 1000, (n, 2))
    d = np.linalg.norm(pos[:, None] - pos[None], axis=-1)
    np.fill_diagonal(d, 1.0)
    gain = 1e-4 / d**2
    np.fill_diagonal(gain, 0.0)
    tx = rng.random(n) < 0.3
    ts = rng.integers(0, 500, (n, n))
    state = rng.normal(size=(n, n, 4))
    parent = rng.integers(-1, n, (n, n))
    decoded = np.where(rng.random(n) < 0.5, rng.integers(0, n, n), -1)
    decoded[decoded == np.arange(n)] = -1
    return gain, tx, ts, state, parent, decoded


def bench(fn, repeat):
    fn()
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    if not _kernels.HAVE_NUMBA:
        print("numba unavailable (or disabled); nothing to compare")
        return 1
    rng = np.random.default_rng(0)
    gain, tx, ts, state, parent, decoded = inputs(rng)
    snap = (ts.copy(), state.copy(), parent.copy())
    x, w, b = rng.normal(size=(4000, 192)), rng.normal(size=(192, 64)), rng.normal(size=64)
    values, seg = rng.normal(size=(4000, 64)), rng.integers(0, 4000, 4000)

    cases = [
        ("resolve (40 agents)", lambda: _kernels.resolve(tx, gain, 1e3, 1e-5, 1.26),
         lambda: _kernels.resolve_numpy(tx, gain, 1e3, 1e-5, 1.26)),
        ("merge (40 agents)", lambda: _kernels.merge(ts.copy(), state.copy(), parent.copy(), *snap, decoded),
         lambda: _kernels.merge_numpy(ts.copy(), state.copy(), parent.copy(), *snap, decoded)),
        ("segment_sum (4000x64)", lambda: _kernels.segment_sum(values, seg, 4000),
         lambda: _kernels.segment_sum_numpy(values, seg, 4000)),
        ("affine_rows (4000x192x64)", lambda: _kernels.affine_rows(x, w, b),
         lambda: _kernels.affine_rows_numpy(x, w, b)),
    ]
    print(f"{'kernel':<28}{'numba [ms]':>12}{'numpy [ms]':>12}{'speedup':>10}")
    for name, fast, slow in cases:
        a, c = bench(fast, args.repeat), bench(slow, args.repeat)
        print(f"{name:<28}{a * 1e3:12.3f}{c * 1e3:12.3f}{c / a:10.1f}")

    times = {}
    for label, flag in (("numba", "0"), ("numpy", "1")):
        env = {**os.environ, "AOINET_DISABLE_NUMBA": flag}
        out = subprocess.run([sys.executable, "-c", EPISODE], env=env, capture_output=True, text=True, check=True)
        times[label] = float(out.stdout.strip())
    print(f"{'episode (40 agents, 500 w)':<28}{times['numba'] * 1e3:12.1f}{times['numpy'] * 1e3:12.1f}"
          f"{times['numpy'] / times['numba']:10.1f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
