"""Time the compiled kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py            # both backends in subprocesses
    MFSTACKELBERG_NO_NUMBA=1 python3 benchmarks/bench_kernels.py --single

Each case reports the best of several repeats, after one warm-up call that
absorbs compilation.
"""

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np


def cases():
    from mfstackelberg import kernels
    gen = np.random.default_rng(0)
    B, N, n = 16, 128, 200
    fin = (gen.standard_normal((B, N, 4)), gen.standard_normal((B, N, n)), gen.standard_normal(n),
           gen.standard_normal((B, N, n)) * 0.07, 1.0 / n, 1.0, 0.5)
    x, y = gen.standard_normal((2, 4096, n + 1))
    u = gen.standard_normal((4096, n))
    z = np.array([0.0, -0.5, -0.3, 0.0, -0.5, -0.3])
    coef = np.array([1.0, 0.5, 0.3, 1.0, 1.0, 1.0, 1.0])
    return {
        "unicycle_paths": lambda: kernels.unicycle_paths(*fin),
        "quadratic_cost": lambda: kernels.quadratic_cost(x, y, u, 0.5, 0.3, 1.0, 1.0, 1.0 / n),
        "unicycle_shoot": lambda: kernels.unicycle_shoot(z, coef, 1.0 / n, n),
    }


def run_single(repeat):
    from mfstackelberg import kernels
    out = {"backend": kernels.backend()}
    for name, fn in cases().items():
        fn()
        out[name] = min(timeit.repeat(fn, number=1, repeat=repeat))
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--single", action="store_true", help="time the current backend only")
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if args.single:
        print(json.dumps(run_single(args.repeat)))
        return
    rows = []
    for flag in ("0", "1"):
        env = dict(os.environ, MFSTACKELBERG_NO_NUMBA=flag)
        res = subprocess.run([sys.executable, __file__, "--single", "--repeat", str(args.repeat)],
                             env=env, capture_output=True, text=True, check=True)
        rows.append(json.loads(res.stdout))
    names = [k for k in rows[0] if k != "backend"]
    print(f"{'kernel':<16}" + "".join(f"{r['backend']:>12}" for r in rows) + f"{'speedup':>10}")
    for k in names:
        print(f"{k:<16}" + "".join(f"{r[k] * 1e3:>10.2f}ms" for r in rows) + f"{rows[1][k] / rows[0][k]:>9.1f}x")


if __name__ == "__main__":
    main()
