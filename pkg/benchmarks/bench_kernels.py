"""Numba vs numpy timing for the tridiagonal theta-scheme march.

The backend is fixed at import, so each backend runs in its own
subprocess with VANISHCOST_DISABLE_NUMBA set or unset.

    python benchmarks/bench_kernels.py [--repeat 5] [--sizes 200,800,3200]
"""

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np


def _problem(n, k, steps, seed=0):
    rng = np.random.default_rng(seed)
    h = 2.0 / n
    eps = 0.05
    v = rng.uniform(-1, 1, n + 1)
    # upwind advection-diffusion bands, zero-flux ends
    lo = np.zeros(n)
    di = np.zeros(n)
    up = np.zeros(n)
    for i in range(n):
        if i > 0:
            lo[i] = eps / h**2 + max(v[i], 0.0) / h
            di[i] -= eps / h**2 + max(-v[i], 0.0) / h
        if i < n - 1:
            up[i] = eps / h**2 + max(-v[i + 1], 0.0) / h
            di[i] -= eps / h**2 + max(v[i + 1], 0.0) / h
    y0 = rng.standard_normal((n, k))
    return lo, di, up, y0, 1.0 / steps


def worker(sizes, k, steps, repeat):
    from vanishcost.kernels import BACKEND, march_tridiag

    out = {"backend": BACKEND, "rows": []}
    for n in sizes:
        lo, di, up, y0, dt = _problem(n, k, steps)
        t = time.perf_counter()
        first = march_tridiag(lo, di, up, 0.5, dt, y0, steps)
        warm = time.perf_counter() - t
        best = np.inf
        for _ in range(repeat):
            t = time.perf_counter()
            march_tridiag(lo, di, up, 0.5, dt, y0, steps)
            best = min(best, time.perf_counter() - t)
        out["rows"].append({"n": n, "first": warm, "best": best, "checksum": float(np.sum(first[-1] ** 2))})
    return out


def run_backend(disable, args):
    env = dict(os.environ)
    if disable:
        env["VANISHCOST_DISABLE_NUMBA"] = "1"
    else:
        env.pop("VANISHCOST_DISABLE_NUMBA", None)
    cmd = [sys.executable, __file__, "--worker", "--sizes", args.sizes, "--k", str(args.k), "--steps", str(args.steps), "--repeat", str(args.repeat)]
    res = subprocess.run(cmd, env=env, capture_output=True, text=True, check=True)
    return json.loads(res.stdout.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--sizes", default="200,800,3200")
    ap.add_argument("--k", type=int, default=4, help="right-hand sides per march")
    ap.add_argument("--steps", type=int, default=400)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--worker", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args()
    sizes = [int(s) for s in args.sizes.split(",")]
    if args.worker:
        print(json.dumps(worker(sizes, args.k, args.steps, args.repeat)))
        return
    nb = run_backend(False, args)
    npy = run_backend(True, args)
    print(f"march_tridiag, theta=0.5, {args.steps} steps, {args.k} right-hand sides, best of {args.repeat}")
    print(f"{'n':>6} {nb['backend']:>12} {npy['backend']:>12} {'speedup':>8} {'rel.diff':>10}")
    for a, b in zip(nb["rows"], npy["rows"]):
        diff = abs(a["checksum"] - b["checksum"]) / abs(b["checksum"])
        print(f"{a['n']:>6} {a['best'] * 1e3:>10.2f}ms {b['best'] * 1e3:>10.2f}ms {b['best'] / a['best']:>8.1f} {diff:>10.1e}")
    if nb["backend"] != "numba":
        print("note: numba is not importable here, both columns ran the numpy path")


if __name__ == "__main__":
    main()
