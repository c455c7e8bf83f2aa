"""Time the numba and numpy flavours of each hot kernel on desk-scale inputs.

    python benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

The first numba call (compilation, or cache load) is excluded from timing.
"""

import argparse
import json
import time

import numpy as np

from prismsurv import _jit
from prismsurv import kernels as K


def _cox_inputs(rng, n=400, p=48):
    t = np.sort(rng.integers(1, 120, size=n).astype(float))[::-1].copy()
    X = rng.normal(size=(n, p))
    e = rng.integers(0, 2, size=n)
    grp_end = np.empty(n, dtype=np.int64)
    i = 0
    while i < n:
        j = i
        while j + 1 < n and t[j + 1] == t[i]:
            j += 1
        grp_end[i:j + 1] = j
        i = j + 1
    return X @ rng.normal(scale=0.1, size=p), X, e, grp_end


def cases(rng):
    n = 400
    E = rng.normal(size=(64, 41))
    binary = np.zeros(41, dtype=bool)
    binary[::3] = True
    E[:, binary] = rng.integers(0, 2, size=(64, binary.sum()))
    return {
        "farneback_update": (rng.normal(size=(96, 96, 5)), rng.normal(size=(96, 96, 5)),
                             rng.normal(scale=2.0, size=(96, 96, 2))),
        "concordance": (rng.exponential(30, n), rng.integers(0, 2, n), rng.normal(size=n)),
        "cox_derivs": _cox_inputs(rng),
        "gower_matrix": (E, binary, np.ptp(E, axis=0)),
        "mine_triplets": (rng.random((24, 24)), 0.05),
        "kde_reflect": (np.linspace(0, 1, 256), rng.random(300), 0.05),
    }


def bench(fn, args, repeat):
    fn(*args)
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json")
    a = ap.parse_args(argv)
    if not _jit.HAVE_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")
    rows = []
    for name, args in cases(np.random.default_rng(0)).items():
        nb, npf = K.KERNELS[name]
        t_nb, t_np = bench(nb, args, a.repeat), bench(npf, args, a.repeat)
        rows.append({"kernel": name, "numba_ms": 1e3 * t_nb, "numpy_ms": 1e3 * t_np, "speedup": t_np / t_nb})
    print(f"{'kernel':18s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}")
    for r in rows:
        print(f"{r['kernel']:18s} {r['numba_ms']:10.3f} {r['numpy_ms']:10.3f} {r['speedup']:8.2f}")
    print(f"dispatch in this process: {'numba' if _jit.USE_NUMBA else 'numpy'}")
    if a.json:
        with open(a.json, "w") as fh:
            json.dump(rows, fh, indent=1)


if __name__ == "__main__":
    main()
