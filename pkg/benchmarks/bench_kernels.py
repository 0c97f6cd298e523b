"""Compare the compiled and pure-Python kernel backends.

    python3 benchmarks/bench_kernels.py [--n 4096] [--repeat 3]

Prints one line per (kernel, backend) with the best wall time and the
speedup over the fallback, after checking both backends agree.
"""

import argparse
import time

import numpy as np

from npdenoise import kernels, spatial
from npdenoise.planefit import PlaneFitParams, build_neighbor_graph, _all_moments


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t)
    return min(times), out


def sphere(n, seed=0):
    v = np.random.default_rng(seed).normal(size=(n, 3))
    return 0.5 * v / np.linalg.norm(v, axis=1, keepdims=True)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=4096)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)

    backends = kernels.backends()
    if len(backends) < 2:
        print("compiled backend not available; only the fallback is installed")
    pts = sphere(args.n)
    queries = sphere(args.n, seed=1)
    grid = spatial.build_grid(pts)
    params = PlaneFitParams().resolve(pts)
    rgrid = spatial.build_grid(pts, cell=params.eps)
    _, cov = _all_moments(pts, build_neighbor_graph(pts, params))

    cases = {
        "knn k=1": lambda b: spatial.knn_query(grid, queries, 1, backend=b),
        "knn k=8": lambda b: spatial.knn_query(grid, queries, 8, backend=b),
        "radius": lambda b: spatial.radius_query(rgrid, pts, params.eps, params.max_k, backend=b),
        "eig3": lambda b: b.eig3(cov),
    }
    print(f"n={args.n} repeat={args.repeat}")
    for name, fn in cases.items():
        results = {}
        for b in backends:
            results[b.BACKEND] = best_of(lambda: fn(b), args.repeat)
        outs = [r[1] for r in results.values()]
        if name == "eig3":
            same = all(np.allclose(np.sort(o[0], 1), np.sort(outs[0][0], 1), atol=1e-12) for o in outs)
        else:
            same = all(all(np.array_equal(x, y) for x, y in zip(o, outs[0])) for o in outs)
        base = results.get("python", (None,))[0]
        for label, (t, _) in results.items():
            speed = f"{base / t:8.1f}x" if base else ""
            print(f"{name:10s} {label:7s} {t * 1e3:10.2f} ms {speed}  agree={same}")


if __name__ == "__main__":
    main()
