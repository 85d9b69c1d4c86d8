"""Time the numpy and numba paths of the hot kernels.

    python3 benchmarks/bench_kernels.py --sizes 10,50,200 --steps 200

Timings are the best of ``--repeats`` runs; the numba path is called once
before timing so compilation is excluded. ``euler_sweep`` integrates
``--steps`` steps in one call, the other kernels are called ``--steps``
times.
"""
import argparse
import json

from flockctl import _jit
from flockctl.harness import bench


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", default="10,50,200", help="comma-separated agent counts")
    ap.add_argument("--dim", type=int, default=2)
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--json", help="also write the rows to this file")
    args = ap.parse_args(argv)
    sizes = tuple(int(s) for s in args.sizes.split(","))
    rows = bench(sizes, args.dim, args.steps, args.repeats)
    if not _jit.HAVE_NUMBA:
        print("numba not installed: numba column is NaN")
    print(f"{'kernel':<14} {'N':>5} {'numpy [s]':>11} {'numba [s]':>11} {'speedup':>8}")
    for r in rows:
        print(f"{r['kernel']:<14} {r['N']:>5} {r['numpy']:>11.4g} {r['numba']:>11.4g} {r['speedup']:>7.1f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)
    return rows


if __name__ == "__main__":
    main()
