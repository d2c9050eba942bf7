"""Compare the numba kernels with their pure-numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--runs 5] [--out kernels.json]

Both implementations are timed in the same process; DSSEP_DISABLE_NUMBA only
changes which one the package dispatches to, so it does not affect this
script.
"""

import argparse
import json
import sys

from dssep import bench, kernels


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--runs", type=int, default=5)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default=None, help="optional JSON output path")
    args = parser.parse_args(argv)

    report = bench.kernel_benchmark(runs=args.runs, seed=args.seed)
    print(f"dispatching backend: {kernels.BACKEND}")
    print(f"{'kernel':<16}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}{'max diff':>11}")
    for name, r in report.items():
        numba_ms = f"{1e3 * r['numba_s']:10.2f}" if "numba_s" in r else f"{'-':>10}"
        speed = f"{r['speedup']:9.1f}" if "speedup" in r else f"{'-':>9}"
        diff = f"{r['max_abs_diff']:11.1e}" if "max_abs_diff" in r else f"{'-':>11}"
        print(f"{name:<16}{1e3 * r['numpy_s']:10.2f}{numba_ms}{speed}{diff}")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump({"backend": kernels.BACKEND, "kernels": report}, fh, indent=2, sort_keys=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
