"""Compiled vs pure-Python kernels, both convolution paths, on the preset sweep.

    python benchmarks/compare_backends.py [--repeats 3] [--dtype float32]

Prints one row per (case, path) with the time on each backend and the ratio.
"""
import argparse

import numpy as np

from fmri4d import kernels
from fmri4d.bench import DEFAULT_SWEEP, parse_case, run_bench


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--dtype", default="float32", choices=("float32", "float64"))
    ap.add_argument("--case", action="append", help=f"preset or case spec (default: {', '.join(DEFAULT_SWEEP)})")
    args = ap.parse_args(argv)
    if "cython" not in kernels.BACKENDS:
        print("compiled kernels are not available; only the python backend can run")
    cases = [parse_case(c) for c in (args.case or DEFAULT_SWEEP)]
    rows = run_bench(cases, dtype=np.dtype(args.dtype), repeats=args.repeats)
    by = {(r.case.name, r.backend): r for r in rows}
    print(f"{'case':<12} {'path':<7} {'python_s':>10} {'cython_s':>10} {'py/cy':>7} {'equal':>6}")
    for case in cases:
        py, cy = by.get((case.name, "python")), by.get((case.name, "cython"))
        for path in ("direct", "im2col"):
            tp = getattr(py, f"{path}_s")
            tc = getattr(cy, f"{path}_s") if cy else float("nan")
            ok = all(r.equal for r in (py, cy) if r)
            print(f"{case.name:<12} {path:<7} {tp:>10.5f} {tc:>10.5f} {tp / tc:>7.2f} {int(ok):>6}")


if __name__ == "__main__":
    main()
