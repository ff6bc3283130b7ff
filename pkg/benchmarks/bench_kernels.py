"""Time the compiled kernels against the numpy fallback on training-sized inputs.

    python benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Both backends are checked for agreement before timing.
"""
import argparse
import json
import sys
import timeit

import numpy as np

from deptex import _kernels_py
from deptex._backend import compiled


def cases(rng):
    xp = rng.normal(size=(32, 16, 26, 26))
    ho = wo = 24
    cols = rng.normal(size=(32 * ho * wo, 16 * 9))
    pts = rng.normal(size=(500, 10))
    sq = (pts**2).sum(1)
    d2 = np.maximum(sq[:, None] + sq[None] - 2 * pts @ pts.T, 0.0)
    np.fill_diagonal(d2, 0.0)
    P = rng.uniform(size=(500, 500))
    P = P + P.T
    np.fill_diagonal(P, 0.0)
    P /= P.sum()
    Y = rng.normal(size=(500, 2))
    return {
        "im2col 32x16x26x26 k3": ("im2col", (xp, 3, 3, 1, ho, wo)),
        "col2im 32x16x26x26 k3": ("col2im", (cols, 32, 16, 26, 26, 3, 3, 1, ho, wo)),
        "perplexity n=500": ("perplexity_search", (d2, 30.0, 1e-5, 50)),
        "tsne_grad n=500": ("tsne_grad", (P, Y)),
    }


def _first(out):
    return out[0] if isinstance(out, tuple) else out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="also write results to this file")
    args = ap.parse_args(argv)
    fast = compiled()
    if fast is None:
        print("compiled extension not built; run `pip install -e . --no-build-isolation` first", file=sys.stderr)
        return 1
    rng = np.random.default_rng(0)
    rows = []
    print(f"{'kernel':<26}{'python ms':>12}{'cython ms':>12}{'speedup':>10}")
    for label, (name, call_args) in cases(rng).items():
        slow_fn, fast_fn = getattr(_kernels_py, name), getattr(fast, name)
        diff = np.abs(_first(slow_fn(*call_args)) - _first(fast_fn(*call_args))).max()
        if diff > 1e-9:
            raise SystemExit(f"{label}: backends disagree by {diff:.3g}")
        t_py = min(timeit.repeat(lambda: slow_fn(*call_args), number=1, repeat=args.repeat)) * 1e3
        t_cy = min(timeit.repeat(lambda: fast_fn(*call_args), number=1, repeat=args.repeat)) * 1e3
        rows.append({"kernel": label, "python_ms": t_py, "cython_ms": t_cy, "speedup": t_py / t_cy})
        print(f"{label:<26}{t_py:>12.2f}{t_cy:>12.2f}{t_py / t_cy:>9.1f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
