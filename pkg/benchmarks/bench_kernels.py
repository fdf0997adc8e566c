"""Compare the compiled kernels with the numpy fallback.

Usage::

    python3 benchmarks/bench_kernels.py            # both backends, side by side
    python3 benchmarks/bench_kernels.py --child    # one backend (used internally)

Each backend runs in its own interpreter because the backend is chosen at
import time (``SPRITZ_PURE_PYTHON=1`` selects the fallback).
"""
import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np


def _best(fn, number, repeat=5):
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def measure():
    from spritz.models import build_cnn2c
    from spritz.tensor import Tensor, kernels, ops

    rng = np.random.default_rng(0)
    x = rng.normal(size=(16, 64, 64, 4))
    cols = kernels.im2col3x3(x, 1, 1, 1, 64, 64)
    pooled = rng.normal(size=(16, 64, 64, 12))
    results = {"backend": kernels.BACKEND}
    results["im2col_ms"] = 1e3 * _best(lambda: kernels.im2col3x3(x, 1, 1, 1, 64, 64), 10)
    results["col2im_ms"] = 1e3 * _best(lambda: kernels.col2im3x3(cols, 16, 64, 64, 4, 1, 1, 1, 64, 64), 10)
    results["maxpool_ms"] = 1e3 * _best(lambda: kernels.maxpool2x2_forward(pooled), 10)

    g = build_cnn2c(0)
    example = rng.uniform(0, 255, size=(1, 64, 64))

    def fwd_bwd():
        xt = Tensor(example.copy(), requires_grad=True)
        g.forward(xt, until="logit")
        ops.binary_cross_entropy(g.taps["logit"], [1], reduction="sum").backward()

    results["cnn2c_fwd_bwd_ms"] = 1e3 * _best(fwd_bwd, 5)
    return results


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--child", action="store_true")
    args = ap.parse_args()
    if args.child:
        print(json.dumps(measure()))
        return
    rows = []
    for pure in ("0", "1"):
        env = dict(os.environ, SPRITZ_PURE_PYTHON=pure)
        out = subprocess.run([sys.executable, __file__, "--child"], env=env, check=True,
                             capture_output=True, text=True).stdout
        rows.append(json.loads(out.strip().splitlines()[-1]))
    keys = [k for k in rows[0] if k != "backend"]
    print(f"{'kernel':<20}" + "".join(f"{r['backend']:>12}" for r in rows) + f"{'ratio':>10}")
    for k in keys:
        a, b = rows[0][k], rows[1][k]
        print(f"{k:<20}{a:>12.3f}{b:>12.3f}{b / a:>10.2f}")


if __name__ == "__main__":
    main()
