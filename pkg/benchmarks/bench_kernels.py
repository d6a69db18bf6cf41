"""Time the numba and numpy kernel backends on network-sized tensors.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--csv out.csv]

Each row is the best of ``--repeat`` runs after one warm-up call (which also
absorbs numba's JIT compile).  Both backends must agree to 1e-10 or the
script exits non-zero.
"""

import argparse
import csv
import sys
import timeit

import numpy as np

from cs3d import kernels


def cases(rng):
    x = rng.standard_normal((8, 16, 16, 34, 34))  # one padded CS3D stage input
    w_dense = rng.standard_normal((32, 16, 3, 3, 3))
    w_dw_t = rng.standard_normal((16, 1, 3, 1, 1))
    w_dw_s = rng.standard_normal((16, 1, 1, 3, 3))
    y_dense = kernels.dense_conv_forward(x, w_dense, (1, 1, 1))
    gy = rng.standard_normal(y_dense.shape)
    pool_in = rng.standard_normal((8, 32, 16, 32, 32))
    return {
        "dense_conv fwd 3x3x3": lambda: kernels.dense_conv_forward(x, w_dense, (1, 1, 1)),
        "dense_conv bwd 3x3x3": lambda: kernels.dense_conv_backward(x, w_dense, (1, 1, 1), gy),
        "dw_conv fwd 3x1x1": lambda: kernels.dw_conv_forward(x, w_dw_t, (1, 1, 1)),
        "dw_conv fwd 1x3x3": lambda: kernels.dw_conv_forward(x, w_dw_s, (1, 1, 1)),
        "maxpool fwd 1x2x2": lambda: kernels.maxpool_forward(pool_in, (1, 2, 2), (1, 2, 2)),
        "avgpool fwd 1x2x2": lambda: kernels.avgpool_forward(pool_in, (1, 2, 2), (1, 2, 2)),
    }


def _first(out):
    return out[0] if isinstance(out, tuple) else out


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--csv", help="also write the table here")
    args = ap.parse_args(argv)
    if not kernels.HAVE_NUMBA:
        print("numba is not installed; nothing to compare", file=sys.stderr)
        return 1
    rows, bad = [], []
    for name, fn in cases(np.random.default_rng(0)).items():
        timing, outputs = {}, {}
        for backend in ("numpy", "numba"):
            kernels.set_backend(backend)
            outputs[backend] = _first(fn())
            timing[backend] = min(timeit.repeat(fn, number=1, repeat=args.repeat))
        diff = float(np.max(np.abs(outputs["numpy"] - outputs["numba"])))
        if diff > 1e-10:
            bad.append(name)
        rows.append((name, timing["numpy"] * 1e3, timing["numba"] * 1e3, timing["numpy"] / timing["numba"], diff))
    print(f"{'kernel':<22} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8} {'max diff':>9}")
    for name, t_np, t_nb, speedup, diff in rows:
        print(f"{name:<22} {t_np:>10.2f} {t_nb:>10.2f} {speedup:>7.2f}x {diff:>9.1e}")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["kernel", "numpy_ms", "numba_ms", "speedup", "max_abs_diff"])
            out.writerows(rows)
    if bad:
        print(f"backends disagree on: {', '.join(bad)}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
