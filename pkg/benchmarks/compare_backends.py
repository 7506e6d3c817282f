"""Compiled kernels against the numpy fallback.

Times each hot kernel on shapes taken from the width-1.35 network, then
one inference and one training step of a small network end to end. Both
backends run single-threaded on identical inputs; outputs are checked for
agreement before anything is timed.

    python3 benchmarks/compare_backends.py [--reps 20] [--json]
"""

from __future__ import annotations

import argparse
import json
import time

import numpy as np

from branchycsi import kernels
from branchycsi.nn import build_branchy_ghostnet, to_model_input
from branchycsi.runtime import limit_threads
from branchycsi.tensor import no_grad
from branchycsi.train.loss import joint_loss


def median_ms(fn, reps: int) -> float:
    fn()
    times = []
    for _ in range(reps):
        t0 = time.perf_counter_ns()
        fn()
        times.append(time.perf_counter_ns() - t0)
    return float(np.median(times)) / 1e6


def kernel_cases(rng):
    """(name, builder) pairs; builder(impl) returns a zero-argument call and its output array."""
    N, C, H, W = 2, 48, 59, 75
    x = rng.standard_normal((N, C, H, W)).astype(np.float32)
    w3 = rng.standard_normal((C, 3, 3)).astype(np.float32)
    w5 = rng.standard_normal((C, 5, 5)).astype(np.float32)
    gy = rng.standard_normal((N, C, H, W)).astype(np.float32)
    gy2 = rng.standard_normal((N, C, 30, 38)).astype(np.float32)
    scale = rng.standard_normal(C).astype(np.float32)
    shift = rng.standard_normal(C).astype(np.float32)
    gamma, beta = rng.standard_normal(C), rng.standard_normal(C)
    cols_shape = (N, 16 * 9, H * W)
    xs = np.ascontiguousarray(x[:, :16])
    cols_in = rng.standard_normal(cols_shape).astype(np.float32)

    def dw3(k):
        out = np.empty_like(x)
        return (lambda: k.dw_forward(x, w3, 1, 1, 1, out)), out

    def dw5s2(k):
        out = np.empty((N, C, 30, 38), np.float32)
        return (lambda: k.dw_forward(x, w5, 2, 2, 1, out)), out

    def dw_bi(k):
        gx = np.zeros_like(x)
        return (lambda: (gx.fill(0), k.dw_backward_input(gy, w3, 1, 1, 1, gx))), gx

    def dw_bw(k):
        gw = np.empty((C, 5, 5), np.float32)
        return (lambda: k.dw_backward_weight(x, gy2, 2, 2, 1, gw)), gw

    def i2c(k):
        cols = np.empty(cols_shape, np.float32)
        return (lambda: k.im2col(xs, 3, 3, 1, 1, H, W, cols)), cols

    def c2i(k):
        gx = np.zeros_like(xs)
        return (lambda: (gx.fill(0), k.col2im(cols_in, 3, 3, 1, 1, H, W, gx))), gx

    def aff(k):
        out = np.empty_like(x)
        return (lambda: k.affine(x, scale, shift, True, out)), out

    def bnf(k):
        out = np.empty_like(x)
        mean, var = np.empty(C), np.empty(C)
        return (lambda: k.bn_train_forward(x, gamma, beta, 1e-5, True, out, mean, var)), out

    def bnb(k):
        out = np.maximum(x, 0)
        mean = x.mean(axis=(0, 2, 3), dtype=np.float64)
        istd = 1 / np.sqrt(x.var(axis=(0, 2, 3), dtype=np.float64) + 1e-5)
        gx = np.empty_like(x)
        gg, gb = np.empty(C), np.empty(C)
        return (lambda: k.bn_backward(x, gy, out, mean, istd, gamma, False, True, gx, gg, gb)), gx

    return [("depthwise 3x3 forward", dw3), ("depthwise 5x5/2 forward", dw5s2),
            ("depthwise backward input", dw_bi), ("depthwise backward weight", dw_bw),
            ("im2col 3x3", i2c), ("col2im 3x3", c2i), ("affine + relu", aff),
            ("batch norm forward", bnf), ("batch norm backward", bnb)]


def end_to_end(reps: int, width: float) -> dict:
    rng = np.random.default_rng(1)
    x1 = to_model_input(rng.random((1, 234, 300), dtype=np.float32))
    xb = to_model_input(rng.random((4, 234, 300), dtype=np.float32))
    results = {}
    for backend in kernels.available():
        with kernels.using(backend):
            model = build_branchy_ghostnet(width, strict=False, seed=0)
            model.eval()

            def infer():
                with no_grad():
                    model.forward_with_exit(x1, "full")

            def step():
                model.train()
                rod, har = model.forward_full(xb)
                total, _ = joint_loss(rod, har, [0, 1, 2, 1], [-1, 0, -1, 3])
                total.backward()
                model.eval()

            results[backend] = {"inference_ms": median_ms(infer, reps),
                                "train_step_ms": median_ms(step, max(3, reps // 4))}
    return results


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--reps", type=int, default=20)
    ap.add_argument("--width", type=float, default=0.5, help="network width for the end-to-end rows")
    ap.add_argument("--json", action="store_true")
    args = ap.parse_args(argv)
    backends = kernels.available()
    if "compiled" not in backends:
        print("compiled kernels are not built; only the fallback is available")
    rng = np.random.default_rng(0)
    rows = []
    with limit_threads(1):
        for name, build in kernel_cases(rng):
            row = {"kernel": name}
            outputs = {}
            for backend in backends:
                fn, out = build(kernels._load(backend))
                row[backend] = median_ms(fn, args.reps)
                outputs[backend] = out.copy()
            if len(outputs) == 2:
                a, b = outputs["compiled"], outputs["python"]
                row["max_abs_diff"] = float(np.max(np.abs(a.astype(np.float64) - b)))
                row["speedup"] = row["python"] / row["compiled"]
            rows.append(row)
        e2e = end_to_end(args.reps, args.width)
    if args.json:
        print(json.dumps({"kernels": rows, "end_to_end": e2e, "width": args.width}, indent=2))
        return 0
    print(f"{'kernel':<28} {'compiled ms':>12} {'python ms':>10} {'speedup':>8} {'max |diff|':>11}")
    for r in rows:
        print(f"{r['kernel']:<28} {r.get('compiled', float('nan')):>12.3f} {r['python']:>10.3f} "
              f"{r.get('speedup', float('nan')):>8.2f} {r.get('max_abs_diff', float('nan')):>11.2e}")
    print(f"\nend to end, width {args.width}")
    for backend, r in e2e.items():
        print(f"  {backend:<9} inference {r['inference_ms']:8.2f} ms   train step (batch 4) {r['train_step_ms']:8.2f} ms")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
