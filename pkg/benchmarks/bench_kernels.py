#!/usr/bin/env python3
"""Benchmark the compiled conv/pool kernels against the numpy fallback.

Times the individual kernels plus a full extractor forward/backward pass on
a training-shaped batch of windows, and reports the speedup. Run after
building the extension:

    python benchmarks/bench_kernels.py [--batch 63] [--repeat 5]
"""

import argparse
import timeit

import numpy as np

from dsrm import _kernels_np
from dsrm import features as F
from dsrm.kernels import blas_quiet

try:
    from dsrm import _kernels
except ImportError:
    _kernels = None


def best_ms(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat)) * 1000.0


def bench_kernels(mod, x, w, b, repeat):
    rows = {}
    rows["conv3x3 fwd+relu"] = best_ms(lambda: mod.conv3x3_forward(x, w, b, True), repeat)
    y = mod.conv3x3_forward(x, w, b, True)
    dy = np.random.default_rng(1).standard_normal(y.shape)
    rows["conv3x3 bwd"] = best_ms(lambda: mod.conv3x3_backward(x, w, dy), repeat)
    rows["maxpool2 fwd"] = best_ms(lambda: mod.maxpool2_forward(y), repeat)
    _, idx = mod.maxpool2_forward(y)
    dp = np.ascontiguousarray(dy[:, ::2, ::2, :])
    rows["maxpool2 bwd"] = best_ms(
        lambda: mod.maxpool2_backward(idx, dp, y.shape[1], y.shape[2], y), repeat)
    return rows


def bench_extractor(backend_mod, cnn, windows, dfeats, repeat):
    import dsrm.kernels as K
    saved = (K.conv3x3_forward, K.conv3x3_backward, K.maxpool2_forward,
             K.maxpool2_backward, K.BACKEND)
    K.conv3x3_forward = backend_mod.conv3x3_forward
    K.conv3x3_backward = backend_mod.conv3x3_backward
    K.maxpool2_forward = backend_mod.maxpool2_forward
    K.maxpool2_backward = backend_mod.maxpool2_backward
    K.BACKEND = "cython" if backend_mod is _kernels else "python"
    try:
        with blas_quiet():
            fwd = best_ms(lambda: F.cnn_forward(cnn, windows), repeat)
            _, cache = F.cnn_forward(cnn, windows, want_cache=True)
            bwd = best_ms(lambda: F.cnn_backward(cnn, cache, dfeats), repeat)
    finally:
        (K.conv3x3_forward, K.conv3x3_backward, K.maxpool2_forward,
         K.maxpool2_backward, K.BACKEND) = saved
    return fwd, bwd


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--batch", type=int, default=63,
                        help="windows per batch (default: one image-grouped batch)")
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    x = rng.standard_normal((8, 100, 100, 3))
    w = rng.standard_normal((3, 3, 3, 8)) * 0.1
    b = rng.standard_normal(8) * 0.1

    backends = [("numpy", _kernels_np)]
    if _kernels is not None:
        backends.append(("cython", _kernels))
    else:
        print("compiled extension not built; benchmarking the fallback only")

    results = {}
    for name, mod in backends:
        results[name] = bench_kernels(mod, x, w, b, args.repeat)

    print(f"\nkernel timings, batch of 8 100x100x3 windows (best of {args.repeat}):")
    header = f"{'kernel':<18}" + "".join(f"{name:>12}" for name, _ in backends)
    if len(backends) == 2:
        header += f"{'speedup':>10}"
    print(header)
    for key in results[backends[0][0]]:
        line = f"{key:<18}"
        for name, _ in backends:
            line += f"{results[name][key]:>10.1f}ms"
        if len(backends) == 2:
            line += f"{results['numpy'][key] / results['cython'][key]:>9.1f}x"
        print(line)

    cnn = F.init_tiny_cnn(64, seed=0)
    windows = rng.random((args.batch, 100, 100, 3))
    dfeats = rng.standard_normal((args.batch, 64))
    print(f"\nextractor pass, batch of {args.batch} windows:")
    rows = {}
    for name, mod in backends:
        fwd, bwd = bench_extractor(mod, cnn, windows, dfeats, args.repeat)
        rows[name] = (fwd, bwd)
        print(f"  {name:<8} forward {fwd:7.1f}ms   backward {bwd:7.1f}ms")
    if len(backends) == 2:
        print(f"  speedup  forward {rows['numpy'][0] / rows['cython'][0]:6.1f}x"
              f"    backward {rows['numpy'][1] / rows['cython'][1]:6.1f}x")


if __name__ == "__main__":
    main()
