"""Time the compiled selective-scan kernel against the numpy fallback.

    python benchmarks/bench_scan.py [--length 1024] [--repeat 5]

Prints one tab-separated row per (backend, pass) with the best wall time and
the speed-up of the compiled kernel over numpy.
"""
import argparse
import time

import numpy as np

from crackmamba import _kernels


def make_inputs(groups, length, channels, state, dtype, seed=0):
    rng = np.random.default_rng(seed)
    u = rng.normal(size=(groups, length, channels)).astype(dtype)
    delta = rng.uniform(1e-3, 0.1, size=u.shape).astype(dtype)
    A = -rng.uniform(0.5, 8.0, size=(4, channels, state)).astype(dtype)
    B = rng.normal(size=(groups, length, state)).astype(dtype)
    C = rng.normal(size=(groups, length, state)).astype(dtype)
    D = np.ones((4, channels), dtype=dtype)
    return u, delta, A, B, C, D


def best_time(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--batch", type=int, default=2, help="images per call (4 scan groups each)")
    p.add_argument("--length", type=int, default=256, help="sequence length H*W")
    p.add_argument("--channels", type=int, default=64)
    p.add_argument("--state", type=int, default=8)
    p.add_argument("--dtype", default="float32", choices=("float32", "float64"))
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args(argv)

    args_in = make_inputs(4 * args.batch, args.length, args.channels, args.state, args.dtype)
    gy = np.ones_like(args_in[0])
    backends = [("python", _kernels.python_backend)]
    if _kernels.compiled_backend is not None:
        backends.append(("cython", _kernels.compiled_backend))
    else:
        print("# compiled kernel not available; timing numpy only")

    print("backend\tpass\tseconds\tspeedup")
    base = {}
    for name, mod in backends:
        y, hs = mod.scan_forward(*args_in)
        fwd = best_time(lambda: mod.scan_forward(*args_in), args.repeat)
        bwd = best_time(lambda: mod.scan_backward(gy, *args_in, hs), args.repeat)
        for pass_, sec in (("forward", fwd), ("backward", bwd)):
            base.setdefault(pass_, sec)
            print(f"{name}\t{pass_}\t{sec:.6f}\t{base[pass_] / sec:.2f}")


if __name__ == "__main__":
    main()
