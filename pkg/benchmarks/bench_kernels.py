"""Compare the compiled kernels against the NumPy fallback.

    python benchmarks/bench_kernels.py [--rows 512] [--n 1444] [--repeat 20]

The default workload is one batch of 38x38 activation maps (N = 1444), the
shape the pooling head sees during training.  Prints the best-of-``repeat``
wall time per call for each backend and the speedup.
"""

import argparse
import math
import timeit

import numpy as np

from elcrack import kernels


def workloads(rows, n, rng):
    x = np.ascontiguousarray(rng.uniform(-10, 10, size=(rows, n)))
    up = np.ones(rows)
    for p in (1.0, 3.0, 9.0, math.inf):
        yield f"forward   p={p:g}", lambda impl, p=p: impl.lp_forward(x, p)
        yield f"backward  p={p:g}", lambda impl, p=p: impl.lp_backward(x, p, up, 1e-12)
    yield "threshold direct", lambda impl: impl.half_max_threshold(x, False)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rows", type=int, default=512)
    ap.add_argument("--n", type=int, default=38 * 38)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)

    rng = np.random.default_rng(0)
    backends = kernels.available_backends()
    if "cython" not in backends:
        print("compiled kernels not built; only the fallback is available")
    print(f"rows={args.rows} n={args.n} (best of {args.repeat})")
    print(f"{'kernel':<20}" + "".join(f"{b:>14}" for b in backends) + ("     speedup" if len(backends) > 1 else ""))
    for name, fn in workloads(args.rows, args.n, rng):
        times = []
        for b in backends:
            impl = kernels.get_backend(b)
            times.append(min(timeit.repeat(lambda: fn(impl), number=1, repeat=args.repeat)))
        line = f"{name:<20}" + "".join(f"{t * 1e3:>11.3f} ms" for t in times)
        if len(times) > 1:
            line += f"{times[1] / times[0]:>11.1f}x"
        print(line)


if __name__ == "__main__":
    main()
