"""Wall time of the Kronecker solve against the dense Cholesky path on a shared design."""
import argparse
import time

import numpy as np

from mobq import Design, Rng, Separable, linalg
from mobq.kernels import Matern


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--N", type=int, default=200)
    ap.add_argument("--D", type=int, default=5)
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()
    gen = Rng(0).generator()
    A = gen.normal(size=(args.D, args.D))
    K = Separable(A @ A.T + args.D * np.eye(args.D), Matern(1.5, 1.0, 0.02))
    design = Design.shared_design(gen.uniform(0, 1, (args.N, 1)), args.D)
    rhs = gen.normal(size=args.N * args.D)
    timings = {}
    for mode in ("always", "never"):
        best = np.inf
        for _ in range(args.repeats):
            t0 = time.perf_counter()
            x = linalg.factorize_kernel(K, design, kronecker=mode).solve(rhs)
            best = min(best, time.perf_counter() - t0)
        timings[mode] = (best, x)
    diff = np.abs(timings["always"][1] - timings["never"][1]).max() / np.abs(timings["never"][1]).max()
    print(f"kronecker {timings['always'][0] * 1e3:.2f} ms, dense {timings['never'][0] * 1e3:.2f} ms, "
          f"speedup {timings['never'][0] / timings['always'][0]:.1f}x, relative difference {diff:.2e}")


if __name__ == "__main__":
    main()
