"""Observed convergence rates on equidistant grids in one dimension.

Prints the WCE slope for Sobolev-3/2 and Sobolev-5/2 Matern kernels, their sum,
and the absolute-error slope of a smoothness-5/2 prior on |x - 0.47|.
"""
import argparse

import numpy as np

from mobq import Separable, Sum, UniformBox
from mobq.kernels import sobolev_matern
from mobq.studies import convergence_study, integrand_from_dict


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--schedule", type=int, nargs="+", default=[8, 16, 32, 64, 128, 256])
    ap.add_argument("--lengthscale", type=float, default=0.5)
    args = ap.parse_args()
    box = UniformBox((0.0,), (1.0,))
    one = np.eye(1)
    rough = Separable(one, sobolev_matern(1.5, lengthscale=args.lengthscale))
    smooth = Separable(one, sobolev_matern(2.5, lengthscale=args.lengthscale))
    cases = {"sobolev 3/2": rough, "sobolev 5/2": smooth, "sum": Sum((rough, smooth))}
    for name, K in cases.items():
        rep = convergence_study(K, box, design="grid", schedule=args.schedule)
        print(f"{name:>12}: WCE slope {rep.slopes['wce[0]'].slope:+.3f}")
    kink = integrand_from_dict({"name": "abs_kink", "center": 0.47}, box)
    for smoothness in (2.5, 3.0):
        K = Separable(one, sobolev_matern(smoothness, lengthscale=args.lengthscale))
        rep = convergence_study(K, box, design="grid", schedule=args.schedule, integrands=[kink],
                                references=[kink.reference()])
        print(f"sobolev {smoothness} prior on |x - 0.47|: error slope {rep.slopes['abs_error[0]'].slope:+.3f}")


if __name__ == "__main__":
    main()
