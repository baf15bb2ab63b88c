"""Calibrate the clean-box constants A, C, c and the sup-norm multiplier.

Targets: at least 99% of ell-boxes clean at eps = 0.05, and a dirty fraction
at scale ell that decreases along eps = 0.3, 0.2, 0.1. Prints a table of
candidates and the selected defaults as JSON.
"""

import argparse
import itertools
import json

import numpy as np

from rfxy.classifier import FieldProvider
from rfxy.fields import sample_alpha
from rfxy.params import CleanConstants, ModelParams


def dirty_fraction(consts, eps, seeds, N=64):
    p = ModelParams(eps)
    N = max(N, 8 * p.ell)
    fr = [FieldProvider(sample_alpha(s, N).alpha, p, consts).grid(p.ell).dirty_fraction() for s in seeds]
    return float(np.mean(fr))


def largest_safe_A(seeds, eps=0.02, tol=0.01):
    p = ModelParams(eps)
    best = None
    for A in (0.0625, 0.125, 0.25, 0.5, 1.0):
        c = CleanConstants(A=A)
        f = np.mean([1 - FieldProvider(sample_alpha(s, 8 * p.ell).alpha, p, c).grid(p.ell).flags["c1"].mean() for s in seeds])
        if f <= tol:
            best = A
    return best


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=8)
    ap.add_argument("--seed0", type=int, default=1000)
    args = ap.parse_args(argv)
    seeds = range(args.seed0, args.seed0 + args.seeds)
    A_safe = largest_safe_A(seeds)
    # half the largest A that leaves the mass event essentially always true
    A = A_safe / 2 if A_safe else 0.0625
    chosen = None
    for C, Cs, c in itertools.product((1.4, 1.6, 2.0, 2.5), (4.0, 6.0, 8.0), (0.005, 0.01)):
        consts = CleanConstants(A=A, C_big=C, c_small=c, C_sup=Cs)
        fr = [dirty_fraction(consts, e, seeds) for e in (0.3, 0.2, 0.1, 0.05)]
        ok = fr[3] <= 0.01 and fr[0] > fr[1] + 0.05 and fr[1] > fr[2] + 0.05
        print(f"C={C} C_sup={Cs} c={c}  dirty={['%.4f' % f for f in fr]}  {'ok' if ok else '-'}")
        if ok and chosen is None:
            chosen = consts
    print(json.dumps(chosen.to_dict() if chosen else None, indent=2))


if __name__ == "__main__":
    main()
