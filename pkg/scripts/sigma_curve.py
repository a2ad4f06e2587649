"""sigma_T(P, Q*) as a function of T for a few one-variable test functions.

Writes a tidy CSV: r, s, T, poly_p, poly_q, method, re, im.
"""
import argparse
import csv
import sys

import numpy as np

from glfluct.covariance import sigma_direct, sigma_free
from glfluct.trace_algebra import conjugate, format_poly, parse

DEFAULT_POLYS = ["tr(X1)", "tr(X1 X1)", "tr(X1 X1*)"]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--r", type=float, default=1.0)
    ap.add_argument("--s", type=float, default=0.0)
    ap.add_argument("--Tmax", type=float, default=4.0)
    ap.add_argument("--points", type=int, default=17)
    ap.add_argument("--poly", action="append")
    ap.add_argument("--out", default="-")
    args = ap.parse_args(argv)

    Ps = [parse(p) for p in (args.poly or DEFAULT_POLYS)]
    rs = (args.r, args.s)
    fh = sys.stdout if args.out == "-" else open(args.out, "w", newline="")
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["r", "s", "T", "poly_p", "poly_q", "method", "re", "im"])
    for T in np.linspace(0, args.Tmax, args.points):
        for P in Ps:
            Q = conjugate(P)
            for fn in (sigma_direct, sigma_free):
                v = fn(P, Q, rs, {1: float(T)}).value
                w.writerow([args.r, args.s, repr(float(T)), format_poly(P), format_poly(Q),
                            fn.__name__.split("_")[1], repr(v.real), repr(v.imag)])
    if fh is not sys.stdout:
        fh.close()


if __name__ == "__main__":
    main()
