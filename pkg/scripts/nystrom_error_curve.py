#!/usr/bin/env python3
"""Nystrom approximation error as a function of the landmark count.

Measures the mean relative Frobenius error of Nystrom attention against
exact attention on random self-attention inputs (q = k = v).  With as
many landmarks as rows the error drops to the pseudo-inverse tolerance.
"""

import argparse

import numpy as np

from detectbert.verify import attention_error


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=128, help="sequence length")
    ap.add_argument("--dim", type=int, default=16)
    ap.add_argument("--seeds", type=int, default=50)
    ap.add_argument("--landmarks", type=int, nargs="+", default=[8, 16, 32, 64, 128])
    ap.add_argument("--pinv-iters", type=int, default=None,
                    help="override the default pseudo-inverse iteration count")
    args = ap.parse_args()

    print(f"{'m':>6s} {'mean error':>12s} {'max error':>12s}")
    for m in args.landmarks:
        m_eff = min(m, args.n)
        errs = []
        for seed in range(args.seeds):
            rng = np.random.default_rng(1000 + seed)
            x = rng.standard_normal((args.n, args.dim))
            if args.pinv_iters is None:
                errs.append(attention_error(x, x, x, m_eff))
            else:
                errs.append(attention_error(x, x, x, m_eff, iters=args.pinv_iters))
        print(f"{m_eff:6d} {np.mean(errs):12.3e} {np.max(errs):12.3e}")


if __name__ == "__main__":
    main()
