"""Tabulate the threshold lambda_{kappa,tau} and the exponent q_lambda on a grid."""

import argparse
import csv
import sys

import numpy as np

from fsdemc import inequalities as ineq


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--kappa", type=float, nargs="+", default=[0.5, 1.0, 2.0])
    ap.add_argument("--tau", type=float, nargs="+", default=[0.1, 0.5, 1.0, 2.0])
    ap.add_argument("--factors", type=float, nargs="+", default=[1.0, 1.5, 2.0, 5.0],
                    help="lambda values as multiples of the threshold")
    args = ap.parse_args()
    wr = csv.writer(sys.stdout)
    wr.writerow(["kappa", "tau", "lambda_threshold", "lambda", "q_lambda", "q_lower_bound"])
    for k in args.kappa:
        for t in args.tau:
            lam0 = ineq.lambda_kappa_tau(k, t)
            for f in args.factors:
                lam = lam0 * f
                qv = ineq.q_lambda(lam, k, t)
                lb = np.sqrt(lam) / (np.sqrt(lam) - np.sqrt(k))
                wr.writerow([k, t, f"{lam0:.10g}", f"{lam:.10g}", f"{qv:.10g}", f"{lb:.10g}"])


if __name__ == "__main__":
    main()
