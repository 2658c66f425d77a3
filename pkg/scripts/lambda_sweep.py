"""HR@5 of the vector-goal policy for a range of statistical-goal factors."""
import argparse
import csv
import sys

import torch

from mogcsl.experiments import OBJECTIVES, ExperimentConfig, run_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--lambdas", type=float, nargs="+", default=[0.5, 1, 1.5, 2, 3, 4, 6, 8])
    ap.add_argument("--n-sessions", type=int, default=10_000)
    args = ap.parse_args()
    torch.set_num_threads(1)
    cfg = ExperimentConfig(n_sessions=args.n_sessions, lambdas=tuple(args.lambdas), weights=(), seeds=tuple(args.seeds))
    reports = run_experiment(cfg, baselines=False, use_cvae=False)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["lambda"] + [f"{o}_HR@5" for o in OBJECTIVES] + [f"{o}_HR@5_std" for o in OBJECTIVES])
    for lam in args.lambdas:
        rep = reports[f"mogcsl-s@{lam:g}"]
        w.writerow([lam] + [f"{rep.mean(f'{o}/HR@5'):.4f}" for o in OBJECTIVES] + [f"{rep.std(f'{o}/HR@5'):.4f}" for o in OBJECTIVES])


if __name__ == "__main__":
    main()
