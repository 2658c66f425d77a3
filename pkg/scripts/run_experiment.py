"""Synthetic recommendation experiment: vector goals vs scalarized baselines and the CVAE chooser.

    python3 scripts/run_experiment.py --out runs/main
    python3 scripts/run_experiment.py --reward-scale 5 --no-baselines --out runs/x5
"""
import argparse
import json
import logging
import time
from pathlib import Path

import torch

from mogcsl.envs import NoisyRecsysConfig
from mogcsl.evaluation import reports_to_markdown
from mogcsl.experiments import ExperimentConfig, run_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--n-sessions", type=int, default=10_000)
    ap.add_argument("--noise", type=float, default=0.5)
    ap.add_argument("--reward-scale", type=float, default=1.0)
    ap.add_argument("--lambdas", type=float, nargs="+", default=[1.0, 1.5, 2.0, 8.0])
    ap.add_argument("--no-baselines", action="store_true")
    ap.add_argument("--no-cvae", action="store_true")
    ap.add_argument("--out", type=Path, required=True)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    torch.set_num_threads(1)

    cfg = ExperimentConfig(
        env=NoisyRecsysConfig(noise=args.noise, reward_scale=args.reward_scale),
        n_sessions=args.n_sessions,
        lambdas=tuple(args.lambdas),
        weights=() if args.no_baselines else (0.1, 0.5, 0.9),
        seeds=tuple(args.seeds),
    )
    start = time.perf_counter()
    reports = run_experiment(cfg, baselines=not args.no_baselines, use_cvae=not args.no_cvae,
                             progress=lambda s: logging.info("seed %d done", s))
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    (args.out / "reports.json").write_text(json.dumps({k: r.to_dict() for k, r in reports.items()}, indent=2, sort_keys=True))
    table = reports_to_markdown(reports)
    (args.out / "reports.md").write_text(table)
    print(table)
    logging.info("finished in %.0f s", time.perf_counter() - start)


if __name__ == "__main__":
    main()
