"""Three-classifier denoising table (state only / one goal column / all goal columns)."""
import argparse
import time

from mogcsl.envs import generate_denoise_dataset
from mogcsl.evaluation import DenoiseConfig, run_denoise_comparison


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=100_000)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--n-estimators", type=int, default=DenoiseConfig.n_estimators)
    ap.add_argument("--max-depth", type=int, default=DenoiseConfig.max_depth)
    ap.add_argument("--learning-rate", type=float, default=DenoiseConfig.learning_rate)
    ap.add_argument("--noise-free", action="store_true", help="keep every label clean")
    args = ap.parse_args()
    cfg = DenoiseConfig(n_estimators=args.n_estimators, max_depth=args.max_depth, learning_rate=args.learning_rate)
    threshold = float("-inf") if args.noise_free else -1.0
    start = time.perf_counter()
    data = [generate_denoise_dataset(args.n, s, threshold=threshold) for s in args.seeds]
    res = run_denoise_comparison(data, cfg, args.seeds)
    print(res.to_markdown())
    print(f"{time.perf_counter() - start:.0f} s")


if __name__ == "__main__":
    main()
