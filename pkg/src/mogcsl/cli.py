"""Command-line driver: ``python -m mogcsl <command> ...``.

Every command writes into ``--out`` (created empty, or cleared with
``--force``) and leaves a ``manifest.json`` recording the resolved config,
seeds, package versions and a hash of every output file. Settings come from
built-in defaults, then ``--config`` (a JSON object), then explicit flags.

Exit codes: 0 ok, 2 config/usage, 3 numeric failure, 4 artifact mismatch,
5 resource guard.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import platform
import shutil
import sys
import traceback
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .data import (
    ConfigError,
    DatasetStats,
    SchemaError,
    TrajectoryFormatError,
    compute_stats,
    filter_by_length,
    load_trajectories,
    relabel_all,
    save_trajectories,
    split,
)
from .envs import (
    NoisyRecsysConfig,
    ResourceError,
    generate_denoise_dataset,
    make_noisy_recsys_spec,
    recsys_logging_table,
    simulate,
    tabular_policy,
)
from .evaluation import DEFAULT_KS, DenoiseConfig, MetricsReport, emit_report, run_denoise_comparison
from .experiments import build_eval_set, evaluate_goals, stat_goals
from .goalsel import CvaeConfig, CvaePair, choose_goal, train_cvaes
from .oracle import run_builtin_verification
from .policy import (
    CheckpointError,
    NumericError,
    PolicyConfig,
    PolicyModel,
    build_model,
    load_model,
    save_model,
    scalarize_goals,
    train,
)

log = logging.getLogger("mogcsl")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_MISMATCH, EXIT_RESOURCE = 0, 2, 3, 4, 5
GENERATOR_VERSION = 1
MAX_GENERATE = 10_000_000


class UsageError(Exception):
    pass


class MismatchError(Exception):
    pass


# ---------------------------------------------------------------------------
# plumbing


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, nargs="+", default=None, help="one or more seeds (default 0)")
    p.add_argument("--config", type=Path, default=None, help="JSON config; explicit flags override it")
    p.add_argument("--out", type=Path, default=None, help="run directory (required)")
    p.add_argument("--force", action="store_true", help="clear --out if it is not empty")
    p.add_argument("-v", "--verbose", action="store_true")


def resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """defaults < config file < flags given on the command line."""
    cfg = dict(defaults)
    if args.config is not None:
        try:
            loaded = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as err:
            raise ConfigError(f"cannot read config {args.config}: {err}") from err
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object")
        cfg.update(loaded)
    for key, val in vars(args).items():
        if key in ("config", "func", "command", "force", "verbose") or val is None:
            continue
        cfg[key] = str(val) if isinstance(val, Path) else val
    if cfg.get("out") is None:
        raise UsageError("--out is required")
    seeds = cfg.get("seed")
    cfg["seed"] = [0] if seeds is None else [int(s) for s in (seeds if isinstance(seeds, list) else [seeds])]
    return cfg


def prepare_out(path, force: bool) -> Path:
    out = Path(path)
    if out.exists():
        if not out.is_dir():
            raise UsageError(f"--out {out} exists and is not a directory")
        if any(out.iterdir()):
            if not force:
                raise UsageError(f"--out {out} is not empty (use --force to overwrite)")
            shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _versions(extra=()) -> dict:
    out = {"mogcsl": __version__, "python": platform.python_version(), "numpy": np.__version__, "torch": torch.__version__}
    for name in extra:
        mod = __import__(name)
        out[name] = getattr(mod, "__version__", "unknown")
    return out


def write_manifest(out: Path, command: str, cfg: dict, extra_versions=(), **fields) -> Path:
    files = sorted(p for p in out.rglob("*") if p.is_file() and p.name != "manifest.json")
    manifest = {
        "command": command,
        "config": cfg,
        "seeds": cfg["seed"],
        "versions": _versions(extra_versions),
        "outputs": {str(p.relative_to(out)): _sha256(p) for p in files},
        **fields,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
    return path


def read_manifest(run: Path) -> dict:
    path = Path(run) / "manifest.json"
    if not path.exists():
        raise MismatchError(f"{run} has no manifest.json")
    return json.loads(path.read_text(encoding="utf-8"))


def _build(cls, fields: dict):
    """Instantiate a config dataclass, reporting unknown or bad fields as config errors."""
    try:
        return cls(**fields)
    except TypeError as err:
        raise ConfigError(f"bad {cls.__name__} fields: {err}") from err


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# generate


def cmd_generate(args) -> int:
    cfg = resolve(args, {"env": "recsys", "format": "jsonl", "recsys": {}, "purity": None})
    if cfg.get("n") is None:
        raise UsageError("--n is required")
    n = int(cfg["n"])
    if n < 1:
        raise ConfigError("--n must be >= 1")
    if n > MAX_GENERATE:
        raise ResourceError(f"--n {n} exceeds the generator guard of {MAX_GENERATE}")
    seed = cfg["seed"][0]
    out = prepare_out(cfg["out"], args.force)
    if cfg["env"] == "denoise":
        ds = generate_denoise_dataset(n, seed)
        ds.save_csv(out / "denoise.csv")
        extra = {"rows": n, "noisy_rows": int(ds.noisy.sum())}
    elif cfg["env"] == "recsys":
        env = _build(NoisyRecsysConfig, cfg["recsys"])
        spec = make_noisy_recsys_spec(env)
        table = recsys_logging_table(spec, cfg["purity"])
        trajs = simulate(spec, tabular_policy(table), n, seed)
        fmt = cfg["format"]
        save_trajectories(trajs, out / f"trajectories.{fmt}", fmt)
        spec.save(out / "spec.json")
        extra = {"rows": n, "steps": sum(len(t) for t in trajs)}
    else:
        raise ConfigError(f"unknown --env {cfg['env']!r} (expected recsys or denoise)")
    write_manifest(out, "generate", cfg, generator_version=GENERATOR_VERSION, **extra)
    print(f"wrote {n} {cfg['env']} samples to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# relabel


def _load_data(cfg: dict):
    if not cfg.get("data"):
        raise UsageError("--data is required")
    trajs = load_trajectories(cfg["data"])
    if cfg.get("min_len") is not None or cfg.get("max_len") is not None:
        trajs = filter_by_length(trajs, int(cfg.get("min_len") or 1), int(cfg.get("max_len") or 10**9))
    if not trajs:
        raise ConfigError("no trajectories left after loading/filtering")
    return trajs


def cmd_relabel(args) -> int:
    cfg = resolve(args, {})
    trajs = _load_data(cfg)
    out = prepare_out(cfg["out"], args.force)
    with open(out / "relabeled.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for tr in trajs:
            for t, step in enumerate(relabel_all([tr]), start=1):
                row = {
                    "traj_id": tr.id,
                    "t": t,
                    "history": list(step.history),
                    "action": step.action,
                    "goal": step.goal.tolist(),
                    "reward": step.reward.tolist(),
                }
                fh.write(json.dumps(row, separators=(",", ":")) + "\n")
    _write_json(out / "stats.json", compute_stats(trajs).to_dict())
    write_manifest(out, "relabel", cfg, trajectories=len(trajs))
    print(f"relabeled {len(trajs)} trajectories into {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def _policy_config(cfg: dict, n_items: int, d: int, seed: int, max_t: int) -> PolicyConfig:
    fields = dict(cfg.get("policy", {}))
    flag_map = {
        "window": "window", "epochs": "max_epochs", "lr": "learning_rate", "batch_size": "batch_size",
        "encoder": "encoder", "patience": "patience", "goal_mode": "goal_mode", "weights": "weights",
    }
    for flag, name in flag_map.items():
        if cfg.get(flag) is not None:
            fields[name] = cfg[flag]
    fields.setdefault("max_timestep", max_t)
    return _build(PolicyConfig, {**fields, "n_items": n_items, "d": d, "seed": seed})


def cmd_train(args) -> int:
    cfg = resolve(args, {"ratios": [0.8, 0.1, 0.1], "policy": {}, "goal_mode": "vector"})
    if cfg["goal_mode"] == "scalar" and cfg.get("weights") is None and "weights" not in cfg["policy"]:
        raise ConfigError("--goal-mode scalar requires --weights")
    trajs = _load_data(cfg)
    n_items = int(cfg.get("n_items") or max(max(tr.actions) for tr in trajs))
    d = trajs[0].d
    out = prepare_out(cfg["out"], args.force)
    summary = {}
    for seed in cfg["seed"]:
        sub = out / f"seed-{seed}"
        sub.mkdir()
        train_t, valid_t, test_t = split(trajs, cfg["ratios"], seed)
        stats = compute_stats(train_t)
        pcfg = _policy_config(cfg, n_items, d, seed, max(stats.max_timestep, max(len(t) for t in trajs)))
        torch.manual_seed(seed)
        try:
            model, report = _fit(pcfg, relabel_all(train_t), relabel_all(valid_t))
        except NumericError as err:
            _write_json(sub / "diagnostics.json", {"error": str(err), "seed": seed, "policy": pcfg.to_dict()})
            write_manifest(out, "train", cfg, failed_seed=seed)
            raise
        save_model(model, sub / "model.pt", extra={"seed": seed, "d": d})
        with open(sub / "loss.csv", "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "valid_loss"])
            for e, tl in enumerate(report.train_loss, start=1):
                vl = report.valid_loss[e - 1] if e <= len(report.valid_loss) else ""
                w.writerow([e, repr(tl), repr(vl) if vl != "" else ""])
        _write_json(sub / "stats.json", stats.to_dict())
        _write_json(sub / "split.json", {"train": [t.id for t in train_t], "valid": [t.id for t in valid_t], "test": [t.id for t in test_t]})
        summary[seed] = {"epochs": report.epochs, "final_train_loss": report.train_loss[-1], "best_epoch": report.best_epoch}
        print(f"seed {seed}: {report.epochs} epochs, final train loss {report.train_loss[-1]:.4f}")
    _write_json(out / "train_summary.json", {str(k): v for k, v in summary.items()})
    write_manifest(out, "train", cfg, data=str(Path(cfg["data"]).resolve()), n_items=n_items, d=d)
    return EXIT_OK


def _fit(pcfg: PolicyConfig, tr_steps, va_steps):
    if pcfg.goal_mode == "scalar":
        tr_steps, va_steps = scalarize_goals(tr_steps, pcfg.weights), scalarize_goals(va_steps, pcfg.weights)
    model = build_model(pcfg, tr_steps)
    report = train(model, tr_steps, va_steps or None)
    return model, report


# ---------------------------------------------------------------------------
# evaluate / sweep-lambda


def _load_run(run: Path, seed: int):
    """Model, stats and (train, test) trajectories of one trained seed."""
    manifest = read_manifest(run)
    if manifest.get("command") != "train":
        raise MismatchError(f"{run} is not a train run (command={manifest.get('command')!r})")
    sub = Path(run) / f"seed-{seed}"
    if not sub.is_dir():
        raise MismatchError(f"{run} has no model for seed {seed}")
    model = load_model(sub / "model.pt")
    stats = json.loads((sub / "stats.json").read_text(encoding="utf-8"))
    ids = json.loads((sub / "split.json").read_text(encoding="utf-8"))
    return manifest, model, stats, ids


def _eval_split(cfg: dict, manifest: dict, model: PolicyModel, ids: dict):
    data = cfg.get("data") or manifest.get("data")
    trajs = load_trajectories(data)
    by_id = {t.id: t for t in trajs}
    if cfg.get("data"):
        test = trajs
    else:
        missing = [i for i in ids["test"] if i not in by_id]
        if missing:
            raise MismatchError(f"{len(missing)} test trajectories of the run are missing from {data}")
        test = [by_id[i] for i in ids["test"]]
    train_t = [by_id[i] for i in ids["train"] if i in by_id]
    c = model.config
    if test and test[0].d != c.d and c.goal_mode == "vector":
        raise MismatchError(f"data has d={test[0].d} but the checkpoint expects d={c.d}")
    top = max(max(t.actions) for t in test)
    if top > c.n_items:
        raise MismatchError(f"data holds item {top} but the checkpoint knows only {c.n_items} items")
    return train_t, test


def _stat_goal_matrix(model: PolicyModel, stats: dict, t: np.ndarray, lam: float) -> np.ndarray:
    goals = stat_goals(DatasetStats.from_dict(stats), np.minimum(t, stats["max_timestep"]), lam)
    if model.config.goal_mode == "scalar":
        goals = goals @ np.asarray(model.config.weights)
        goals = goals[:, None]
    return goals


def cmd_evaluate(args) -> int:
    cfg = resolve(args, {"goal_strategy": "stat", "lam": 1.0, "K": 20, "n_achievable": 64, "ks": list(DEFAULT_KS), "cvae": {}})
    if not cfg.get("run"):
        raise UsageError("--run is required")
    if cfg["goal_strategy"] not in ("stat", "cvae"):
        raise ConfigError("--goal-strategy must be stat or cvae")
    out = prepare_out(cfg["out"], args.force)
    runs, audit = [], {}
    for seed in cfg["seed"]:
        manifest, model, stats, ids = _load_run(Path(cfg["run"]), seed)
        train_t, test = _eval_split(cfg, manifest, model, ids)
        ev = build_eval_set(test, model.config.window)
        if cfg["goal_strategy"] == "stat":
            goals = _stat_goal_matrix(model, stats, ev.t, float(cfg["lam"]))
        else:
            if model.config.goal_mode != "vector":
                raise MismatchError("the cvae strategy needs a vector-goal checkpoint")
            pair = train_cvaes(relabel_all(train_t), model, _build(CvaeConfig, {**cfg["cvae"], "seed": seed}))
            pair.save(out / f"cvae-seed-{seed}.pt")
            goals, choices = _cvae_choices(pair, model, ev, int(cfg["K"]), int(cfg["n_achievable"]), seed)
            audit[str(seed)] = choices
        objectives = _objectives(model.config.d)
        runs.append(evaluate_goals(model, ev, goals, tuple(cfg["ks"]), objectives))
    meta = {"goal_strategy": cfg["goal_strategy"]}
    if cfg["goal_strategy"] == "stat":
        meta["lam"] = float(cfg["lam"])
    else:
        meta["K"] = int(cfg["K"])
    report = MetricsReport.from_runs(runs, cfg["seed"], list(objectives), tuple(cfg["ks"]), meta)
    emit_report(report, out / "metrics.json")
    emit_report(report, out / "metrics.csv")
    emit_report(report, out / "metrics.md")
    if audit:
        _write_json(out / "goal_choices.json", audit)
    write_manifest(out, "evaluate", cfg)
    print(report.to_markdown(cfg["goal_strategy"]))
    return EXIT_OK


def _objectives(d: int) -> tuple[str, ...]:
    return tuple(f"obj{i + 1}" for i in range(d))


@torch.no_grad()
def _cvae_choices(pair: CvaePair, model: PolicyModel, ev, K: int, n_achievable: int, seed: int):
    model.eval()
    emb = model.state_embedding(torch.as_tensor(ev.hist), torch.as_tensor(ev.t)).double()
    gen = torch.Generator().manual_seed(seed)
    goals, choices = [], []
    for i in range(len(ev)):
        ch = choose_goal(pair, emb[i], K=K, n_achievable=n_achievable, generator=gen)
        goals.append(ch.chosen_input_goal)
        choices.append(ch.to_dict())
    return np.array(goals), choices


def cmd_sweep_lambda(args) -> int:
    cfg = resolve(args, {"lambdas": [0.5, 1.0, 1.5, 2.0, 4.0, 8.0], "ks": list(DEFAULT_KS)})
    if not cfg.get("run"):
        raise UsageError("--run is required")
    out = prepare_out(cfg["out"], args.force)
    per_lam: dict[float, list] = {float(lam): [] for lam in cfg["lambdas"]}
    for seed in cfg["seed"]:
        manifest, model, stats, ids = _load_run(Path(cfg["run"]), seed)
        _, test = _eval_split(cfg, manifest, model, ids)
        ev = build_eval_set(test, model.config.window)
        objectives = _objectives(model.config.d)
        for lam in per_lam:
            per_lam[lam].append(evaluate_goals(model, ev, _stat_goal_matrix(model, stats, ev.t, lam), tuple(cfg["ks"]), objectives))
    with open(out / "lambda_sweep.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lambda", "objective", "metric", "k", "mean", "std", "n_seeds"])
        for lam, runs in per_lam.items():
            rep = MetricsReport.from_runs(runs, cfg["seed"], list(objectives), tuple(cfg["ks"]))
            for key in rep.keys():
                obj, rest = key.split("/")
                metric, k = rest.split("@")
                m, s = rep.mean(key), rep.std(key)
                w.writerow([repr(lam), obj, metric, k, "" if m is None else repr(m), "" if s is None else repr(s), len(runs)])
    write_manifest(out, "sweep-lambda", cfg)
    print(f"wrote {out / 'lambda_sweep.csv'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# denoise-exp / verify-theorem1


def cmd_denoise(args) -> int:
    defaults = {"n": 100_000, **{f.name: getattr(DenoiseConfig(), f.name) for f in dataclasses.fields(DenoiseConfig)}}
    cfg = resolve(args, defaults)
    out = prepare_out(cfg["out"], args.force)
    dcfg = _build(DenoiseConfig, {f.name: cfg[f.name] for f in dataclasses.fields(DenoiseConfig)})
    seeds = cfg["seed"]
    res = run_denoise_comparison([generate_denoise_dataset(int(cfg["n"]), s) for s in seeds], dcfg, seeds)
    (out / "denoise.csv").write_text(res.to_csv(), encoding="utf-8")
    (out / "denoise.md").write_text(res.to_markdown(), encoding="utf-8")
    _write_json(out / "denoise.json", {"seeds": seeds, "accuracy": res.accuracy, "logloss": res.logloss, "errors": res.errors})
    write_manifest(out, "denoise-exp", cfg, extra_versions=("xgboost",))
    print(res.to_markdown())
    return EXIT_NUMERIC if any(res.errors.values()) else EXIT_OK


def cmd_verify(args) -> int:
    cfg = resolve(args, {"n": 100_000, "tolerance": 0.02})
    out = prepare_out(cfg["out"], args.force)
    report = run_builtin_verification(int(cfg["n"]), cfg["seed"][0], float(cfg["tolerance"]))
    (out / "theorem1.json").write_text(report.to_json() + "\n", encoding="utf-8")
    write_manifest(out, "verify-theorem1", cfg, passed=report.passed)
    for c in report.cases:
        print(f"{c.name}: TV exact {c.tv_exact_vs_empirical:.4f} seeds {c.tv_between_seeds:.4f} {'ok' if c.passed else 'FAIL'}")
    for s in report.sensitivity:
        print(f"{s.name}: TV {s.tv:.4f} {'ok' if s.passed else 'FAIL'}")
    return EXIT_OK if report.passed else EXIT_NUMERIC


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mogcsl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="simulate a dataset")
    _common(p)
    p.add_argument("--env", choices=["recsys", "denoise"])
    p.add_argument("--n", type=int, help="sessions (recsys) or rows (denoise)")
    p.add_argument("--format", choices=["jsonl", "csv"])
    p.add_argument("--purity", type=float, help="logging-policy purity (recsys)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("relabel", help="export goal-relabeled steps and dataset stats")
    _common(p)
    p.add_argument("--data", type=Path)
    p.add_argument("--min-len", type=int)
    p.add_argument("--max-len", type=int)
    p.set_defaults(func=cmd_relabel)

    p = sub.add_parser("train", help="train a goal-conditioned policy per seed")
    _common(p)
    p.add_argument("--data", type=Path)
    p.add_argument("--goal-mode", choices=["vector", "scalar"])
    p.add_argument("--weights", type=float, nargs="+")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--window", type=int)
    p.add_argument("--encoder", choices=["transformer", "gru"])
    p.add_argument("--patience", type=int)
    p.add_argument("--n-items", type=int)
    p.add_argument("--min-len", type=int)
    p.add_argument("--max-len", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a trained run under a goal strategy")
    _common(p)
    p.add_argument("--run", type=Path, help="output directory of `train`")
    p.add_argument("--data", type=Path, help="evaluate on this file instead of the run's test split")
    p.add_argument("--goal-strategy", choices=["stat", "cvae"])
    p.add_argument("--lam", type=float)
    p.add_argument("--K", type=int)
    p.add_argument("--n-achievable", type=int)
    p.add_argument("--ks", type=int, nargs="+")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep-lambda", help="statistical-goal metrics for a list of factors")
    _common(p)
    p.add_argument("--run", type=Path)
    p.add_argument("--data", type=Path)
    p.add_argument("--lambdas", type=float, nargs="+")
    p.add_argument("--ks", type=int, nargs="+")
    p.set_defaults(func=cmd_sweep_lambda)

    p = sub.add_parser("denoise-exp", help="s / ug / mg classifier comparison")
    _common(p)
    p.add_argument("--n", type=int)
    p.add_argument("--n-estimators", type=int)
    p.add_argument("--max-depth", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--max-bin", type=int)
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser("verify-theorem1", help="exact vs simulated achieved-goal distributions")
    _common(p)
    p.add_argument("--n", type=int)
    p.add_argument("--tolerance", type=float)
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, SchemaError, TrajectoryFormatError) as err:
        print(f"error: {err}", file=sys.stderr)
        if args.verbose:
            traceback.print_exc()
        return EXIT_CONFIG
    except NumericError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (MismatchError, CheckpointError) as err:
        print(f"artifact mismatch: {err}", file=sys.stderr)
        return EXIT_MISMATCH
    except (ResourceError, MemoryError) as err:
        print(f"resource guard: {err}", file=sys.stderr)
        return EXIT_RESOURCE
    except FileNotFoundError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
