"""Top-k ranking metrics, metric reports and the denoising classifier comparison."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .envs import DenoiseDataset

DEFAULT_KS = (5, 10, 20)
METRICS = ("HR", "NDCG")


@dataclass(frozen=True)
class EvalCase:
    history: tuple[int, ...]
    timestep: int
    goal: np.ndarray | None
    action: int
    flags: tuple[bool, ...]

    def __post_init__(self):
        if self.action < 1:
            raise ValueError(f"ground-truth action must be >= 1, got {self.action}")


def rank_items(probs) -> list[int]:
    """Item ids (1-based) by descending probability, ties by ascending id."""
    probs = np.asarray(probs)
    return (np.lexsort((np.arange(len(probs)), -probs)) + 1).tolist()


def truth_ranks(probs: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """1-based rank of ``truth[i]`` under ``rank_items(probs[i])`` for every row."""
    probs = np.asarray(probs)
    truth = np.asarray(truth, dtype=np.int64)
    p_true = probs[np.arange(len(truth)), truth - 1][:, None]
    ids = np.arange(1, probs.shape[1] + 1)[None, :]
    ahead = (probs > p_true) | ((probs == p_true) & (ids < truth[:, None]))
    return ahead.sum(axis=1) + 1


def _selected(cases: Sequence[EvalCase], rankings, objective: int):
    if len(cases) != len(rankings):
        raise ValueError("cases and rankings differ in length")
    return [(c, r) for c, r in zip(cases, rankings) if c.flags[objective]]


def _rank_of(case: EvalCase, ranking) -> int:
    ranking = list(ranking)
    return ranking.index(case.action) + 1 if case.action in ranking else len(ranking) + 1


def hr_at_k(cases: Sequence[EvalCase], rankings, k: int, objective: int) -> float | None:
    """Share of flagged cases whose true item is in the top ``k``; None without flagged cases."""
    sel = _selected(cases, rankings, objective)
    if not sel:
        return None
    return sum(_rank_of(c, r) <= k for c, r in sel) / len(sel)


def ndcg_at_k(cases: Sequence[EvalCase], rankings, k: int, objective: int) -> float | None:
    """Single-relevant-item NDCG: 1/log2(rank + 1) inside the top ``k``, else 0."""
    sel = _selected(cases, rankings, objective)
    if not sel:
        return None
    total = 0.0
    for c, r in sel:
        rank = _rank_of(c, r)
        if rank <= k:
            total += 1.0 / math.log2(rank + 1)
    return total / len(sel)


def hr_from_ranks(ranks: np.ndarray, k: int) -> float | None:
    ranks = np.asarray(ranks)
    return None if ranks.size == 0 else float(np.mean(ranks <= k))


def ndcg_from_ranks(ranks: np.ndarray, k: int) -> float | None:
    ranks = np.asarray(ranks, dtype=np.float64)
    if ranks.size == 0:
        return None
    return float(np.mean(np.where(ranks <= k, 1.0 / np.log2(ranks + 1), 0.0)))


def metric_values(ranks: np.ndarray, flags: np.ndarray, ks=DEFAULT_KS, objectives: Sequence[str] | None = None) -> dict:
    """Per-objective HR/NDCG for precomputed truth ranks and (n, d) flags."""
    flags = np.asarray(flags, dtype=bool)
    objectives = objectives or [f"obj{i + 1}" for i in range(flags.shape[1])]
    out = {}
    for j, name in enumerate(objectives):
        r = ranks[flags[:, j]]
        for k in ks:
            out[f"{name}/HR@{k}"] = hr_from_ranks(r, k)
            out[f"{name}/NDCG@{k}"] = ndcg_from_ranks(r, k)
        out[f"{name}/count"] = int(flags[:, j].sum())
    return out


# ---------------------------------------------------------------------------
# reports


def _mean_std(values):
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None
    return float(np.mean(vals)), float(np.std(vals))


@dataclass
class MetricsReport:
    """Per-objective HR@k / NDCG@k over one or more seeds."""

    objectives: list[str]
    ks: list[int]
    values: dict[str, list[float | None]] = field(default_factory=dict)
    counts: dict[str, list[int]] = field(default_factory=dict)
    seeds: list[int] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_runs(cls, runs: Sequence[Mapping], seeds: Sequence[int], objectives, ks=DEFAULT_KS, meta=None) -> "MetricsReport":
        rep = cls(list(objectives), list(ks), seeds=list(seeds), meta=dict(meta or {}))
        for key in rep.keys():
            rep.values[key] = [run.get(key) for run in runs]
        for name in rep.objectives:
            rep.counts[name] = [int(run.get(f"{name}/count", 0)) for run in runs]
        return rep

    def keys(self) -> list[str]:
        return [f"{o}/{m}@{k}" for o in self.objectives for m in METRICS for k in self.ks]

    def mean(self, key: str) -> float | None:
        return _mean_std(self.values[key])[0]

    def std(self, key: str) -> float | None:
        return _mean_std(self.values[key])[1]

    def to_dict(self) -> dict:
        metrics = {}
        for key in self.keys():
            m, s = _mean_std(self.values[key])
            metrics[key] = {"mean": m, "std": s, "values": self.values[key]}
        return {
            "objectives": self.objectives,
            "ks": self.ks,
            "seeds": self.seeds,
            "metrics": metrics,
            "counts": self.counts,
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "MetricsReport":
        return cls(
            objectives=list(obj["objectives"]),
            ks=[int(k) for k in obj["ks"]],
            values={k: v["values"] for k, v in obj["metrics"].items()},
            counts={k: list(v) for k, v in obj["counts"].items()},
            seeds=list(obj.get("seeds", [])),
            meta=dict(obj.get("meta", {})),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["objective", "metric", "k", "mean", "std", "n_seeds", "count"])
        for o in self.objectives:
            for m in METRICS:
                for k in self.ks:
                    key = f"{o}/{m}@{k}"
                    mean, std = _mean_std(self.values[key])
                    n = sum(v is not None for v in self.values[key])
                    w.writerow([o, m, k, _num(mean), _num(std), n, sum(self.counts.get(o, []))])
        return buf.getvalue()

    def to_markdown(self, label: str = "model", scale: float = 100.0) -> str:
        return reports_to_markdown({label: self}, scale=scale)


def _num(x) -> str:
    return "" if x is None else repr(float(x))


def _cell(rep: MetricsReport, key: str, scale: float) -> str:
    mean, std = _mean_std(rep.values.get(key, []))
    if mean is None:
        return "n/a"
    return f"{mean * scale:.2f}±{std * scale:.2f}"


def reports_to_markdown(reports: Mapping[str, MetricsReport], scale: float = 100.0) -> str:
    """One row per report, columns grouped objective x (HR@k, NDCG@k)."""
    first = next(iter(reports.values()))
    cols = [(o, m, k) for o in first.objectives for k in first.ks for m in METRICS]
    head = "| | " + " | ".join(f"{o} {m}@{k}" for o, m, k in cols) + " |"
    sep = "|---" * (len(cols) + 1) + "|"
    rows = [
        f"| {name} | " + " | ".join(_cell(rep, f"{o}/{m}@{k}", scale) for o, m, k in cols) + " |"
        for name, rep in reports.items()
    ]
    return "\n".join([head, sep, *rows]) + "\n"


def emit_report(report: MetricsReport, path, format: str | None = None) -> Path:
    path = Path(path)
    format = format or path.suffix.lstrip(".").lower()
    if format == "json":
        text = report.to_json()
    elif format == "csv":
        text = report.to_csv()
    elif format in ("md", "markdown"):
        text = report.to_markdown(report.meta.get("label", "model"))
    else:
        raise ValueError(f"unknown report format {format!r}")
    path.write_text(text, encoding="utf-8")
    return path


def load_report(path) -> MetricsReport:
    return MetricsReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# ---------------------------------------------------------------------------
# denoising comparison

VARIANTS = ("s", "ug", "mg")


@dataclass
class DenoiseConfig:
    """Classifier budget shared by all three variants.

    ``base_score`` pins the initial margin so boosting starts from the
    uniform distribution; ``None`` lets xgboost fit an intercept (the class
    prior) instead.
    """

    n_estimators: int = 4
    max_depth: int = 12
    learning_rate: float = 0.15
    max_bin: int = 16
    base_score: float | None = 0.5
    test_fraction: float = 0.2
    inference_goal: float = 1.0
    n_jobs: int = 1


@dataclass
class DenoiseResult:
    accuracy: dict[str, list[float]]
    logloss: dict[str, list[float]]
    errors: dict[str, list[str]] = field(default_factory=dict)
    seeds: list[int] = field(default_factory=list)

    def mean_std(self, metric: str, variant: str) -> tuple[float, float]:
        vals = [v for v in getattr(self, metric)[variant] if not math.isnan(v)]
        if not vals:
            return math.nan, math.nan
        return float(np.mean(vals)), float(np.std(vals))

    def table(self) -> list[dict]:
        rows = []
        for v in VARIANTS:
            acc, acc_sd = self.mean_std("accuracy", v)
            ll, ll_sd = self.mean_std("logloss", v)
            rows.append({"variant": v, "accuracy": acc, "accuracy_std": acc_sd, "m-logloss": ll, "m-logloss_std": ll_sd})
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["variant", "accuracy", "accuracy_std", "m-logloss", "m-logloss_std"])
        for row in self.table():
            w.writerow([row["variant"]] + [_num(row[k]) if not math.isnan(row[k]) else "" for k in ("accuracy", "accuracy_std", "m-logloss", "m-logloss_std")])
        return buf.getvalue()

    def to_markdown(self) -> str:
        lines = ["| variant | accuracy | m-logloss |", "|---|---|---|"]
        for row in self.table():
            lines.append(f"| {row['variant']} | {row['accuracy']:.4f}±{row['accuracy_std']:.4f} | {row['m-logloss']:.4f}±{row['m-logloss_std']:.4f} |")
        return "\n".join(lines) + "\n"


def variant_features(dataset: DenoiseDataset, variant: str, inference_goal: float | None = None) -> np.ndarray:
    """Design matrix of one variant; with ``inference_goal`` the goal columns are overwritten."""
    if variant == "s":
        return dataset.states
    goals = dataset.goals[:, :1] if variant == "ug" else dataset.goals
    if inference_goal is not None:
        goals = np.full_like(goals, inference_goal)
    return np.concatenate([dataset.states, goals], axis=1)


def _subset(ds: DenoiseDataset, idx) -> DenoiseDataset:
    return DenoiseDataset(ds.states[idx], ds.goals[idx], ds.labels[idx], ds.clean_labels[idx], ds.n_noise)


def multiclass_logloss(probs: np.ndarray, labels: np.ndarray, eps: float = 1e-15) -> float:
    p = np.clip(probs[np.arange(len(labels)), labels], eps, 1.0)
    return float(-np.mean(np.log(p)))


def _fit_predict(X, y, Xt, n_classes: int, cfg: DenoiseConfig, seed: int) -> np.ndarray:
    import xgboost as xgb

    clf = xgb.XGBClassifier(
        n_estimators=cfg.n_estimators,
        max_depth=cfg.max_depth,
        learning_rate=cfg.learning_rate,
        max_bin=cfg.max_bin,
        tree_method="hist",
        objective="multi:softprob",
        num_class=n_classes,
        n_jobs=cfg.n_jobs,
        random_state=seed,
    )
    if cfg.base_score is not None:
        clf.set_params(base_score=cfg.base_score)
    present = np.unique(y)
    # xgboost needs contiguous labels; map back to the full class space afterwards
    remap = np.searchsorted(present, y)
    if len(present) == n_classes:
        clf.fit(X, remap)
        return clf.predict_proba(Xt)
    clf.set_params(num_class=len(present))
    clf.fit(X, remap)
    out = np.zeros((len(Xt), n_classes))
    out[:, present] = clf.predict_proba(Xt)
    return out


def run_denoise_comparison(
    dataset: DenoiseDataset | Sequence[DenoiseDataset],
    config: DenoiseConfig | None = None,
    seeds: Sequence[int] = (0,),
) -> DenoiseResult:
    """Train the s / ug / mg classifiers on identical splits and score them.

    ``dataset`` is either one dataset (re-split per seed) or one dataset per
    seed. Scores use the observed test labels; at test time the ug and mg
    goal columns are set to ``config.inference_goal``.
    """
    cfg = config or DenoiseConfig()
    datasets = list(dataset) if isinstance(dataset, (list, tuple)) else [dataset] * len(seeds)
    if len(datasets) != len(seeds):
        raise ValueError("need one dataset per seed")
    res = DenoiseResult({v: [] for v in VARIANTS}, {v: [] for v in VARIANTS}, {v: [] for v in VARIANTS}, list(seeds))
    for ds, seed in zip(datasets, seeds):
        n = len(ds)
        perm = np.random.default_rng(seed).permutation(n)
        n_test = max(1, int(round(n * cfg.test_fraction)))
        train, test = _subset(ds, np.sort(perm[n_test:])), _subset(ds, np.sort(perm[:n_test]))
        for v in VARIANTS:
            try:
                probs = _fit_predict(
                    variant_features(train, v), train.labels, variant_features(test, v, cfg.inference_goal),
                    ds.n_noise, cfg, seed,
                )
                res.accuracy[v].append(float(np.mean(probs.argmax(axis=1) == test.labels)))
                res.logloss[v].append(multiclass_logloss(probs, test.labels))
            except Exception as err:  # recorded per variant; the table keeps a gap
                res.accuracy[v].append(math.nan)
                res.logloss[v].append(math.nan)
                res.errors[v].append(f"seed {seed}: {err}")
    return res
