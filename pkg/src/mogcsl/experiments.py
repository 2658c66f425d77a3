"""End-to-end runs on the synthetic recommendation testbed.

One seed = simulate logged sessions, split 8:1:1, relabel, train the
vector-goal policy and the scalar-goal baselines, then score test cases
under each goal strategy.
"""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .data import ConfigError, DatasetStats, Trajectory, compute_stats, relabel_all, split
from .envs import (
    MOMDPSpec,
    NoisyRecsysConfig,
    StepContext,
    make_noisy_recsys_spec,
    recsys_logging_table,
    simulate,
    tabular_policy,
)
from .evaluation import DEFAULT_KS, MetricsReport, metric_values, truth_ranks
from .goalsel import CvaeConfig, CvaePair, StatStrategyConfig, choose_goal, statistical_goal, train_cvaes
from .policy import PolicyConfig, PolicyModel, build_model, pad_history, predict, predict_batch, scalarize_goals, train

log = logging.getLogger(__name__)

OBJECTIVES = ("obj1", "obj2")


@dataclass
class EvalSet:
    """Test steps in array form: padded histories, timesteps, logged actions, reward flags."""

    hist: np.ndarray
    t: np.ndarray
    action: np.ndarray
    flags: np.ndarray

    def __len__(self) -> int:
        return len(self.t)


def build_eval_set(trajs: Sequence[Trajectory], window: int) -> EvalSet:
    steps = relabel_all(trajs)
    if not steps:
        raise ValueError("no test steps")
    hist = np.array([pad_history(s.history, window) for s in steps], dtype=np.int64).reshape(-1, window)
    return EvalSet(
        hist,
        np.array([s.timestep for s in steps], dtype=np.int64),
        np.array([s.action for s in steps], dtype=np.int64),
        np.array([s.reward > 0 for s in steps], dtype=bool),
    )


def stat_goals(stats: DatasetStats, t: np.ndarray, lam: float, mode: str = "per_timestep_mean") -> np.ndarray:
    cfg = StatStrategyConfig(lam=lam, mode=mode)
    table = {int(ti): statistical_goal(stats, int(ti), cfg) for ti in np.unique(t)}
    return np.array([table[int(ti)] for ti in t])


@torch.no_grad()
def cvae_goals(pair: CvaePair, policy: PolicyModel, ev: EvalSet, K: int = 20, n_achievable: int = 64, seed: int = 0) -> np.ndarray:
    """Goal per test case chosen by the CVAE pair and the Pareto rule."""
    policy.eval()
    emb = policy.state_embedding(torch.as_tensor(ev.hist), torch.as_tensor(ev.t)).double()
    gen = torch.Generator().manual_seed(seed)
    return np.array([choose_goal(pair, emb[i], K=K, n_achievable=n_achievable, generator=gen).chosen_input_goal for i in range(len(ev))])


def evaluate_goals(model: PolicyModel, ev: EvalSet, goals: np.ndarray, ks=DEFAULT_KS, objectives=OBJECTIVES) -> dict:
    probs = predict_batch(model, ev.hist, ev.t, goals)
    return metric_values(truth_ranks(probs, ev.action), ev.flags, ks, objectives)


# ---------------------------------------------------------------------------
# online rollouts


def model_policy(model: PolicyModel, goal_fn: Callable[[StepContext], np.ndarray] | None = None) -> Callable:
    """Wrap a trained model as an environment policy.

    Without ``goal_fn`` the remaining goal carried by the rollout (g1 minus
    rewards so far) is fed to the model; with it, the goal is reselected at
    every step.
    """

    def act(ctx: StepContext):
        goal = goal_fn(ctx) if goal_fn is not None else ctx.goal
        if goal is None:
            raise ValueError("rollout needs g1 or a goal function")
        hist = ctx.history[-model.config.window:]
        return predict(model, hist, min(ctx.timestep, model.config.max_timestep), goal)

    return act


def rollout_mean_goal(spec: MOMDPSpec, model: PolicyModel, n: int, seed: int, g1=None, goal_fn=None) -> np.ndarray:
    trajs = simulate(spec, model_policy(model, goal_fn), n, seed, g1=g1)
    return np.mean([tr.rewards().sum(axis=0) for tr in trajs], axis=0)


# ---------------------------------------------------------------------------
# experiment


@dataclass
class ExperimentConfig:
    env: NoisyRecsysConfig = field(default_factory=NoisyRecsysConfig)
    n_sessions: int = 10000
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    policy: dict = field(default_factory=lambda: {"item_embed_dim": 32, "goal_embed_dim": 32, "timestep_embed_dim": 32, "encoder_width": 32, "mlp_hidden_sizes": (64,)})
    lambdas: tuple[float, ...] = (1.0, 1.5, 2.0, 8.0)
    weights: tuple[float, ...] = (0.1, 0.5, 0.9)
    ks: tuple[int, ...] = DEFAULT_KS
    cvae: CvaeConfig | None = field(default_factory=CvaeConfig)
    K: int = 20
    n_achievable: int = 64
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)

    def __post_init__(self):
        if isinstance(self.env, dict):
            self.env = NoisyRecsysConfig(**self.env)
        if isinstance(self.cvae, dict):
            self.cvae = CvaeConfig(**self.cvae)
        if self.n_sessions < 10:
            raise ConfigError("n_sessions must be >= 10")
        if not self.seeds:
            raise ConfigError("at least one seed is required")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "ExperimentConfig":
        obj = dict(obj)
        for key in ("ratios", "lambdas", "weights", "ks", "seeds"):
            if key in obj:
                obj[key] = tuple(obj[key])
        return cls(**obj)


def prepare_data(cfg: ExperimentConfig, seed: int):
    spec = make_noisy_recsys_spec(cfg.env)
    logged = simulate(spec, tabular_policy(recsys_logging_table(spec)), cfg.n_sessions, seed)
    train_t, valid_t, test_t = split(logged, cfg.ratios, seed)
    return spec, train_t, valid_t, test_t


def policy_config(cfg: ExperimentConfig, seed: int, goal_mode: str = "vector", weights=None, max_timestep: int = 64) -> PolicyConfig:
    extra = dict(cfg.policy)
    if "mlp_hidden_sizes" in extra:
        extra["mlp_hidden_sizes"] = tuple(extra["mlp_hidden_sizes"])
    return PolicyConfig(
        n_items=cfg.env.n_items, d=2, seed=seed, goal_mode=goal_mode, weights=weights, max_timestep=max_timestep, **extra
    )


def fit_policy(pcfg: PolicyConfig, train_steps, valid_steps) -> PolicyModel:
    torch.manual_seed(pcfg.seed)
    if pcfg.goal_mode == "scalar":
        train_steps = scalarize_goals(train_steps, pcfg.weights)
        valid_steps = scalarize_goals(valid_steps, pcfg.weights)
    model = build_model(pcfg, train_steps)
    train(model, train_steps, valid_steps)
    return model


def run_seed(cfg: ExperimentConfig, seed: int, baselines: bool = True, use_cvae: bool = True) -> dict[str, dict]:
    """Metrics of every model/strategy for one seed, keyed by label.

    Labels: ``mogcsl-s@<lam>``, ``mogcsl-c``, ``moprl-w<w>@<lam>``.
    """
    spec, train_t, valid_t, test_t = prepare_data(cfg, seed)
    tr_steps, va_steps = relabel_all(train_t), relabel_all(valid_t)
    stats = compute_stats(train_t)
    max_t = max(stats.max_timestep, cfg.env.horizon)
    pcfg = policy_config(cfg, seed, max_timestep=max_t)
    ev = build_eval_set(test_t, pcfg.window)
    out: dict[str, dict] = {}
    model = fit_policy(pcfg, tr_steps, va_steps)
    for lam in cfg.lambdas:
        out[f"mogcsl-s@{lam:g}"] = evaluate_goals(model, ev, stat_goals(stats, ev.t, lam), cfg.ks)
    if use_cvae and cfg.cvae is not None:
        pair = train_cvaes(tr_steps, model, dataclasses.replace(cfg.cvae, seed=seed))
        goals = cvae_goals(pair, model, ev, cfg.K, cfg.n_achievable, seed)
        out["mogcsl-c"] = evaluate_goals(model, ev, goals, cfg.ks)
    if baselines:
        for w in cfg.weights:
            wv = np.array([w, 1.0 - w])
            scfg = policy_config(cfg, seed, "scalar", wv.tolist(), max_t)
            smodel = fit_policy(scfg, tr_steps, va_steps)
            for lam in cfg.lambdas:
                goals = stat_goals(stats, ev.t, lam) @ wv
                out[f"moprl-w{w:g}@{lam:g}"] = evaluate_goals(smodel, ev, goals[:, None], cfg.ks)
    return out


def run_experiment(cfg: ExperimentConfig, baselines: bool = True, use_cvae: bool = True, progress: Callable | None = None) -> dict[str, MetricsReport]:
    runs = []
    for seed in cfg.seeds:
        runs.append(run_seed(cfg, seed, baselines, use_cvae))
        if progress:
            progress(seed)
    labels = list(runs[0])
    meta = {"n_sessions": cfg.n_sessions, "noise": cfg.env.noise, "reward_scale": cfg.env.reward_scale}
    return {
        label: MetricsReport.from_runs([r[label] for r in runs], list(cfg.seeds), list(OBJECTIVES), cfg.ks, {**meta, "label": label})
        for label in labels
    }
