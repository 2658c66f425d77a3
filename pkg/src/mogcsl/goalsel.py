"""Inference-time goal selection: scaled dataset statistics or a CVAE pair + Pareto rule."""
from __future__ import annotations

import dataclasses
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .data import ConfigError, DatasetStats, RelabeledStep
from .policy import CHECKPOINT_VERSION, NumericError, PolicyModel, _read_checkpoint, pad_history


@dataclass
class StatStrategyConfig:
    lam: float = 1.0
    mode: str = "per_timestep_mean"

    def __post_init__(self):
        if not self.lam > 0:
            raise ConfigError(f"lambda must be positive, got {self.lam}")
        if self.mode not in ("per_timestep_mean", "global_mean", "max"):
            raise ConfigError(f"unknown statistical mode {self.mode!r}")


def statistical_goal(stats: DatasetStats, timestep: int, cfg: StatStrategyConfig) -> np.ndarray:
    """``lam`` times the mean training goal at ``timestep`` (clamped), the global mean, or the max."""
    if stats is None or not stats.per_timestep_mean_goal:
        raise ValueError("empty dataset statistics")
    if timestep < 1:
        raise ValueError("timestep must be >= 1")
    if cfg.mode == "per_timestep_mean":
        base = stats.per_timestep_mean_goal[min(timestep, stats.max_timestep)]
    elif cfg.mode == "global_mean":
        base = stats.global_mean_goal
    else:
        if stats.max_goal is None:
            raise ValueError("stats carry no max goal")
        base = stats.max_goal
    return cfg.lam * np.asarray(base, dtype=np.float64)


# ---------------------------------------------------------------------------
# CVAE


@dataclass
class CvaeConfig:
    latent_dim: int = 8
    hidden: tuple[int, ...] = (64, 64)
    sigma2: float = 1.0
    learning_rate: float = 1e-3
    batch_size: int = 256
    epochs: int = 30
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.latent_dim < 1 or not self.sigma2 > 0:
            raise ConfigError("latent_dim must be >= 1 and sigma2 > 0")


def _mlp(sizes: Sequence[int]) -> nn.Sequential:
    layers: list[nn.Module] = []
    for a, b in zip(sizes[:-2], sizes[1:-1]):
        layers += [nn.Linear(a, b), nn.ReLU()]
    layers.append(nn.Linear(sizes[-2], sizes[-1]))
    return nn.Sequential(*layers)


class CVAE(nn.Module):
    """Gaussian CVAE: Q(z | g, c) = N(mu, diag(var)), P(g | z, c) = N(f(z, c), sigma2 I).

    Inputs are standardized internally; the decoder mean is returned in
    goal units so ``sigma2`` is a variance in those units.
    """

    def __init__(self, cond_dim: int, goal_dim: int, cfg: CvaeConfig):
        super().__init__()
        self.cond_dim, self.goal_dim, self.cfg = cond_dim, goal_dim, cfg
        self.enc = _mlp([goal_dim + cond_dim, *cfg.hidden, 2 * cfg.latent_dim])
        self.dec = _mlp([cfg.latent_dim + cond_dim, *cfg.hidden, goal_dim])
        for name, dim in (("c_mean", cond_dim), ("c_std", cond_dim), ("g_mean", goal_dim), ("g_std", goal_dim)):
            self.register_buffer(name, torch.zeros(dim) if "mean" in name else torch.ones(dim))

    def fit_normalization(self, cond: torch.Tensor, goal: torch.Tensor) -> None:
        for t, m, s in ((cond, self.c_mean, self.c_std), (goal, self.g_mean, self.g_std)):
            m.copy_(t.mean(0))
            sd = t.std(0, unbiased=False)
            s.copy_(torch.where(sd < 1e-6, torch.ones_like(sd), sd))

    def _c(self, cond):
        return (cond - self.c_mean) / self.c_std

    def encode(self, goal, cond):
        h = self.enc(torch.cat([(goal - self.g_mean) / self.g_std, self._c(cond)], dim=-1))
        mu, logvar = h.chunk(2, dim=-1)
        return mu, logvar.clamp(-12, 8)

    def decode(self, z, cond):
        return self.g_mean + self.g_std * self.dec(torch.cat([z, self._c(cond)], dim=-1))

    def loss_terms(self, goal, cond, generator=None):
        """Per-sample (reconstruction NLL, KL) with one reparameterized draw."""
        mu, logvar = self.encode(goal, cond)
        eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
        z = mu + torch.exp(0.5 * logvar) * eps
        mean = self.decode(z, cond)
        s2 = self.cfg.sigma2
        recon = 0.5 * ((goal - mean) ** 2).sum(-1) / s2 + 0.5 * self.goal_dim * math.log(2 * math.pi * s2)
        kl = 0.5 * (mu**2 + logvar.exp() - 1 - logvar).sum(-1)
        return recon, kl

    @torch.no_grad()
    def sample(self, cond: torch.Tensor, n: int, generator=None, noise: bool = True) -> torch.Tensor:
        """``n`` draws of g for one condition vector ``cond`` (shape (cond_dim,))."""
        dtype = self.g_mean.dtype
        z = torch.randn((n, self.cfg.latent_dim), generator=generator, dtype=dtype)
        mean = self.decode(z, cond.to(dtype).expand(n, -1))
        if noise:
            mean = mean + math.sqrt(self.cfg.sigma2) * torch.randn(mean.shape, generator=generator, dtype=dtype)
        return mean

    @torch.no_grad()
    def conditional_mean(self, cond: torch.Tensor, n: int = 4096, generator=None) -> torch.Tensor:
        """E[g | c] = E_z f(z, c), estimated over ``n`` latent draws (no decoder noise)."""
        return self.sample(cond, n, generator, noise=False).mean(0)


@dataclass
class CvaeTrace:
    loss: list[float] = field(default_factory=list)
    recon: list[float] = field(default_factory=list)
    kl: list[float] = field(default_factory=list)


def fit_cvae(model: CVAE, goal: torch.Tensor, cond: torch.Tensor) -> CvaeTrace:
    """Minimize reconstruction NLL + KL(Q || N(0, I)) by minibatch Adam."""
    cfg = model.cfg
    model.fit_normalization(cond, goal)
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    trace = CvaeTrace()
    n = len(goal)
    for epoch in range(cfg.epochs):
        model.train()
        perm = torch.randperm(n, generator=gen)
        tot_r = tot_k = 0.0
        for b, i in enumerate(range(0, n, cfg.batch_size)):
            idx = perm[i : i + cfg.batch_size]
            recon, kl = model.loss_terms(goal[idx], cond[idx], gen)
            loss = (recon + kl).mean()
            if not torch.isfinite(loss):
                raise NumericError(f"non-finite CVAE ELBO at epoch {epoch} batch {b} (learning_rate={cfg.learning_rate})")
            opt.zero_grad()
            loss.backward()
            opt.step()
            tot_r += recon.sum().item()
            tot_k += kl.sum().item()
        trace.recon.append(tot_r / n)
        trace.kl.append(tot_k / n)
        trace.loss.append((tot_r + tot_k) / n)
    model.eval()
    return trace


@dataclass
class CvaePair:
    """Achievable-goal model P(g^a | s, g') and goal prior q(g' | s).

    ``s`` is the goal-free state embedding of the frozen policy.
    """

    achievable: CVAE
    prior: CVAE
    cfg: CvaeConfig
    traces: dict[str, CvaeTrace] = field(default_factory=dict)
    seconds: float = 0.0

    @property
    def d(self) -> int:
        return self.prior.goal_dim

    def save(self, path) -> None:
        torch.save(
            {
                "format": "mogcsl-cvae",
                "version": CHECKPOINT_VERSION,
                "config": dataclasses.asdict(self.cfg) | {"hidden": list(self.cfg.hidden)},
                "cond_dim": self.prior.cond_dim,
                "goal_dim": self.prior.goal_dim,
                "achievable": self.achievable.state_dict(),
                "prior": self.prior.state_dict(),
            },
            path,
        )

    @classmethod
    def load(cls, path) -> "CvaePair":
        payload = _read_checkpoint(path, "mogcsl-cvae")
        cfg = CvaeConfig(**payload["config"])
        s_dim, d = payload["cond_dim"], payload["goal_dim"]
        ach, pri = CVAE(s_dim + d, d, cfg).double(), CVAE(s_dim, d, cfg).double()
        ach.load_state_dict(payload["achievable"])
        pri.load_state_dict(payload["prior"])
        ach.eval(), pri.eval()
        return cls(ach, pri, cfg)


@torch.no_grad()
def state_embeddings(policy: PolicyModel, steps: Sequence[RelabeledStep]) -> torch.Tensor:
    policy.eval()
    w = policy.config.window
    hist = torch.as_tensor(np.array([pad_history(s.history, w) for s in steps], dtype=np.int64).reshape(-1, w))
    t = torch.as_tensor([s.timestep for s in steps], dtype=torch.long)
    return policy.state_embedding(hist, t).double()


@torch.no_grad()
def state_embedding(policy: PolicyModel, history, timestep: int) -> torch.Tensor:
    policy.eval()
    w = policy.config.window
    hist = torch.as_tensor([pad_history(history, w)])
    return policy.state_embedding(hist, torch.as_tensor([timestep]))[0].double()


def train_cvaes(train_steps: Sequence[RelabeledStep], policy: PolicyModel, cfg: CvaeConfig | None = None) -> CvaePair:
    """Fit both CVAEs on (state, goal) pairs of the relabeled training data.

    The achievable model is conditioned on (state, goal) and reconstructs the
    same goal: every logged trajectory achieved exactly the goal it is
    labeled with under the imitating policy.
    """
    if not train_steps:
        raise ValueError("empty training set")
    cfg = cfg or CvaeConfig()
    start = time.perf_counter()
    s = state_embeddings(policy, train_steps)
    g = torch.as_tensor(np.array([st.goal for st in train_steps]), dtype=torch.float64)
    torch.manual_seed(cfg.seed)
    ach = CVAE(s.shape[1] + g.shape[1], g.shape[1], cfg).double()
    pri = CVAE(s.shape[1], g.shape[1], cfg).double()
    traces = {
        "achievable": fit_cvae(ach, g, torch.cat([s, g], dim=1)),
        "prior": fit_cvae(pri, g, s),
    }
    return CvaePair(ach, pri, cfg, traces, time.perf_counter() - start)


def sample_achievable(pair: CvaePair, s, g_input, n: int, generator=None):
    """``n`` draws of the achieved goal for input goal ``g_input`` at state ``s``, and their mean."""
    s = torch.as_tensor(s, dtype=torch.float64)
    g_input = torch.as_tensor(np.asarray(g_input, dtype=np.float64))
    draws = pair.achievable.sample(torch.cat([s, g_input]), n, generator)
    return draws.numpy(), draws.mean(0).numpy()


# ---------------------------------------------------------------------------
# selection


@dataclass
class GoalChoice:
    chosen_input_goal: np.ndarray
    expected_achieved: np.ndarray
    index: int
    candidates: np.ndarray  # (K, d) input goals g'
    expectations: np.ndarray  # (K, d) expected achieved goals
    nondominated: list[int]

    @property
    def K(self) -> int:
        return len(self.candidates)

    def to_dict(self) -> dict:
        return {
            "chosen_input_goal": self.chosen_input_goal.tolist(),
            "expected_achieved": self.expected_achieved.tolist(),
            "index": self.index,
            "K": self.K,
            "candidates": self.candidates.tolist(),
            "expectations": self.expectations.tolist(),
            "nondominated": self.nondominated,
        }


def dominates(g: np.ndarray, h: np.ndarray) -> bool:
    """g is >= h everywhere and differs somewhere."""
    return bool(np.all(g >= h) and np.any(g != h))


def nondominated_indices(points: np.ndarray) -> list[int]:
    pts = np.asarray(points, dtype=np.float64)
    ge = np.all(pts[:, None, :] >= pts[None, :, :], axis=2)
    gt = np.any(pts[:, None, :] > pts[None, :, :], axis=2)
    dominated = (ge & gt).any(axis=0)
    return np.flatnonzero(~dominated).tolist()


def lexicographic(g: np.ndarray) -> tuple:
    return tuple(g)


def pareto_best(candidates: Sequence[tuple], utility: Callable | None = None) -> GoalChoice:
    """Pick a non-dominated expected goal and return it with its input goal.

    Among non-dominated candidates the maximizer of ``utility`` wins
    (lexicographic over objectives by default); equal keys go to the lowest
    index.
    """
    if not candidates:
        raise ValueError("no candidates")
    inputs = np.array([np.asarray(c[0], dtype=np.float64) for c in candidates])
    exps = np.array([np.asarray(c[1], dtype=np.float64) for c in candidates])
    front = nondominated_indices(exps)
    key = utility or lexicographic
    best = front[0]
    for i in front[1:]:
        if key(exps[i]) > key(exps[best]):
            best = i
    return GoalChoice(inputs[best].copy(), exps[best].copy(), best, inputs, exps, front)


def choose_goal(
    pair: CvaePair,
    s,
    K: int = 20,
    utility: Callable | None = None,
    n_achievable: int = 64,
    seed: int | None = None,
    generator: torch.Generator | None = None,
    prior_noise: bool = True,
) -> GoalChoice:
    """Sample K input goals from the prior at ``s``, score each by its expected achieved goal, keep the best."""
    if K < 1:
        raise ValueError("K must be >= 1")
    if generator is None:
        generator = torch.Generator().manual_seed(0 if seed is None else seed)
    s = torch.as_tensor(s, dtype=torch.float64)
    g_inputs = pair.prior.sample(s, K, generator, noise=prior_noise)
    cond = torch.cat([s.expand(K, -1), g_inputs], dim=1)
    # K * n_achievable draws in one pass
    with torch.no_grad():
        z = torch.randn((K, n_achievable, pair.cfg.latent_dim), generator=generator, dtype=torch.float64)
        means = pair.achievable.decode(z, cond[:, None, :].expand(-1, n_achievable, -1))
        draws = means + math.sqrt(pair.cfg.sigma2) * torch.randn(means.shape, generator=generator, dtype=torch.float64)
    expected = draws.mean(1).numpy()
    return pareto_best(list(zip(g_inputs.numpy(), expected)), utility)
