"""Synthetic environments: tabular multi-objective MDPs and the denoising generator."""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .data import ConfigError, Trajectory

MAX_ENUM_LEAVES = 1_000_000


class ResourceError(RuntimeError):
    """Enumeration or allocation budget exceeded."""


class PolicyError(ValueError):
    """A policy produced an invalid action or distribution."""


@dataclass
class MOMDPSpec:
    """Finite MDP with a d-dimensional reward.

    States are 0-based indices, actions are item ids 1..n_actions (stored at
    column ``a - 1`` of every table). ``terminal_prob[s, a-1]`` is the chance
    the session ends right after taking ``a`` in ``s``.
    """

    transition: np.ndarray  # (S, N, S)
    reward: np.ndarray  # (S, N, d)
    initial_dist: np.ndarray  # (S,)
    horizon: int
    terminal_prob: np.ndarray | float = 0.0
    names: dict = field(default_factory=dict)

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=np.float64)
        self.reward = np.asarray(self.reward, dtype=np.float64)
        self.initial_dist = np.asarray(self.initial_dist, dtype=np.float64)
        S, N = self.transition.shape[:2]
        if self.reward.ndim == 2:
            self.reward = self.reward[:, :, None]
        self.terminal_prob = np.broadcast_to(np.asarray(self.terminal_prob, dtype=np.float64), (S, N)).copy()
        self.validate()

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def d(self) -> int:
        return self.reward.shape[2]

    def validate(self) -> None:
        S, N = self.transition.shape[:2]
        if self.transition.shape != (S, N, S):
            raise ConfigError(f"transition must have shape (S, N, S), got {self.transition.shape}")
        if self.reward.shape[:2] != (S, N):
            raise ConfigError(f"reward must have shape (S, N, d), got {self.reward.shape}")
        if self.initial_dist.shape != (S,):
            raise ConfigError(f"initial_dist must have shape ({S},)")
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        for name, arr in (("transition", self.transition), ("initial_dist", self.initial_dist), ("terminal_prob", self.terminal_prob)):
            if not np.all(np.isfinite(arr)) or np.any(arr < 0):
                raise ConfigError(f"{name} must be finite and non-negative")
        if np.any(self.terminal_prob > 1):
            raise ConfigError("terminal_prob must be <= 1")
        if np.any(np.abs(self.transition.sum(axis=2) - 1.0) > 1e-9):
            raise ConfigError("every transition row must sum to 1")
        if abs(self.initial_dist.sum() - 1.0) > 1e-9:
            raise ConfigError("initial_dist must sum to 1")
        if not np.all(np.isfinite(self.reward)):
            raise ConfigError("reward entries must be finite")

    def to_json(self) -> dict:
        return {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "d": self.d,
            "transition": self.transition.tolist(),
            "reward": self.reward.tolist(),
            "initial_dist": self.initial_dist.tolist(),
            "horizon": self.horizon,
            "terminal_prob": self.terminal_prob.tolist(),
            "names": self.names,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "MOMDPSpec":
        return cls(
            transition=np.asarray(obj["transition"]),
            reward=np.asarray(obj["reward"]),
            initial_dist=np.asarray(obj["initial_dist"]),
            horizon=int(obj["horizon"]),
            terminal_prob=np.asarray(obj["terminal_prob"]),
            names=obj.get("names", {}),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "MOMDPSpec":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class StepContext:
    """What a policy may look at when choosing the action at ``timestep``.

    ``goal`` is the remaining goal g_t = g_1 - r_1 - ... - r_{t-1} when the
    rollout was started with a goal, otherwise None.
    """

    state: int
    timestep: int
    history: tuple[int, ...]
    goal: np.ndarray | None


# A policy returns either an action id or a probability vector over 1..N.
Policy = Callable[[StepContext], "int | np.ndarray"]


def _action_probs(policy: Policy, ctx: StepContext, n_actions: int) -> np.ndarray:
    out = policy(ctx)
    if isinstance(out, (int, np.integer)):
        a = int(out)
        if not 1 <= a <= n_actions:
            raise PolicyError(f"timestep {ctx.timestep}: action {a} outside [1, {n_actions}]")
        p = np.zeros(n_actions)
        p[a - 1] = 1.0
        return p
    p = np.asarray(out, dtype=np.float64)
    if p.shape != (n_actions,) or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-6:
        raise PolicyError(f"timestep {ctx.timestep}: policy must return an action or a distribution over {n_actions} actions")
    return p


def _pick(rng: np.random.Generator, p: np.ndarray) -> int:
    # inverse-CDF draw; one uniform per decision keeps streams aligned across policies
    u = rng.random()
    c = np.cumsum(p)
    return int(min(np.searchsorted(c, u * c[-1], side="right"), len(p) - 1))


def simulate(
    spec: MOMDPSpec,
    policy: Policy,
    n_trajectories: int,
    seed: int,
    s1: int | None = None,
    g1=None,
    return_states: bool = False,
):
    """Roll out ``policy`` in ``spec``.

    Each trajectory starts from ``s1`` (or a draw from the initial
    distribution), takes actions until the per-(s, a) termination coin comes
    up or the horizon is hit. With ``return_states`` the visited state
    sequences are returned alongside.
    """
    rng = np.random.default_rng(seed)
    g1 = None if g1 is None else np.asarray(g1, dtype=np.float64)
    trajs: list[Trajectory] = []
    all_states: list[list[int]] = []
    N = spec.n_actions
    for i in range(n_trajectories):
        s = int(s1) if s1 is not None else _pick(rng, spec.initial_dist)
        goal = None if g1 is None else g1.copy()
        actions: list[int] = []
        rewards: list[np.ndarray] = []
        states: list[int] = []
        for t in range(1, spec.horizon + 1):
            ctx = StepContext(s, t, tuple(actions), goal)
            a = _pick(rng, _action_probs(policy, ctx, N)) + 1
            r = spec.reward[s, a - 1]
            actions.append(a)
            rewards.append(r)
            states.append(s)
            if goal is not None:
                goal = goal - r
            if t == spec.horizon or rng.random() < spec.terminal_prob[s, a - 1]:
                break
            s = _pick(rng, spec.transition[s, a - 1])
        trajs.append(Trajectory.from_arrays(f"sim-{seed}-{i}", actions, np.array(rewards)))
        all_states.append(states)
    return (trajs, all_states) if return_states else trajs


class Branch(NamedTuple):
    trajectory: Trajectory
    probability: float
    states: tuple[int, ...]


def enumerate_trajectories(
    spec: MOMDPSpec,
    policy: Policy,
    s1: int,
    g1=None,
    max_len: int | None = None,
    max_leaves: int = MAX_ENUM_LEAVES,
) -> list[Branch]:
    """Every trajectory reachable from ``s1`` with its exact probability.

    Zero-probability branches are pruned. The walk aborts with
    ResourceError once more than ``max_leaves`` complete trajectories have
    been produced.
    """
    max_len = spec.horizon if max_len is None else min(max_len, spec.horizon)
    N = spec.n_actions
    out: list[Branch] = []
    g1 = None if g1 is None else np.asarray(g1, dtype=np.float64)

    def walk(s, t, actions, rewards, states, goal, prob):
        p = _action_probs(policy, StepContext(s, t, tuple(actions), goal), N)
        for a0 in np.flatnonzero(p > 0):
            a = int(a0) + 1
            r = spec.reward[s, a0]
            pa = prob * p[a0]
            acts, rews, sts = actions + [a], rewards + [r], states + [s]
            nxt_goal = None if goal is None else goal - r
            term = 1.0 if t == max_len else spec.terminal_prob[s, a0]
            if term > 0:
                if len(out) >= max_leaves:
                    raise ResourceError(f"enumeration exceeded {max_leaves} trajectories")
                out.append(Branch(Trajectory.from_arrays("enum", acts, np.array(rews)), pa * term, tuple(sts)))
            if term < 1:
                for s2 in np.flatnonzero(spec.transition[s, a0] > 0):
                    walk(int(s2), t + 1, acts, rews, sts, nxt_goal, pa * (1 - term) * spec.transition[s, a0, s2])

    walk(int(s1), 1, [], [], [], g1, 1.0)
    return out


def uniform_policy(n_actions: int) -> Policy:
    p = np.full(n_actions, 1.0 / n_actions)
    return lambda ctx: p


def tabular_policy(table) -> Policy:
    """State-only policy from an (S, N) probability table."""
    table = np.asarray(table, dtype=np.float64)
    return lambda ctx: table[ctx.state]


# ---------------------------------------------------------------------------
# noisy recommendation testbed


@dataclass
class NoisyRecsysConfig:
    """Knobs of the synthetic two-objective recommendation MDP.

    A hidden state is (context, mode). The context is the last recommended
    item (0 at session start). The mode is redrawn on every transition: with
    probability ``1 - noise`` the user is attentive ("clean"), otherwise
    the step is noisy: one of ``noise_modes`` (reward vectors) is drawn
    uniformly and paid no matter what is recommended.
    """

    n_items: int = 20
    n_preferred: int = 4
    n_decoys: int = 3
    noise: float = 0.5
    noise_modes: tuple[tuple[float, float], ...] = ((2, 0), (4, 0), (6, 0), (8, 0), (0, 2), (0, 4), (0, 8), (0, 16))
    clean_reward: tuple[float, float] = (1.0, 1.0)
    reward_scale: float = 1.0
    clean_stop: float = 0.1
    miss_stop: float = 0.5
    noisy_stop: float = 0.7
    horizon: int = 20
    purity: float = 0.9
    preferred: list | None = None
    seed: int = 0

    def __post_init__(self):
        self.noise_modes = tuple(tuple(float(c) for c in m) for m in self.noise_modes)
        self.clean_reward = tuple(float(c) for c in self.clean_reward)
        if self.n_items < 1:
            raise ConfigError("n_items must be >= 1")
        if not 1 <= self.n_preferred <= self.n_items:
            raise ConfigError("n_preferred must be in [1, n_items]")
        if not 0 <= self.n_decoys <= self.n_items - self.n_preferred:
            raise ConfigError("n_decoys must be in [0, n_items - n_preferred]")
        if not 0.0 <= self.noise <= 1.0:
            raise ConfigError("noise must be in [0, 1]")
        if not self.noise_modes or any(len(m) != 2 for m in self.noise_modes):
            raise ConfigError("noise_modes must be a non-empty list of 2-component reward vectors")
        if not all(math.isfinite(c) for m in self.noise_modes for c in m):
            raise ConfigError("noise rewards must be finite")
        if len(self.clean_reward) != 2:
            raise ConfigError("clean_reward must have 2 components (d=2)")
        for name in ("clean_stop", "miss_stop", "noisy_stop", "purity"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must be a probability")
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        if self.preferred is not None:
            table = np.asarray(self.preferred)
            if table.shape != (self.n_items + 1, self.n_preferred):
                raise ConfigError(f"preferred table must have shape ({self.n_items + 1}, {self.n_preferred})")
            if table.min() < 1 or table.max() > self.n_items:
                raise ConfigError("preferred table holds item ids outside [1, n_items]")
            if any(len(set(row)) != len(row) for row in table.tolist()):
                raise ConfigError("preferred items must be distinct within a row")

    @property
    def n_modes(self) -> int:
        return 1 + len(self.noise_modes)

    @property
    def n_states(self) -> int:
        return (self.n_items + 1) * self.n_modes


def _recsys_tables(cfg: NoisyRecsysConfig) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(cfg.seed)
    N = cfg.n_items
    pref = np.empty((N + 1, cfg.n_preferred), dtype=np.int64)
    decoy = np.empty((N + 1, cfg.n_decoys), dtype=np.int64)
    for ctx in range(N + 1):
        perm = rng.permutation(N) + 1
        pref[ctx] = perm[: cfg.n_preferred]
        decoy[ctx] = perm[cfg.n_preferred : cfg.n_preferred + cfg.n_decoys]
    if cfg.preferred is not None:
        pref = np.asarray(cfg.preferred, dtype=np.int64)
        for ctx in range(N + 1):
            rest = rng.permutation([a for a in range(1, N + 1) if a not in set(pref[ctx].tolist())])
            decoy[ctx] = rest[: cfg.n_decoys]
    return pref, decoy


def make_noisy_recsys_spec(cfg: NoisyRecsysConfig) -> MOMDPSpec:
    """Build the testbed MDP.

    State index = context * n_modes + mode. Mode 0 is clean; mode
    m >= 1 pays ``noise_modes[m - 1]``.
    In a clean state a preferred item pays ``clean_reward`` and the session
    goes on with probability ``1 - clean_stop``; anything else pays nothing
    and ends it with ``miss_stop``. Noisy states ignore the action and end
    the session with ``noisy_stop``. The next context is the recommended
    item. Item tables and the hidden-mode layout are stored in ``names``.
    """
    pref, decoy = _recsys_tables(cfg)
    N, M = cfg.n_items, cfg.n_modes
    S = (N + 1) * M
    mode_p = np.empty(M)
    mode_p[0] = 1.0 - cfg.noise
    mode_p[1:] = cfg.noise / (M - 1)
    transition = np.zeros((S, N, S))
    reward = np.zeros((S, N, 2))
    stop = np.zeros((S, N))
    for ctx in range(N + 1):
        for m in range(M):
            s = ctx * M + m
            for a in range(1, N + 1):
                transition[s, a - 1, a * M : (a + 1) * M] = mode_p
            if m == 0:
                hit = np.isin(np.arange(1, N + 1), pref[ctx])
                reward[s, hit] = cfg.clean_reward
                stop[s] = np.where(hit, cfg.clean_stop, cfg.miss_stop)
            else:
                reward[s, :] = cfg.noise_modes[m - 1]
                stop[s] = cfg.noisy_stop
    initial = np.zeros(S)
    initial[:M] = mode_p
    names = {
        "kind": "noisy_recsys",
        "n_modes": M,
        "preferred": pref.tolist(),
        "decoys": decoy.tolist(),
        "config": dataclasses.asdict(cfg),
    }
    return MOMDPSpec(transition, reward * cfg.reward_scale, initial, cfg.horizon, stop, names)


def recsys_state(spec: MOMDPSpec, state: int) -> tuple[int, int]:
    """(context, mode) of a testbed state."""
    return divmod(int(state), int(spec.names["n_modes"]))


def recsys_logging_table(spec: MOMDPSpec, purity: float | None = None) -> np.ndarray:
    """(S, N) action table of the simulated users that produce logged sessions.

    Attentive users pick a preferred item, distracted ones a decoy; with
    probability ``1 - purity`` either kind picks uniformly at random.
    """
    if purity is None:
        purity = spec.names["config"]["purity"]
    M, N = spec.names["n_modes"], spec.n_actions
    pref, decoy = spec.names["preferred"], spec.names["decoys"]
    table = np.full((spec.n_states, N), (1.0 - purity) / N)
    for s in range(spec.n_states):
        ctx, m = divmod(s, M)
        chosen = pref[ctx] if m == 0 or not decoy[ctx] else decoy[ctx]
        table[s, np.asarray(chosen) - 1] += purity / len(chosen)
    return table


def recsys_preferred_table(spec: MOMDPSpec) -> np.ndarray:
    """State-aware policy that always recommends a preferred item (uniformly)."""
    M, N = spec.names["n_modes"], spec.n_actions
    table = np.zeros((spec.n_states, N))
    for s in range(spec.n_states):
        row = spec.names["preferred"][s // M]
        table[s, np.asarray(row) - 1] = 1.0 / len(row)
    return table


# ---------------------------------------------------------------------------
# denoising dataset


@dataclass(frozen=True)
class DenoiseSample:
    state: np.ndarray
    goal: np.ndarray
    label: int
    clean_label: int

    @property
    def label_id(self) -> int:
        return self.label + 1


@dataclass
class DenoiseDataset:
    """Column-oriented denoising samples.

    ``clean_labels`` counts strictly positive state coordinates (0..50) and
    ``labels`` is the observed value on the same scale. Class identifiers
    used by classifiers and the CSV export are value + 1, so both branches
    live in [1, n_noise].
    """

    states: np.ndarray
    goals: np.ndarray
    labels: np.ndarray
    clean_labels: np.ndarray
    n_noise: int

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> DenoiseSample:
        return DenoiseSample(self.states[i], self.goals[i], int(self.labels[i]), int(self.clean_labels[i]))

    @property
    def noisy(self) -> np.ndarray:
        return self.labels != self.clean_labels

    def save_csv(self, path) -> None:
        """CSV with item ids in the trajectory-CSV layout plus diagnostics.

        Columns: traj_id, t, action, s_1..s_50, g_1..g_5, clean_label.
        ``action`` and ``clean_label`` are class ids (value + 1).
        """
        S, G = self.states.shape[1], self.goals.shape[1]
        header = ["traj_id", "t", "action"] + [f"s_{i + 1}" for i in range(S)] + [f"g_{i + 1}" for i in range(G)] + ["clean_label"]
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(",".join(header) + "\n")
            for i in range(len(self)):
                vals = [f"d{i}", "1", str(int(self.labels[i]) + 1)]
                vals += [repr(float(x)) for x in self.states[i]] + [repr(float(x)) for x in self.goals[i]]
                vals.append(str(int(self.clean_labels[i]) + 1))
                fh.write(",".join(vals) + "\n")

    @classmethod
    def load_csv(cls, path, n_noise: int = 51) -> "DenoiseDataset":
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().strip().split(",")
        arr = np.loadtxt(path, delimiter=",", skiprows=1, dtype=str, ndmin=2)
        s_cols = [i for i, h in enumerate(header) if h.startswith("s_")]
        g_cols = [i for i, h in enumerate(header) if h.startswith("g_")]
        return cls(
            states=arr[:, s_cols].astype(np.float64),
            goals=arr[:, g_cols].astype(np.float64),
            labels=arr[:, 2].astype(np.int64) - 1,
            clean_labels=arr[:, header.index("clean_label")].astype(np.int64) - 1,
            n_noise=n_noise,
        )


def generate_denoise_dataset(
    n_samples: int,
    seed: int,
    state_dim: int = 50,
    goal_dim: int = 5,
    n_noise: int = 51,
    threshold: float = -1.0,
) -> DenoiseDataset:
    """States and goals are independent standard normals.

    A sample keeps its true label only when every goal component exceeds
    ``threshold``; otherwise the label is uniform over the ``n_noise``
    classes, independent of the state. ``threshold=-inf`` gives a noise-free
    set.
    """
    if n_samples < 1:
        raise ConfigError("n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    states = rng.standard_normal((n_samples, state_dim))
    goals = rng.standard_normal((n_samples, goal_dim))
    clean = (states > 0).sum(axis=1).astype(np.int64)
    keep = (goals > threshold).all(axis=1)
    random_labels = rng.integers(0, n_noise, size=n_samples)
    labels = np.where(keep, clean, random_labels)
    return DenoiseDataset(states, goals, labels, clean, n_noise)


def noisy_fraction_exact(goal_dim: int = 5, threshold: float = -1.0) -> float:
    """P(any of ``goal_dim`` iid standard normals <= threshold)."""
    phi = 0.5 * (1 + math.erf(-threshold / math.sqrt(2)))
    return 1 - phi**goal_dim
