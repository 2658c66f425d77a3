"""Exact and Monte-Carlo checks that the achieved-goal distribution is a
function of (s1, g1, policy) on tiny tabular MDPs."""
from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .envs import MAX_ENUM_LEAVES, MOMDPSpec, Policy, StepContext, enumerate_trajectories, simulate, tabular_policy

DECIMALS = 9


def goal_key(g) -> tuple:
    """Hashable, rounding-stable key for a goal vector (adding 0.0 folds -0.0 into 0.0)."""
    return tuple(round(float(x), DECIMALS) + 0.0 for x in np.asarray(g, dtype=np.float64).reshape(-1))


@dataclass
class GoalDistribution:
    support: list[tuple]
    probabilities: list[float]

    def __post_init__(self):
        if len(self.support) != len(self.probabilities):
            raise ValueError("support and probabilities differ in length")
        if len(set(self.support)) != len(self.support):
            raise ValueError("support entries must be distinct")
        if any(p < 0 for p in self.probabilities):
            raise ValueError("negative probability")
        if self.support and abs(sum(self.probabilities) - 1.0) > 1e-9:
            raise ValueError(f"probabilities sum to {sum(self.probabilities)}")

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple]) -> "GoalDistribution":
        mass: dict[tuple, float] = defaultdict(float)
        for g, p in pairs:
            mass[goal_key(g)] += float(p)
        keys = sorted(mass)
        return cls(keys, [mass[k] for k in keys])

    def as_dict(self) -> dict[tuple, float]:
        return dict(zip(self.support, self.probabilities))

    def prob(self, g) -> float:
        return self.as_dict().get(goal_key(g), 0.0)

    def mean(self) -> np.ndarray:
        return np.sum([np.array(g) * p for g, p in zip(self.support, self.probabilities)], axis=0)

    def to_dict(self) -> dict:
        return {"support": [list(g) for g in self.support], "probabilities": self.probabilities}


def tv_distance(p: GoalDistribution, q: GoalDistribution) -> float:
    a, b = p.as_dict(), q.as_dict()
    return 0.5 * sum(abs(a.get(k, 0.0) - b.get(k, 0.0)) for k in set(a) | set(b))


def exact_goal_distribution(spec: MOMDPSpec, policy: Policy, s1: int, g1=None, max_len=None, max_leaves: int = MAX_ENUM_LEAVES) -> GoalDistribution:
    branches = enumerate_trajectories(spec, policy, s1, g1, max_len, max_leaves)
    return GoalDistribution.from_pairs((b.trajectory.rewards().sum(axis=0), b.probability) for b in branches)


def empirical_goal_distribution(spec: MOMDPSpec, policy: Policy, s1: int, g1=None, n: int = 100_000, seed: int = 0) -> GoalDistribution:
    if n < 1:
        raise ValueError("n must be >= 1")
    trajs = simulate(spec, policy, n, seed, s1=s1, g1=g1)
    return GoalDistribution.from_pairs((tr.rewards().sum(axis=0), 1.0 / n) for tr in trajs)


# ---------------------------------------------------------------------------
# joint (s_t, g_t) marginals


def forward_state_goal(spec: MOMDPSpec, policy: Policy, s1: int, g1, steps: int) -> list[dict]:
    """Pr(s_t = s, g_t = g, session alive at t) for t = 1..steps by forward recursion.

    The remaining goal drops by the received reward each step; mass that
    terminates (or hits the horizon) leaves the recursion. The policy must
    be Markov in (state, timestep, goal): it is queried with an empty history.
    """
    g1 = np.asarray(g1, dtype=np.float64)
    out = [{(int(s1), goal_key(g1)): 1.0}]
    goals = {goal_key(g1): g1}
    for t in range(1, steps):
        nxt: dict = defaultdict(float)
        if t < spec.horizon:
            for (s, gk), mass in out[-1].items():
                g = goals[gk]
                pa = policy(StepContext(s, t, (), g))
                if isinstance(pa, (int, np.integer)):
                    pa = np.eye(spec.n_actions)[int(pa) - 1]
                pa = np.asarray(pa, dtype=np.float64)
                for a0 in np.flatnonzero(pa > 0):
                    g2 = g - spec.reward[s, a0]
                    k2 = goal_key(g2)
                    goals[k2] = g2
                    alive = mass * pa[a0] * (1.0 - spec.terminal_prob[s, a0])
                    for s2 in np.flatnonzero(spec.transition[s, a0] > 0):
                        nxt[(int(s2), k2)] += alive * spec.transition[s, a0, s2]
        out.append(dict(nxt))
    return out


def enumerated_state_goal(spec: MOMDPSpec, policy: Policy, s1: int, g1, steps: int) -> list[dict]:
    """The same joint marginals read off the full trajectory enumeration."""
    g1 = np.asarray(g1, dtype=np.float64)
    out = [defaultdict(float) for _ in range(steps)]
    for b in enumerate_trajectories(spec, policy, s1, g1):
        rewards = b.trajectory.rewards()
        g = g1.copy()
        for t in range(min(len(b.states), steps)):
            out[t][(int(b.states[t]), goal_key(g))] += b.probability
            g = g - rewards[t]
    return [dict(d) for d in out]


def joint_max_abs_diff(a: Sequence[dict], b: Sequence[dict]) -> float:
    worst = 0.0
    for da, db in zip(a, b):
        for k in set(da) | set(db):
            worst = max(worst, abs(da.get(k, 0.0) - db.get(k, 0.0)))
    return worst


def tv_convergence_slope(spec: MOMDPSpec, policy: Policy, s1: int, g1=None, ns=(1_000, 10_000, 100_000), seed: int = 0, repeats: int = 5) -> float:
    """Log-log slope of the mean TV(empirical, exact) against n."""
    exact = exact_goal_distribution(spec, policy, s1, g1)
    tvs = [np.mean([tv_distance(empirical_goal_distribution(spec, policy, s1, g1, n, seed + 1000 * r + i), exact) for r in range(repeats)]) for i, n in enumerate(ns)]
    return float(np.polyfit(np.log(ns), np.log(tvs), 1)[0])


# ---------------------------------------------------------------------------
# verification report


@dataclass
class CaseResult:
    name: str
    s1: int
    g1: list | None
    tv_exact_vs_empirical: float
    tv_between_seeds: float
    tolerance: float
    passed: bool


@dataclass
class SensitivityResult:
    name: str
    tv: float
    expect_change: bool
    threshold: float
    passed: bool


@dataclass
class TheoremReport:
    cases: list[CaseResult] = field(default_factory=list)
    sensitivity: list[SensitivityResult] = field(default_factory=list)
    n: int = 0
    seed: int = 0

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.cases) and all(s.passed for s in self.sensitivity)

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "n": self.n,
            "seed": self.seed,
            "cases": [asdict(c) for c in self.cases],
            "sensitivity": [asdict(s) for s in self.sensitivity],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


@dataclass
class SensitivityCheck:
    """Two settings whose exact achieved-goal distributions are compared.

    Each side is (spec, policy, s1, g1). With ``expect_change`` the check
    passes when TV >= ``threshold``; otherwise when TV <= 1e-9.
    """

    name: str
    left: tuple
    right: tuple
    expect_change: bool = True
    threshold: float = 0.1


def check_sensitivity(chk: SensitivityCheck) -> SensitivityResult:
    tv = tv_distance(exact_goal_distribution(*chk.left), exact_goal_distribution(*chk.right))
    ok = tv >= chk.threshold if chk.expect_change else tv <= 1e-9
    return SensitivityResult(chk.name, tv, chk.expect_change, chk.threshold, ok)


def verify_theorem1(
    spec: MOMDPSpec,
    policy: Policy,
    cases: Sequence[tuple],
    n: int = 100_000,
    seed: int = 0,
    tolerance: float = 0.02,
    sensitivity: Sequence[SensitivityCheck] = (),
    name: str = "spec",
    report: TheoremReport | None = None,
) -> TheoremReport:
    """Claim (a): for each (s1, g1) the empirical distribution matches the
    exact one and two independent seeds agree, within ``tolerance`` TV.
    Claim (b): each sensitivity check sees (or does not see) a change."""
    if not cases:
        raise ValueError("at least one (s1, g1) case is required")
    report = report or TheoremReport(n=n, seed=seed)
    for i, (s1, g1) in enumerate(cases):
        exact = exact_goal_distribution(spec, policy, s1, g1)
        e1 = empirical_goal_distribution(spec, policy, s1, g1, n, seed + 2 * i)
        e2 = empirical_goal_distribution(spec, policy, s1, g1, n, seed + 2 * i + 1)
        tv_exact, tv_seeds = tv_distance(e1, exact), tv_distance(e1, e2)
        report.cases.append(
            CaseResult(
                f"{name}[{i}]",
                int(s1),
                None if g1 is None else [float(x) for x in np.asarray(g1).reshape(-1)],
                tv_exact,
                tv_seeds,
                tolerance,
                tv_exact <= tolerance and tv_seeds <= tolerance,
            )
        )
    for chk in sensitivity:
        report.sensitivity.append(check_sensitivity(chk))
    return report


# ---------------------------------------------------------------------------
# hand-built specs


def _spec(transition, reward, horizon, terminal_prob=0.0, initial=None) -> MOMDPSpec:
    transition = np.asarray(transition, dtype=np.float64)
    S = transition.shape[0]
    init = np.eye(S)[0] if initial is None else np.asarray(initial, dtype=np.float64)
    return MOMDPSpec(transition, np.asarray(reward, dtype=np.float64), init, horizon, terminal_prob)


def chain_spec() -> MOMDPSpec:
    """3 states, 2 actions: action 1 walks right (reward on objective 1), action 2 stays (objective 2)."""
    T = np.zeros((3, 2, 3))
    for s in range(3):
        T[s, 0, min(s + 1, 2)] = 1.0
        T[s, 1, s] = 0.7
        T[s, 1, (s + 1) % 3] = 0.3
    R = np.zeros((3, 2, 2))
    R[:, 0] = [[1, 0], [2, 0], [0, 1]]
    R[:, 1] = [[0, 1], [1, 1], [0, 2]]
    return _spec(T, R, 4, terminal_prob=0.2)


def random_spec(seed: int, n_states: int = 4, n_actions: int = 3, horizon: int = 4, d: int = 2, max_reward: int = 2) -> MOMDPSpec:
    """Dense random spec with small integer rewards and random termination."""
    rng = np.random.default_rng(seed)
    T = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    R = rng.integers(0, max_reward + 1, size=(n_states, n_actions, d)).astype(np.float64)
    term = rng.uniform(0.0, 0.5, size=(n_states, n_actions))
    init = rng.dirichlet(np.ones(n_states))
    return MOMDPSpec(T, R, init, horizon, term)


def two_room_spec() -> MOMDPSpec:
    """5 states, 3 actions, deterministic moves with a trap state that ends the session."""
    T = np.zeros((5, 3, 5))
    moves = {0: (1, 2, 0), 1: (3, 4, 0), 2: (4, 3, 1), 3: (3, 0, 4), 4: (4, 4, 4)}
    for s, targets in moves.items():
        for a, s2 in enumerate(targets):
            T[s, a, s2] = 1.0
    R = np.zeros((5, 3, 2))
    R[1, 0] = [1, 0]
    R[1, 1] = [0, 1]
    R[2, 0] = [1, 1]
    R[3, :] = [2, 0]
    R[3, 2] = [0, 3]
    term = np.zeros((5, 3))
    term[4, :] = 1.0
    return _spec(T, R, 4, terminal_prob=term)


def goal_seeking_policy(n_actions: int = 2) -> Policy:
    """Pick action 1 while objective 1 is still owed, otherwise action 2; random 30% of the time."""

    def act(ctx: StepContext):
        p = np.full(n_actions, 0.3 / n_actions)
        owed = ctx.goal is not None and ctx.goal[0] > 0
        p[0 if owed else 1] += 0.7
        return p

    return act


def builtin_cases() -> list[dict]:
    """Three hand-built (spec, policy, cases) bundles used by the acceptance check."""
    chain = chain_spec()
    room = two_room_spec()
    rand = random_spec(7, n_states=4, n_actions=3, horizon=3)
    return [
        {"name": "chain", "spec": chain, "policy": goal_seeking_policy(2), "cases": [(0, (3.0, 1.0)), (1, (0.0, 0.0))]},
        {"name": "two_room", "spec": room, "policy": tabular_policy(np.full((5, 3), 1 / 3)), "cases": [(0, (0.0, 0.0)), (2, (2.0, 2.0))]},
        {"name": "random", "spec": rand, "policy": tabular_policy(np.random.default_rng(3).dirichlet(np.ones(3), size=4)), "cases": [(0, None), (3, None)]},
    ]


def builtin_sensitivity() -> list[SensitivityCheck]:
    chain = chain_spec()
    seek = goal_seeking_policy(2)
    blind = tabular_policy(np.full((3, 2), 0.5))
    return [
        SensitivityCheck("goal-sensitive policy, g1 (0,0) vs (5,5)", (chain, seek, 0, (0.0, 0.0)), (chain, seek, 0, (5.0, 5.0)), True, 0.1),
        SensitivityCheck("goal-blind policy, g1 (0,0) vs (5,5)", (chain, blind, 0, (0.0, 0.0)), (chain, blind, 0, (5.0, 5.0)), False),
        SensitivityCheck("s1 changed", (chain, seek, 0, (3.0, 1.0)), (chain, seek, 2, (3.0, 1.0)), True, 0.1),
        SensitivityCheck("policy changed", (chain, seek, 0, (3.0, 1.0)), (chain, blind, 0, (3.0, 1.0)), True, 0.1),
    ]


def run_builtin_verification(n: int = 100_000, seed: int = 0, tolerance: float = 0.02) -> TheoremReport:
    report = TheoremReport(n=n, seed=seed)
    for bundle in builtin_cases():
        verify_theorem1(bundle["spec"], bundle["policy"], bundle["cases"], n, seed, tolerance, name=bundle["name"], report=report)
    report.sensitivity.extend(check_sensitivity(chk) for chk in builtin_sensitivity())
    return report


__all__ = [
    "GoalDistribution",
    "tv_distance",
    "exact_goal_distribution",
    "empirical_goal_distribution",
    "forward_state_goal",
    "enumerated_state_goal",
    "joint_max_abs_diff",
    "tv_convergence_slope",
    "verify_theorem1",
    "run_builtin_verification",
    "SensitivityCheck",
    "TheoremReport",
]
