"""Trajectory data model, ingestion, goal relabeling and dataset statistics."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

DEFAULT_WINDOW = 10


class TrajectoryFormatError(ValueError):
    """Malformed trajectory file content."""


class SchemaError(ValueError):
    """Reward dimensionality or identifier constraints violated."""


class ConfigError(ValueError):
    """Invalid configuration value."""


@dataclass(frozen=True)
class Step:
    action: int
    reward: tuple[float, ...]

    def __post_init__(self):
        if not isinstance(self.action, (int, np.integer)) or self.action < 1:
            raise SchemaError(f"action must be an integer >= 1, got {self.action!r}")
        reward = tuple(float(r) for r in self.reward)
        if not reward:
            raise SchemaError("reward must have at least one component")
        if not all(math.isfinite(r) for r in reward):
            raise SchemaError(f"non-finite reward {reward}")
        object.__setattr__(self, "action", int(self.action))
        object.__setattr__(self, "reward", reward)


@dataclass(frozen=True)
class Trajectory:
    id: str
    steps: tuple[Step, ...]

    def __post_init__(self):
        steps = tuple(self.steps)
        if not steps:
            raise SchemaError(f"trajectory {self.id!r} has no steps")
        d = len(steps[0].reward)
        for t, step in enumerate(steps, start=1):
            if len(step.reward) != d:
                raise SchemaError(
                    f"trajectory {self.id!r} step {t}: reward has {len(step.reward)} components, expected {d}"
                )
        object.__setattr__(self, "steps", steps)

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def d(self) -> int:
        return len(self.steps[0].reward)

    @property
    def actions(self) -> list[int]:
        return [s.action for s in self.steps]

    def rewards(self) -> np.ndarray:
        return np.array([s.reward for s in self.steps], dtype=np.float64)

    @classmethod
    def from_arrays(cls, id: str, actions: Sequence[int], rewards) -> "Trajectory":
        rewards = np.asarray(rewards, dtype=np.float64)
        return cls(id, tuple(Step(int(a), tuple(r)) for a, r in zip(actions, rewards)))


@dataclass(frozen=True)
class RelabeledStep:
    history: tuple[int, ...]
    timestep: int
    action: int
    goal: np.ndarray = field(compare=False)
    reward: np.ndarray | None = field(default=None, compare=False)

    def truncated(self, window: int = DEFAULT_WINDOW) -> tuple[int, ...]:
        """Most recent ``window`` history items."""
        return self.history[-window:] if window > 0 else ()


@dataclass
class DatasetStats:
    per_timestep_mean_goal: dict[int, np.ndarray]
    global_mean_goal: np.ndarray
    max_timestep: int
    max_goal: np.ndarray | None = None

    def to_dict(self) -> dict:
        return {
            "per_timestep_mean_goal": {str(t): g.tolist() for t, g in self.per_timestep_mean_goal.items()},
            "global_mean_goal": self.global_mean_goal.tolist(),
            "max_timestep": self.max_timestep,
            "max_goal": None if self.max_goal is None else self.max_goal.tolist(),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "DatasetStats":
        return cls(
            per_timestep_mean_goal={int(t): np.asarray(g, dtype=np.float64) for t, g in obj["per_timestep_mean_goal"].items()},
            global_mean_goal=np.asarray(obj["global_mean_goal"], dtype=np.float64),
            max_timestep=int(obj["max_timestep"]),
            max_goal=None if obj.get("max_goal") is None else np.asarray(obj["max_goal"], dtype=np.float64),
        )


def _check_dims(trajs: Iterable[Trajectory]) -> list[Trajectory]:
    trajs = list(trajs)
    if trajs:
        d = trajs[0].d
        for tr in trajs:
            if tr.d != d:
                raise SchemaError(f"trajectory {tr.id!r} has d={tr.d}, expected d={d}")
    return trajs


def load_trajectories(path, format: str | None = None) -> list[Trajectory]:
    """Read trajectories from a JSONL or CSV file.

    ``format`` defaults to the file suffix. Reward dimensionality is taken
    from the first step in the file and enforced for every later step.
    """
    path = Path(path)
    if format is None:
        format = "csv" if path.suffix.lower() == ".csv" else "jsonl"
    if format == "jsonl":
        return _load_jsonl(path)
    if format == "csv":
        return _load_csv(path)
    raise ConfigError(f"unknown trajectory format {format!r}")


def _load_jsonl(path: Path) -> list[Trajectory]:
    out: list[Trajectory] = []
    d = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                steps = tuple(Step(s["a"], tuple(s["r"])) for s in obj["steps"])
                tid = str(obj["id"])
            except SchemaError as err:
                raise SchemaError(f"line {lineno}: {err}") from err
            except (json.JSONDecodeError, KeyError, TypeError) as err:
                raise TrajectoryFormatError(f"line {lineno}: {err}") from err
            if steps and d is None:
                d = len(steps[0].reward)
            for s in steps:
                if len(s.reward) != d:
                    raise SchemaError(f"line {lineno}: reward of length {len(s.reward)}, expected {d}")
            try:
                out.append(Trajectory(tid, steps))
            except SchemaError as err:
                raise SchemaError(f"line {lineno}: {err}") from err
    return out


def _load_csv(path: Path) -> list[Trajectory]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return []
        if header[:3] != ["traj_id", "t", "action"]:
            raise TrajectoryFormatError(f"line 1: expected header traj_id,t,action,r_1..r_d, got {header}")
        r_cols = [i for i, h in enumerate(header) if h.startswith("r_")]
        if not r_cols:
            raise TrajectoryFormatError("line 1: no reward columns")
        order: list[str] = []
        rows: dict[str, list[tuple[int, Step]]] = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                tid, t, a = row[0], int(row[1]), int(row[2])
                r = tuple(float(row[i]) for i in r_cols)
            except (ValueError, IndexError) as err:
                raise TrajectoryFormatError(f"line {lineno}: {err}") from err
            if tid not in rows:
                rows[tid] = []
                order.append(tid)
            try:
                rows[tid].append((t, Step(a, r)))
            except SchemaError as err:
                raise SchemaError(f"line {lineno}: {err}") from err
    out = []
    for tid in order:
        steps = [s for _, s in sorted(rows[tid], key=lambda x: x[0])]
        out.append(Trajectory(tid, tuple(steps)))
    return _check_dims(out)


def _fmt(x: float):
    return int(x) if float(x).is_integer() else float(x)


def save_trajectories(trajs: Sequence[Trajectory], path, format: str | None = None) -> None:
    path = Path(path)
    if format is None:
        format = "csv" if path.suffix.lower() == ".csv" else "jsonl"
    trajs = _check_dims(trajs)
    if format == "jsonl":
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for tr in trajs:
                obj = {"id": tr.id, "steps": [{"a": s.action, "r": [_fmt(x) for x in s.reward]} for s in tr.steps]}
                fh.write(json.dumps(obj, separators=(",", ":")) + "\n")
    elif format == "csv":
        d = trajs[0].d if trajs else 1
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["traj_id", "t", "action"] + [f"r_{i + 1}" for i in range(d)])
            for tr in trajs:
                for t, s in enumerate(tr.steps, start=1):
                    w.writerow([tr.id, t, s.action] + [repr(_fmt(x)) for x in s.reward])
    else:
        raise ConfigError(f"unknown trajectory format {format!r}")


def returns_to_go(rewards: np.ndarray) -> np.ndarray:
    """Undiscounted cumulative future reward at every timestep."""
    return np.cumsum(rewards[::-1], axis=0)[::-1]


def relabel(traj: Trajectory) -> list[RelabeledStep]:
    rewards = traj.rewards()
    goals = returns_to_go(rewards)
    actions = traj.actions
    return [
        RelabeledStep(tuple(actions[:t]), t + 1, actions[t], goals[t].copy(), rewards[t].copy())
        for t in range(len(traj))
    ]


def relabel_all(trajs: Iterable[Trajectory]) -> list[RelabeledStep]:
    return [step for tr in trajs for step in relabel(tr)]


def compute_stats(trajs: Sequence[Trajectory]) -> DatasetStats:
    trajs = _check_dims(trajs)
    if not trajs:
        raise ValueError("compute_stats needs at least one trajectory")
    max_t = max(len(tr) for tr in trajs)
    d = trajs[0].d
    sums = np.zeros((max_t, d))
    counts = np.zeros(max_t)
    firsts = np.empty((len(trajs), d))
    for i, tr in enumerate(trajs):
        g = returns_to_go(tr.rewards())
        sums[: len(tr)] += g
        counts[: len(tr)] += 1
        firsts[i] = g[0]
    per_t = {t + 1: sums[t] / counts[t] for t in range(max_t)}
    return DatasetStats(per_t, firsts.mean(axis=0), max_t, firsts.max(axis=0))


def split(trajs: Sequence[Trajectory], ratios=(0.8, 0.1, 0.1), seed: int = 0):
    """Seeded shuffle into train/valid/test lists.

    Sizes are floor(n * ratio) for train and valid; test takes the rest.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ConfigError(f"ratios must be three positive numbers, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"ratios must sum to 1, got {sum(ratios)}")
    trajs = list(trajs)
    n = len(trajs)
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(math.floor(n * ratios[0] + 1e-9))
    n_valid = int(math.floor(n * ratios[1] + 1e-9))
    idx = [perm[:n_train], perm[n_train : n_train + n_valid], perm[n_train + n_valid :]]
    return tuple([trajs[i] for i in sorted(part)] for part in idx)


def filter_by_length(trajs: Iterable[Trajectory], min_len: int = 3, max_len: int = 50) -> list[Trajectory]:
    return [tr for tr in trajs if min_len <= len(tr) <= max_len]
