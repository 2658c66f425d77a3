"""Goal-conditioned next-item policy, its training loop and checkpoints."""
from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .data import DEFAULT_WINDOW, ConfigError, RelabeledStep

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class NumericError(RuntimeError):
    """Training produced a non-finite loss."""


class CheckpointError(RuntimeError):
    """Checkpoint unreadable, from another format version, or incompatible."""


@dataclass
class PolicyConfig:
    n_items: int
    d: int
    window: int = DEFAULT_WINDOW
    item_embed_dim: int = 64
    goal_embed_dim: int = 64
    timestep_embed_dim: int = 64
    encoder: str = "transformer"
    encoder_layers: int = 1
    encoder_heads: int = 1
    encoder_width: int = 64
    attention_block: bool = True
    attention_heads: int = 1
    mlp_hidden_sizes: tuple[int, ...] = (64,)
    learning_rate: float = 1e-3
    batch_size: int = 256
    max_epochs: int = 50
    patience: int = 5
    seed: int = 0
    goal_mode: str = "vector"
    weights: tuple[float, ...] | None = None
    max_timestep: int = 64
    standardize_goals: bool = True

    def __post_init__(self):
        self.mlp_hidden_sizes = tuple(int(h) for h in self.mlp_hidden_sizes)
        if self.weights is not None:
            self.weights = tuple(float(w) for w in self.weights)
        dims = dict(
            n_items=self.n_items, d=self.d, window=self.window, item_embed_dim=self.item_embed_dim,
            goal_embed_dim=self.goal_embed_dim, timestep_embed_dim=self.timestep_embed_dim,
            encoder_layers=self.encoder_layers, encoder_heads=self.encoder_heads, encoder_width=self.encoder_width,
            attention_heads=self.attention_heads, batch_size=self.batch_size, max_epochs=self.max_epochs,
            max_timestep=self.max_timestep,
        )
        for name, v in dims.items():
            if int(v) < 1:
                raise ConfigError(f"{name} must be >= 1, got {v}")
        if any(h < 1 for h in self.mlp_hidden_sizes):
            raise ConfigError("mlp_hidden_sizes entries must be >= 1")
        if self.encoder not in ("transformer", "gru"):
            raise ConfigError(f"encoder must be 'transformer' or 'gru', got {self.encoder!r}")
        if self.item_embed_dim % self.encoder_heads:
            raise ConfigError("item_embed_dim must be divisible by encoder_heads")
        if self.goal_mode not in ("vector", "scalar"):
            raise ConfigError(f"goal_mode must be 'vector' or 'scalar', got {self.goal_mode!r}")
        if self.goal_mode == "scalar":
            if self.weights is None:
                raise ConfigError("goal_mode='scalar' requires weights")
            check_weights(self.weights, self.d)
        if self.attention_block and self.item_embed_dim % self.attention_heads:
            raise ConfigError("item_embed_dim must be divisible by attention_heads")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")

    @property
    def goal_dim(self) -> int:
        return self.d if self.goal_mode == "vector" else 1

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["mlp_hidden_sizes"] = list(self.mlp_hidden_sizes)
        out["weights"] = None if self.weights is None else list(self.weights)
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "PolicyConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in obj.items() if k in known})


def check_weights(w, d: int) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (d,):
        raise ConfigError(f"weights must have length {d}, got {w.shape}")
    if np.any(w < 0) or np.any(w > 1) or abs(w.sum() - 1.0) > 1e-9:
        raise ConfigError(f"weights must lie in [0, 1] and sum to 1, got {w.tolist()}")
    return w


def scalarize_goals(steps: Sequence[RelabeledStep], w) -> list[RelabeledStep]:
    """Replace every goal by its weighted sum ``w . g`` (1-dim goal)."""
    if not steps:
        return []
    w = check_weights(w, len(steps[0].goal))
    return [dataclasses.replace(s, goal=np.array([float(np.dot(w, s.goal))])) for s in steps]


class PolicyModel(nn.Module):
    """History encoder + timestep/goal embeddings + attention + MLP head.

    The three parts (sequence encoding, timestep embedding, goal embedding)
    are treated as three tokens of one self-attention layer and flattened
    afterwards. Item id 0 is the padding token.
    """

    def __init__(self, config: PolicyConfig):
        super().__init__()
        self.config = c = config
        torch.manual_seed(c.seed)
        D = c.item_embed_dim
        self.item_emb = nn.Embedding(c.n_items + 1, D)
        self.pos_emb = nn.Embedding(c.window, D)
        with torch.no_grad():
            self.item_emb.weight[0].zero_()
        if c.encoder == "transformer":
            layer = nn.TransformerEncoderLayer(D, c.encoder_heads, c.encoder_width, dropout=0.0, batch_first=True)
            self.encoder = nn.TransformerEncoder(layer, c.encoder_layers, enable_nested_tensor=False)
        else:
            self.encoder = nn.GRU(D, D, num_layers=c.encoder_layers, batch_first=True)
        self.time_emb = nn.Embedding(c.max_timestep + 1, c.timestep_embed_dim)
        self.goal_fc = nn.Linear(c.goal_dim, c.goal_embed_dim)
        self.register_buffer("goal_mean", torch.zeros(c.goal_dim))
        self.register_buffer("goal_std", torch.ones(c.goal_dim))
        if c.attention_block:
            self.time_proj = nn.Identity() if c.timestep_embed_dim == D else nn.Linear(c.timestep_embed_dim, D)
            self.goal_proj = nn.Identity() if c.goal_embed_dim == D else nn.Linear(c.goal_embed_dim, D)
            self.token_type = nn.Parameter(torch.zeros(3, D))
            self.attn = nn.MultiheadAttention(D, c.attention_heads, batch_first=True)
            self.attn_norm = nn.LayerNorm(D)
            self.embedding_dim = 3 * D
        else:
            self.embedding_dim = D + c.timestep_embed_dim + c.goal_embed_dim
        layers: list[nn.Module] = []
        width = self.embedding_dim
        for h in c.mlp_hidden_sizes:
            layers += [nn.Linear(width, h), nn.ReLU()]
            width = h
        layers.append(nn.Linear(width, c.n_items))
        self.head = nn.Sequential(*layers)

    @property
    def output_layer(self) -> nn.Linear:
        return self.head[-1]

    def set_goal_normalization(self, goals: np.ndarray) -> None:
        goals = np.asarray(goals, dtype=np.float64).reshape(-1, self.config.goal_dim)
        if self.config.standardize_goals and len(goals):
            std = goals.std(axis=0)
            std[std < 1e-8] = 1.0
            self.goal_mean.copy_(torch.as_tensor(goals.mean(axis=0)))
            self.goal_std.copy_(torch.as_tensor(std))

    # -- pieces -------------------------------------------------------------

    def encode_history(self, hist: torch.Tensor) -> torch.Tensor:
        """(B, L) left-padded ids -> (B, D) encoding of the most recent position."""
        x = self.item_emb(hist) + self.pos_emb.weight[-hist.shape[1]:]
        if isinstance(self.encoder, nn.GRU):
            out, _ = self.encoder(x)
            return out[:, -1]
        pad = hist == 0
        # an all-padding row still needs one visible key
        pad = pad.clone()
        pad[:, -1] = False
        return self.encoder(x, src_key_padding_mask=pad)[:, -1]

    def parts(self, hist, t, goal):
        c = self.config
        t = t.clamp(1, c.max_timestep)
        seq = self.encode_history(hist)
        emb_t = self.time_emb(t)
        g = (goal - self.goal_mean) / self.goal_std
        emb_g = self.goal_fc(g)
        return seq, emb_t, emb_g

    def embed(self, hist, t, goal) -> torch.Tensor:
        seq, emb_t, emb_g = self.parts(hist, t, goal)
        if not self.config.attention_block:
            return torch.cat([seq, emb_t, emb_g], dim=-1)
        tokens = torch.stack([seq, self.time_proj(emb_t), self.goal_proj(emb_g)], dim=1) + self.token_type
        att, _ = self.attn(tokens, tokens, tokens, need_weights=False)
        return self.attn_norm(tokens + att).flatten(1)

    def state_embedding(self, hist, t) -> torch.Tensor:
        """Goal-free state representation: sequence encoding + timestep embedding."""
        t = t.clamp(1, self.config.max_timestep)
        return torch.cat([self.encode_history(hist), self.time_emb(t)], dim=-1)

    def forward(self, hist, t, goal) -> torch.Tensor:
        return self.head(self.embed(hist, t, goal))


# ---------------------------------------------------------------------------
# batching


def pad_history(history: Sequence[int], window: int) -> list[int]:
    h = list(history)[-window:] if window > 0 else []
    return [0] * (window - len(h)) + h


@dataclass
class Batch:
    hist: torch.Tensor
    t: torch.Tensor
    goal: torch.Tensor
    action: torch.Tensor

    def __len__(self) -> int:
        return len(self.action)

    def subset(self, idx) -> "Batch":
        return Batch(self.hist[idx], self.t[idx], self.goal[idx], self.action[idx])


def make_batch(steps: Sequence[RelabeledStep], config: PolicyConfig, dtype=torch.float32) -> Batch:
    n = len(steps)
    hist = np.zeros((n, config.window), dtype=np.int64)
    for i, s in enumerate(steps):
        hist[i] = pad_history(s.history, config.window)
    if n and (hist.max() > config.n_items or hist.min() < 0):
        raise ValueError(f"history item id outside [1, {config.n_items}]")
    actions = np.array([s.action for s in steps], dtype=np.int64)
    if n and (actions.max() > config.n_items or actions.min() < 1):
        raise ValueError(f"action outside [1, {config.n_items}]")
    goals = np.array([np.asarray(s.goal, dtype=np.float64) for s in steps]).reshape(n, -1)
    if n and goals.shape[1] != config.goal_dim:
        raise ValueError(f"goal has {goals.shape[1]} components, model expects {config.goal_dim}")
    return Batch(
        torch.as_tensor(hist),
        torch.as_tensor([s.timestep for s in steps], dtype=torch.long),
        torch.as_tensor(goals, dtype=dtype),
        torch.as_tensor(actions - 1),
    )


def _query_tensors(model: PolicyModel, history, timestep, goal):
    c = model.config
    for a in history:
        if not 1 <= int(a) <= c.n_items:
            raise ValueError(f"unknown item id {a}")
    if len(history) > c.window:
        history = list(history)[-c.window:]
    if timestep < 1:
        raise ValueError("timestep must be >= 1")
    if timestep > c.max_timestep:
        log.warning("timestep %d beyond embedding table, clamped to %d", timestep, c.max_timestep)
    goal = np.asarray(goal, dtype=np.float64).reshape(-1)
    if goal.shape != (c.goal_dim,):
        raise ValueError(f"goal has {goal.shape[0]} components, model expects {c.goal_dim}")
    dtype = next(model.parameters()).dtype
    return (
        torch.as_tensor([pad_history(history, c.window)]),
        torch.as_tensor([timestep]),
        torch.as_tensor(goal[None], dtype=dtype),
    )


@torch.no_grad()
def encode_state(model: PolicyModel, history, timestep: int, goal) -> np.ndarray:
    model.eval()
    return model.embed(*_query_tensors(model, history, timestep, goal))[0].double().numpy()


@torch.no_grad()
def predict(model: PolicyModel, history, timestep: int, goal) -> np.ndarray:
    model.eval()
    logits = model(*_query_tensors(model, history, timestep, goal))[0]
    return torch.softmax(logits.double(), dim=-1).numpy()


@torch.no_grad()
def predict_batch(model: PolicyModel, hist: np.ndarray, t: np.ndarray, goals: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Probabilities for many queries at once; ``hist`` is (n, window) left-padded."""
    model.eval()
    dtype = next(model.parameters()).dtype
    out = []
    for i in range(0, len(t), chunk):
        logits = model(
            torch.as_tensor(hist[i : i + chunk]),
            torch.as_tensor(t[i : i + chunk]),
            torch.as_tensor(np.asarray(goals[i : i + chunk]).reshape(-1, model.config.goal_dim), dtype=dtype),
        )
        out.append(torch.softmax(logits.double(), dim=-1).numpy())
    return np.concatenate(out) if out else np.zeros((0, model.config.n_items))


def loss_fn(model: PolicyModel, batch: Batch) -> torch.Tensor:
    """Mean cross-entropy of the demonstrated actions."""
    return F.cross_entropy(model(batch.hist, batch.t, batch.goal), batch.action)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    valid_loss: list[float] = field(default_factory=list)
    seconds: float = 0.0
    best_epoch: int = 0
    checkpoint: str | None = None

    @property
    def epochs(self) -> int:
        return len(self.train_loss)


@torch.no_grad()
def evaluate_loss(model: PolicyModel, batch: Batch, chunk: int = 8192) -> float:
    model.eval()
    total = 0.0
    for i in range(0, len(batch), chunk):
        sub = batch.subset(slice(i, i + chunk))
        total += float(F.cross_entropy(model(sub.hist, sub.t, sub.goal), sub.action, reduction="sum"))
    return total / max(len(batch), 1)


def build_model(config: PolicyConfig, train_steps: Sequence[RelabeledStep] | None = None) -> PolicyModel:
    model = PolicyModel(config)
    if train_steps:
        model.set_goal_normalization(np.array([s.goal for s in train_steps]))
    return model


def train(
    model: PolicyModel,
    train_steps: Sequence[RelabeledStep],
    valid_steps: Sequence[RelabeledStep] | None = None,
    epochs: int | None = None,
) -> TrainReport:
    """Minibatch Adam on the mean cross-entropy of demonstrated actions.

    Stops at ``max_epochs`` or after ``patience`` epochs without a lower
    validation loss; the best-validation parameters are restored.
    """
    c = model.config
    if not train_steps:
        raise ValueError("empty training set")
    dtype = next(model.parameters()).dtype
    tr = make_batch(train_steps, c, dtype)
    va = make_batch(valid_steps, c, dtype) if valid_steps else None
    gen = torch.Generator().manual_seed(c.seed)
    opt = torch.optim.Adam(model.parameters(), lr=c.learning_rate)
    report = TrainReport()
    best, best_state, bad = math.inf, None, 0
    start = time.perf_counter()
    for epoch in range(epochs or c.max_epochs):
        model.train()
        perm = torch.randperm(len(tr), generator=gen)
        total = 0.0
        for b, i in enumerate(range(0, len(tr), c.batch_size)):
            batch = tr.subset(perm[i : i + c.batch_size])
            loss = loss_fn(model, batch)
            if not torch.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch} batch {b} (learning_rate={c.learning_rate})")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(batch)
        report.train_loss.append(total / len(tr))
        if va is not None:
            v = evaluate_loss(model, va)
            report.valid_loss.append(v)
            if v < best - 1e-6:
                best, bad, report.best_epoch = v, 0, epoch
                best_state = {k: t.detach().clone() for k, t in model.state_dict().items()}
            else:
                bad += 1
                if bad >= c.patience:
                    break
    if best_state is not None:
        model.load_state_dict(best_state)
    report.seconds = time.perf_counter() - start
    model.eval()
    return report


# ---------------------------------------------------------------------------
# checkpoints


def save_model(model: PolicyModel, path, extra: dict | None = None) -> None:
    payload = {
        "format": "mogcsl-policy",
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "state_dict": {k: v.detach().cpu() for k, v in model.state_dict().items()},
        "extra": extra or {},
    }
    torch.save(payload, Path(path))


def _read_checkpoint(path, kind: str) -> dict:
    try:
        payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    except Exception as err:  # torch raises several unrelated types on garbage input
        raise CheckpointError(f"cannot read checkpoint {path}: {err}") from err
    if not isinstance(payload, dict) or payload.get("format") != kind:
        raise CheckpointError(f"{path} is not a {kind} checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {payload.get('version')} != supported {CHECKPOINT_VERSION}")
    return payload


def load_model(path, expect: PolicyConfig | dict | None = None) -> PolicyModel:
    """Rebuild a model from a checkpoint.

    With ``expect``, every shape-determining field must match or a
    CheckpointError naming the field is raised.
    """
    payload = _read_checkpoint(path, "mogcsl-policy")
    config = PolicyConfig.from_dict(payload["config"])
    if expect is not None:
        want = expect.to_dict() if isinstance(expect, PolicyConfig) else dict(expect)
        for name in ("n_items", "d", "window", "goal_mode", "item_embed_dim", "encoder", "max_timestep"):
            if name in want and want[name] != getattr(config, name):
                raise CheckpointError(f"checkpoint field {name}={getattr(config, name)!r} does not match expected {want[name]!r}")
    model = PolicyModel(config)
    state = payload["state_dict"]
    own = model.state_dict()
    for k, v in own.items():
        if k not in state:
            raise CheckpointError(f"checkpoint is missing parameter {k}")
        if state[k].shape != v.shape:
            raise CheckpointError(f"parameter {k} has shape {tuple(state[k].shape)}, expected {tuple(v.shape)}")
    model.load_state_dict(state)
    model.eval()
    model.extra = payload.get("extra", {})
    return model
