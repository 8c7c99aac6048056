"""AdamW, learning-rate schedule, EMA shadows, negative queue, collapse statistics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import ContractError, ShapeError, Tensor


class TrainingError(RuntimeError):
    pass


def is_norm_param(name):
    return name.endswith(".gamma") or name.endswith(".beta")


@dataclass
class AdamWState:
    """Moments are keyed by parameter name and always stored as float32."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 5e-4
    decay_norm: bool = False
    lr_mult: dict = field(default_factory=dict)  # name prefix -> multiplier
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def multiplier(self, name):
        best, mult = -1, 1.0
        for prefix, k in self.lr_mult.items():
            if name.startswith(prefix) and len(prefix) > best:
                best, mult = len(prefix), k
        return mult


def adamw_step(named_params, state: AdamWState, lr, grads=None):
    """One decoupled-AdamW update in place.

    ``named_params`` is a list of (name, Tensor); gradients come from
    ``.grad`` unless ``grads`` (name -> array) is given. Parameters without
    a gradient are skipped entirely.
    """
    if lr < 0:
        raise ContractError(f"learning rate must be >= 0, got {lr}")
    items = []
    for name, p in named_params:
        g = grads[name] if grads is not None else p.grad
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in parameter {name!r} at step {state.t + 1}")
        items.append((name, p, g))
    state.t += 1
    b1, b2, t = state.beta1, state.beta2, state.t
    c1, c2 = 1 - b1 ** t, 1 - b2 ** t
    for name, p, g in items:
        m = state.m.setdefault(name, np.zeros(p.shape, np.float32))
        v = state.v.setdefault(name, np.zeros(p.shape, np.float32))
        g32 = g.astype(np.float32)
        m *= b1
        m += (1 - b1) * g32
        v *= b2
        v += (1 - b2) * g32 * g32
        step_lr = lr * state.multiplier(name)
        wd = state.weight_decay if (state.decay_norm or not is_norm_param(name)) else 0.0
        if wd:
            p.data -= (step_lr * wd * p.data).astype(p.dtype)
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= (step_lr * update).astype(p.dtype)
    return state


def lr_schedule(epoch, base_lr, warmup_epochs, total_epochs, floor_lr=0.0):
    """Linear warmup from 0, then cosine decay to ``floor_lr``; ``epoch`` may be fractional."""
    if warmup_epochs >= total_epochs:
        raise ContractError(f"warmup ({warmup_epochs}) must be shorter than training ({total_epochs})")
    if not 0 <= epoch <= total_epochs:
        raise ContractError(f"epoch {epoch} outside [0, {total_epochs}]")
    if epoch < warmup_epochs:
        return base_lr * epoch / warmup_epochs
    progress = (epoch - warmup_epochs) / (total_epochs - warmup_epochs)
    return floor_lr + 0.5 * (base_lr - floor_lr) * (1 + math.cos(math.pi * progress))


def ema_update(shadow, online, decay):
    """shadow <- decay * shadow + (1 - decay) * online, for matching name -> array dicts."""
    if not 0 <= decay < 1:
        raise ContractError(f"EMA decay must be in [0, 1), got {decay}")
    if set(shadow) != set(online):
        raise ShapeError(f"EMA parameter sets differ: {sorted(set(shadow) ^ set(online))[:3]}")
    for name, s in shadow.items():
        o = online[name]
        if s.shape != o.shape:
            raise ShapeError(f"EMA shape mismatch for {name!r}: {s.shape} vs {o.shape}")
        s *= decay
        s += (1 - decay) * o
    return shadow


class NegativeQueue:
    """FIFO ring buffer of unit-norm rows; ``ops`` counts every push and read."""

    def __init__(self, capacity, dim, dtype=np.float32):
        if capacity < 1:
            raise ContractError("queue capacity must be >= 1")
        self.capacity, self.dim = capacity, dim
        self.rows = np.zeros((capacity, dim), dtype)
        self.fill = 0
        self.cursor = 0
        self.ops = 0

    def push(self, batch, tol=1e-4):
        data = batch.data if isinstance(batch, Tensor) else np.asarray(batch)
        if data.ndim != 2 or data.shape[1] != self.dim:
            raise ShapeError(f"queue holds {self.dim}-d rows, got {data.shape}")
        norms = np.linalg.norm(data, axis=1)
        if np.any(np.abs(norms - 1) > tol):
            raise ContractError(f"queue rows must be unit-norm (max deviation {np.abs(norms - 1).max():.2e})")
        self.ops += 1
        data = data[-self.capacity:]
        n = len(data)
        idx = (self.cursor + np.arange(n)) % self.capacity
        self.rows[idx] = data.astype(self.rows.dtype)
        self.cursor = int((self.cursor + n) % self.capacity)
        self.fill = min(self.capacity, self.fill + n)
        return self

    def negatives(self):
        """Stored rows, oldest first, as a detached tensor."""
        self.ops += 1
        if self.fill < self.capacity:
            out = self.rows[:self.fill]
        else:
            out = np.roll(self.rows, -self.cursor, axis=0)
        return Tensor(out.copy(), dtype=self.rows.dtype)

    def __len__(self):
        return self.fill


def queue_update(queue: NegativeQueue, batch):
    return queue.push(batch)


def collapse_metrics(embeddings, threshold=1e-4):
    e = np.asarray(embeddings.data if isinstance(embeddings, Tensor) else embeddings, dtype=np.float64)
    if e.ndim != 2 or len(e) < 2:
        raise ContractError(f"collapse_metrics needs an (N>=2, d) matrix, got {e.shape}")
    std = float(e.std(axis=0).mean())
    s = np.linalg.svd(e - e.mean(axis=0), compute_uv=False)
    total = s.sum()
    if total <= 0:
        rank = 1.0
    else:
        p = s[s > 0] / total
        rank = float(np.exp(-(p * np.log(p)).sum()))
    return {"mean_per_dim_std": std, "rank_proxy": rank, "collapsed": std < threshold}
