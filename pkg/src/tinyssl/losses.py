"""Distillation and self-supervised objectives.

All losses are means over the batch and return 0-d tensors. Cosine
denominators are clamped at 1e-12.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .tensor import ContractError, ShapeError

EPS = 1e-12


@dataclass(frozen=True)
class LossWeights:
    lambda_ms: float = 0.5
    lambda_reg: float = 0.0
    tau: float = 0.1

    def __post_init__(self):
        if self.lambda_ms < 0 or self.lambda_reg < 0:
            raise ValueError("loss weights must be non-negative")
        if self.tau <= 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")


def _rowdot(a, b):
    return T.sum(T.mul(a, b), axis=1)


def cosine_rows(a, b):
    """Per-row cosine similarity, shape (B,)."""
    return _rowdot(T.l2_normalize(a, 1, EPS), T.l2_normalize(b, 1, EPS))


def cls_loss(z_s, z_t, w_a=None):
    """Mean of 1 - cos(W_a z_s, z_t).

    ``w_a`` is a (384, 256) weight tensor or a callable head; None means
    ``z_s`` is already in teacher space.
    """
    if w_a is None:
        aligned = z_s
    elif callable(w_a):
        aligned = w_a(z_s)
    else:
        aligned = T.linear(z_s, w_a)
    z_t = z_t if isinstance(z_t, T.Tensor) else T.Tensor(z_t, dtype=aligned.dtype)
    if aligned.shape != z_t.shape:
        raise ShapeError(f"cls_loss: student {aligned.shape} vs teacher {z_t.shape}")
    return T.mean(T.add(T.neg(cosine_rows(aligned, z_t)), 1.0))


def ms_loss(student_stages, teacher_stages):
    """Per-token normalised squared error, averaged over tokens, batch, then stages."""
    if len(student_stages) != len(teacher_stages):
        raise ShapeError(f"ms_loss: {len(student_stages)} student stages vs {len(teacher_stages)} teacher stages")
    terms = []
    for i, (s, t) in enumerate(zip(student_stages, teacher_stages)):
        t = t if isinstance(t, T.Tensor) else T.Tensor(t, dtype=s.dtype)
        if s.shape != t.shape:
            raise ShapeError(f"ms_loss stage {i}: student {s.shape} vs teacher {t.shape}")
        d = T.sub(T.l2_normalize(s, 1, EPS), T.l2_normalize(t, 1, EPS))
        # sum over channels, mean over (batch, H, W)
        terms.append(T.mean(T.sum(T.mul(d, d), axis=1)))
    total = terms[0]
    for term in terms[1:]:
        total = T.add(total, term)
    return T.scale(total, 1.0 / len(terms))


def _info_nce_direction(anchor, positive, queue, tau):
    # logits: column 0 is the positive, columns 1..K the queue
    pos = T.reshape(_rowdot(anchor, positive), (anchor.shape[0], 1))
    neg = T.linear(anchor, queue)
    logits = T.scale(T.concat([pos, neg], axis=1), 1.0 / tau)
    return T.softmax_cross_entropy(logits, np.zeros(anchor.shape[0], dtype=np.int64))


def infonce_loss(z1, z2, queue, tau=0.1):
    """Symmetrised InfoNCE with a queue of negatives; the positive sits in the denominator."""
    queue = queue if isinstance(queue, T.Tensor) else T.Tensor(np.asarray(queue, dtype=z1.dtype), dtype=z1.dtype)
    if queue.ndim != 2 or queue.shape[0] == 0:
        raise ContractError("infonce_loss needs a non-empty negative queue; warm it up with queue_update first")
    if queue.shape[1] != z1.shape[1] or z1.shape != z2.shape:
        raise ShapeError(f"infonce_loss: z1 {z1.shape}, z2 {z2.shape}, queue {queue.shape}")
    a = _info_nce_direction(z1, z2, queue, tau)
    b = _info_nce_direction(z2, z1, queue, tau)
    return T.scale(T.add(a, b), 0.5)


def total_loss(parts, w: LossWeights):
    """L_cls + lambda_ms * L_ms + lambda_reg * L_reg.

    ``parts`` values may be tensors, floats, or zero-argument callables; a
    callable term with zero weight is never invoked.
    """
    def resolve(v):
        return v() if callable(v) else v

    total = resolve(parts["cls"])
    for key, weight in (("ms", w.lambda_ms), ("reg", w.lambda_reg)):
        if weight == 0 or parts.get(key) is None:
            continue
        term = resolve(parts[key])
        total = total + (T.scale(term, weight) if isinstance(term, T.Tensor) else weight * term)
    return total


def nt_xent_loss(z1, z2, tau=0.1):
    """SimCLR NT-Xent over 2B views; each anchor's negatives are the other 2B-2 views."""
    B = z1.shape[0]
    if B < 2:
        raise ContractError("nt_xent_loss needs a batch of at least 2 (no negatives otherwise)")
    if z1.shape != z2.shape:
        raise ShapeError(f"nt_xent_loss: {z1.shape} vs {z2.shape}")
    z = T.concat([z1, z2], axis=0)
    sim = T.linear(z, z)
    mask = np.zeros((2 * B, 2 * B), dtype=z.dtype)
    np.fill_diagonal(mask, -1e9)  # exp underflows to exactly 0
    logits = T.add(T.scale(sim, 1.0 / tau), T.Tensor(mask, dtype=z.dtype))
    labels = np.concatenate([np.arange(B, 2 * B), np.arange(B)])
    return T.softmax_cross_entropy(logits, labels)


def byol_loss(online_pred, target_proj):
    """Mean of 2 - 2 cos(pred, target); the target side is detached."""
    target = target_proj.detach() if isinstance(target_proj, T.Tensor) else T.Tensor(target_proj, dtype=online_pred.dtype)
    return T.mean(T.add(T.scale(cosine_rows(online_pred, target), -2.0), 2.0))


@dataclass(frozen=True)
class DinoCenter:
    c: np.ndarray
    momentum: float = 0.9
    teacher_temp: float = 0.04
    student_temp: float = 0.1

    def __post_init__(self):
        if not 0 <= self.momentum < 1:
            raise ValueError(f"center momentum must be in [0, 1), got {self.momentum}")
        if self.teacher_temp <= 0 or self.student_temp <= 0:
            raise ValueError("DINO temperatures must be positive")
        if not np.all(np.isfinite(self.c)):
            raise ValueError("DINO center must be finite")

    @classmethod
    def zeros(cls, dim, **kw):
        return cls(np.zeros(dim), **kw)


def dino_self_distill_loss(student_logits, teacher_logits, center: DinoCenter):
    """Cross-entropy from sharpened, centred teacher targets; returns (loss, new center)."""
    t = teacher_logits.data if isinstance(teacher_logits, T.Tensor) else np.asarray(teacher_logits)
    targets = T.softmax((t - center.c) / center.teacher_temp).astype(student_logits.dtype)
    loss = T.soft_cross_entropy(T.scale(student_logits, 1.0 / center.student_temp), targets)
    m = center.momentum
    new_c = m * center.c + (1 - m) * t.mean(axis=0)
    return loss, replace(center, c=new_c)


def cross_entropy_loss(logits, labels):
    return T.softmax_cross_entropy(logits, labels)
