"""Frozen-backbone evaluation: linear probe and leave-one-out k-NN."""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .model import project_global, student_forward
from .tensor import ContractError


@dataclass(frozen=True)
class ProbeConfig:
    lr: float = 0.3
    momentum: float = 0.9
    epochs: int = 100
    batch: int = 256
    weight_decay: float = 0.0
    standardize: bool = True

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError(f"probe lr must be >= 0, got {self.lr}")


def extract_features(net, ds, batch=256, space="h"):
    """Eval-mode features of every image; ``space`` is "h" (pooled) or "z" (projection)."""
    if ds.labels is None:
        raise ContractError("feature extraction for probing needs a labelled dataset")
    feats = []
    for i in range(0, len(ds), batch):
        x = T.Tensor(ds.images[i:i + batch].astype(net.dtype), dtype=net.dtype)
        h = student_forward(net, x, "eval")["h"]
        feats.append((project_global(net, h) if space == "z" else h).data)
    return np.concatenate(feats).astype(np.float64), np.asarray(ds.labels)


@dataclass
class LinearClassifier:
    weight: np.ndarray  # (C, D)
    bias: np.ndarray  # (C,)
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    def _prep(self, features):
        f = np.asarray(features, dtype=np.float64)
        if self.mean is not None:
            f = (f - self.mean) / self.std
        return f

    def logits(self, features):
        return self._prep(features) @ self.weight.T + self.bias

    def predict(self, features):
        # np.argmax returns the first maximum: ties go to the lowest class index
        return np.argmax(self.logits(features), axis=1)


def train_linear_probe(features, labels, cfg: ProbeConfig = ProbeConfig(), seed=0,
                       num_classes=None) -> LinearClassifier:
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(np.unique(labels)) < 2:
        raise ContractError("linear probe needs at least two classes")
    C = int(num_classes or labels.max() + 1)
    N, D = features.shape
    mean = std = None
    if cfg.standardize:
        mean = features.mean(axis=0)
        std = features.std(axis=0)
        # relative floor: raw feature scale varies by orders of magnitude across inits
        std = std + 1e-6 * max(float(std.max()), 1e-30)
        features = (features - mean) / std
    rng = np.random.default_rng([seed, 0x9B0E])
    w = T.Tensor(np.zeros((C, D)), requires_grad=True, dtype=np.float64)
    b = T.Tensor(np.zeros(C), requires_grad=True, dtype=np.float64)
    vel = [np.zeros_like(w.data), np.zeros_like(b.data)]
    batch = min(cfg.batch, N)
    steps_per_epoch = math.ceil(N / batch)
    total = cfg.epochs * steps_per_epoch
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(N)
        for i in range(0, N, batch):
            idx = order[i:i + batch]
            lr = 0.5 * cfg.lr * (1 + math.cos(math.pi * step / total))
            w.grad = b.grad = None
            with T.Tape() as tape:
                x = T.Tensor(features[idx], dtype=np.float64)
                loss = T.softmax_cross_entropy(T.add(T.linear(x, w), b), labels[idx])
            T.backward(loss, tape)
            for p, v in zip((w, b), vel):
                g = p.grad + cfg.weight_decay * p.data if cfg.weight_decay else p.grad
                v *= cfg.momentum
                v += g
                p.data -= lr * v
            step += 1
    return LinearClassifier(w.data.copy(), b.data.copy(), mean, std)


def evaluate_accuracy(classifier, features, labels):
    pred = classifier.predict(features)
    labels = np.asarray(labels)
    return float((pred == labels).mean()) if len(labels) else 0.0


def knn_probe(features, labels, k=20):
    """Leave-one-out cosine k-NN accuracy; vote ties go to the class of the nearest tied neighbour."""
    if k <= 0:
        raise ContractError(f"k must be positive, got {k}")
    f = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    N = len(f)
    if k >= N:
        raise ContractError(f"k={k} must be smaller than N={N}")
    f = f / np.maximum(np.linalg.norm(f, axis=1, keepdims=True), 1e-12)
    sim = f @ f.T
    np.fill_diagonal(sim, -np.inf)
    # stable sort keeps equal similarities in index order
    nbrs = np.argsort(-sim, axis=1, kind="stable")[:, :k]
    correct = 0
    for i in range(N):
        votes = labels[nbrs[i]]
        classes, counts = np.unique(votes, return_counts=True)
        tied = set(classes[counts == counts.max()])
        winner = next(v for v in votes if v in tied)
        correct += winner == labels[i]
    return correct / N


def append_result(path, tag, method, seed, accuracy):
    new = not os.path.exists(path)
    with open(path, "a", newline="") as f:
        w = csv.writer(f)
        if new:
            w.writerow(["tag", "method", "seed", "accuracy"])
        w.writerow([tag, method, seed, f"{accuracy:.6f}"])
