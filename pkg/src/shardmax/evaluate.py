"""Representation quality probes over frozen checkpoints.

All paths here are read-only: embeddings come from EVAL-mode forwards on
un-augmented inputs, and nothing mutates encoder or classifier state.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .encoder import BNMode, Encoder
from .errors import DataError
from .util import rng_from


def embed_dataset(encoder: Encoder, features: np.ndarray, batch_size: int = 512,
                  layer: str = "head") -> np.ndarray:
    """EVAL-mode embeddings for every row; `layer` picks the projection-head
    output ("head") or its input ("backbone")."""
    if layer not in ("head", "backbone"):
        raise ValueError("layer must be 'head' or 'backbone'")
    out = []
    for start in range(0, features.shape[0], batch_size):
        block = features[start:start + batch_size]
        if layer == "head":
            emb, _ = encoder.forward(block, BNMode.EVAL)
        else:
            emb = encoder.backbone_output(block)
        out.append(emb)
    return np.concatenate(out, axis=0)


# -- linear probe ------------------------------------------------------------

@dataclass(frozen=True)
class ProbeConfig:
    epochs: int = 20
    lr: float = 0.5
    batch_size: int = 128
    momentum: float = 0.9
    holdout: float = 0.2
    seed: int = 0


@dataclass
class ProbeResult:
    top1: float
    per_class: np.ndarray    # holdout accuracy per class (0 where unseen)
    support: np.ndarray      # holdout sample count per class
    meta: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {
                "top1": self.top1,
                "per_class": self.per_class.tolist(),
                "support": self.support.tolist(),
                "meta": self.meta,
            },
            sort_keys=True,
        )


def linear_probe(embeddings: np.ndarray, labels: np.ndarray,
                 config: ProbeConfig = ProbeConfig()) -> ProbeResult:
    """Multinomial logistic regression on frozen embeddings, SGD with
    momentum and cosine-decayed lr, deterministic 80/20 split by seed."""
    x = np.asarray(embeddings, np.float64)
    y = np.asarray(labels, np.int64)
    if x.shape[0] != y.shape[0]:
        raise ValueError("embeddings and labels disagree on sample count")
    classes = int(y.max()) + 1
    if np.unique(y).size < 2:
        raise ValueError("linear probe needs at least two classes")
    n = x.shape[0]
    perm = rng_from(config.seed, 0).permutation(n)
    n_test = max(1, int(round(n * config.holdout)))
    test_idx, train_idx = perm[:n_test], perm[n_test:]
    if train_idx.size == 0:
        raise ValueError("holdout leaves no training samples")

    d = x.shape[1]
    w = np.zeros((d, classes))
    b = np.zeros(classes)
    vw = np.zeros_like(w)
    vb = np.zeros_like(b)
    xtr, ytr = x[train_idx], y[train_idx]
    for epoch in range(config.epochs):
        lr = 0.5 * config.lr * (1 + np.cos(np.pi * epoch / max(config.epochs, 1)))
        order = rng_from(config.seed, 1, epoch).permutation(xtr.shape[0])
        for start in range(0, order.size, config.batch_size):
            idx = order[start:start + config.batch_size]
            xb, yb = xtr[idx], ytr[idx]
            logits = xb @ w + b
            logits -= logits.max(axis=1, keepdims=True)
            p = np.exp(logits)
            p /= p.sum(axis=1, keepdims=True)
            p[np.arange(idx.size), yb] -= 1.0
            p /= idx.size
            gw = xb.T @ p
            gb = p.sum(axis=0)
            vw = config.momentum * vw + gw
            vb = config.momentum * vb + gb
            w -= lr * vw
            b -= lr * vb

    pred = np.argmax(x[test_idx] @ w + b, axis=1)
    truth = y[test_idx]
    top1 = float(np.mean(pred == truth))
    per_class = np.zeros(classes)
    support = np.bincount(truth, minlength=classes)
    for c in range(classes):
        if support[c]:
            per_class[c] = float(np.mean(pred[truth == c] == c))
    meta = {"epochs": config.epochs, "lr": config.lr, "seed": config.seed,
            "holdout": config.holdout, "train_size": int(train_idx.size),
            "test_size": int(test_idx.size)}
    return ProbeResult(top1, per_class, support, meta)


# -- kNN ---------------------------------------------------------------------

def knn_eval(embeddings: np.ndarray, labels: np.ndarray, k: int,
             block: int = 512) -> float:
    """Leave-one-out k-nearest-neighbor top-1 by cosine; majority vote with
    ties going to the lowest class index."""
    x = np.asarray(embeddings, np.float64)
    y = np.asarray(labels, np.int64)
    n = x.shape[0]
    if k < 1:
        raise ValueError("k must be >= 1")
    if k >= n:
        raise ValueError(f"k={k} must be smaller than the {n} instances")
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if (norms == 0).any():
        raise ValueError("zero-norm embedding row")
    x_hat = x / norms
    classes = int(y.max()) + 1
    hits = 0
    for start in range(0, n, block):
        stop = min(start + block, n)
        sims = np.ascontiguousarray(x_hat[start:stop] @ x_hat.T)
        self_cols = np.arange(start, stop, dtype=np.int64)
        neighbors = kernels.topk_desc(sims, self_cols, k)
        votes = np.apply_along_axis(np.bincount, 1, y[neighbors], None, classes)
        pred = np.argmax(votes, axis=1)   # argmax ties -> lowest class index
        hits += int((pred == y[start:stop]).sum())
    return hits / n


# -- instance classification --------------------------------------------------

def instance_accuracy(encoder: Encoder, shards, features: np.ndarray,
                      sample_ids=None, batch_size: int = 512) -> float:
    """Fraction of instances whose highest cosine classifier column is their
    own id, evaluated over the full sharded classifier on raw inputs."""
    n = features.shape[0]
    ids = np.arange(n) if sample_ids is None else np.asarray(sample_ids, np.int64)
    emb = embed_dataset(encoder, features[ids], batch_size)
    emb = emb.astype(np.float64)
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    best_val = np.full(ids.size, -np.inf)
    best_idx = np.zeros(ids.size, dtype=np.int64)
    for shard in sorted(shards, key=lambda s: s.rank):
        w = shard.weights.astype(np.float64)
        w /= np.linalg.norm(w, axis=0, keepdims=True)
        sims = emb @ w
        local_best = np.argmax(sims, axis=1)
        local_val = sims[np.arange(ids.size), local_best]
        better = local_val > best_val   # strict: ties stay with the lower index
        best_val[better] = local_val[better]
        best_idx[better] = local_best[better] + shard.start
    return float(np.mean(best_idx == ids))


# -- instance vs semantic correlation -----------------------------------------

@dataclass(frozen=True)
class CorrelationPoint:
    name: str
    instance_top1: float
    semantic_top1: float


@dataclass
class CorrelationReport:
    points: list
    coefficient: float   # Spearman rank correlation

    def to_json(self) -> str:
        return json.dumps(
            {
                "points": [
                    {"name": p.name, "instance_top1": p.instance_top1,
                     "semantic_top1": p.semantic_top1}
                    for p in self.points
                ],
                "rank_correlation": self.coefficient,
            },
            sort_keys=True,
        )

    def to_csv(self) -> str:
        lines = ["checkpoint,instance_top1,semantic_top1"]
        lines += [f"{p.name},{p.instance_top1},{p.semantic_top1}" for p in self.points]
        return "\n".join(lines) + "\n"


def _ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size)
    ranks[order] = np.arange(values.size, dtype=np.float64)
    # average ties
    for v in np.unique(values):
        mask = values == v
        if mask.sum() > 1:
            ranks[mask] = ranks[mask].mean()
    return ranks


def rank_correlation(xs, ys) -> float:
    """Spearman coefficient; 0.0 when either side is constant."""
    xs = np.asarray(xs, np.float64)
    ys = np.asarray(ys, np.float64)
    if xs.size != ys.size or xs.size < 2:
        raise ValueError("need two equally sized samples of length >= 2")
    rx, ry = _ranks(xs), _ranks(ys)
    sx, sy = rx.std(), ry.std()
    if sx == 0 or sy == 0:
        return 0.0
    return float(np.mean((rx - rx.mean()) * (ry - ry.mean())) / (sx * sy))


def correlation_report(checkpoints, dataset, probe_config: ProbeConfig = ProbeConfig(),
                       sample_size: int | None = None) -> CorrelationReport:
    """Instance-vs-semantic accuracy across checkpoints.

    `checkpoints` is a sequence of (name, encoder, shards). Semantic top-1
    comes from a linear probe on head embeddings, instance top-1 from the
    sharded argmax; requires semantic labels.
    """
    if dataset.semantic_labels is None:
        raise DataError("correlation report needs semantic labels")
    points = []
    sample = None
    if sample_size is not None and sample_size < dataset.num_instances:
        sample = rng_from(probe_config.seed, 7).choice(
            dataset.num_instances, sample_size, replace=False
        )
    for name, encoder, shards in checkpoints:
        inst = instance_accuracy(encoder, shards, dataset.features, sample)
        emb = embed_dataset(encoder, dataset.features)
        sem = linear_probe(emb, dataset.semantic_labels, probe_config).top1
        points.append(CorrelationPoint(name, inst, sem))
    coeff = rank_correlation([p.instance_top1 for p in points],
                             [p.semantic_top1 for p in points])
    return CorrelationReport(points, coeff)
