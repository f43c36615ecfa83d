"""Cosine softmax losses and their analytic gradients.

`smoothed_softmax_loss` scores each row's labels by the log of the
label-weighted average softmax probability (variant "weighted_prob", the
default), or by conventional label-weighted cross entropy
(variant "cross_entropy"). The two coincide for one-hot labels.

All functions are pure; nothing here mutates its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .labels import SmoothedLabelSet
from .util import ensure_finite

VARIANTS = {
    "weighted_prob": kernels.WEIGHTED_EXP,
    "cross_entropy": kernels.WEIGHTED_LOGIT,
}


@dataclass(frozen=True)
class LossOutput:
    loss: float                    # mean over the batch
    logits_grad: np.ndarray        # (B, N), d(loss)/d(logits)
    per_instance_loss: np.ndarray  # (B,)


def _as_vector(v, name):
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError(f"{name} must be a nonempty 1-D vector")
    return arr


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between two vectors; errors on zero norm."""
    va = _as_vector(a, "a")
    vb = _as_vector(b, "b")
    if va.shape != vb.shape:
        raise ValueError(f"length mismatch: {va.shape[0]} vs {vb.shape[0]}")
    na = np.linalg.norm(va)
    nb = np.linalg.norm(vb)
    if na == 0.0:
        raise ValueError("first argument has zero norm")
    if nb == 0.0:
        raise ValueError("second argument has zero norm")
    return float(np.dot(va / na, vb / nb))


def normalize_columns(w: np.ndarray, index_offset: int = 0):
    """(w / column_norms, norms); errors name the offending global column."""
    norms = np.linalg.norm(w, axis=0)
    bad = np.flatnonzero(norms == 0.0)
    if bad.size:
        raise ValueError(f"zero-norm weight column at index {int(bad[0]) + index_offset}")
    return w / norms, norms


def normalize_rows(x: np.ndarray):
    norms = np.linalg.norm(x, axis=1)
    bad = np.flatnonzero(norms == 0.0)
    if bad.size:
        raise ValueError(f"zero-norm feature row at index {int(bad[0])}")
    return x / norms[:, None], norms


def cosine_logit_matrix(w: np.ndarray, x: np.ndarray, tau: float,
                        col_index_offset: int = 0) -> np.ndarray:
    """Entry (i, j) = cos(w[:, j], x[i]) / tau for weights (D, M), features (B, D)."""
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    w = np.asarray(w)
    x = np.asarray(x)
    if w.ndim != 2 or x.ndim != 2 or w.shape[0] != x.shape[1]:
        raise ValueError(f"shape mismatch: weights {w.shape} vs features {x.shape}")
    w_hat, _ = normalize_columns(w, col_index_offset)
    x_hat, _ = normalize_rows(x)
    return (x_hat @ w_hat) / tau


def _label_columns(labels: SmoothedLabelSet):
    """(pos_cols, neg_cols) as int64 arrays; full-matrix case, so local = global."""
    pos = np.ascontiguousarray(labels.positives, dtype=np.int64)
    neg = np.ascontiguousarray(labels.negatives, dtype=np.int64)
    return pos, neg


def per_instance_loss_from_stats(exp_sums, weighted, variant_code) -> np.ndarray:
    if variant_code == kernels.WEIGHTED_EXP:
        return np.log(exp_sums) - np.log(weighted)
    return np.log(exp_sums) - weighted


def smoothed_softmax_loss(logits: np.ndarray, labels: SmoothedLabelSet,
                          variant: str = "weighted_prob") -> LossOutput:
    """Loss and analytic logits gradient for one batch over all N classes."""
    code = VARIANTS[variant]
    logits = np.ascontiguousarray(logits)
    if logits.ndim != 2:
        raise ValueError("logits must be (batch, classes)")
    b, n = logits.shape
    if b != labels.batch_size:
        raise ValueError(f"label rows ({labels.batch_size}) != logit rows ({b})")
    if labels.num_classes != n:
        raise ValueError(f"label universe ({labels.num_classes}) != logit columns ({n})")
    if abs(labels.row_mass() - 1.0) > 1e-6:
        raise ValueError(f"label rows sum to {labels.row_mass()!r}, expected 1")
    pos, neg = _label_columns(labels)
    row_max = np.ascontiguousarray(logits.max(axis=1))
    exp_sums, weighted = kernels.softmax_stats(
        logits, row_max, pos, neg, labels.positive_mass, labels.negative_mass, code
    )
    per_loss = per_instance_loss_from_stats(exp_sums, weighted, code)
    grad = kernels.softmax_loss_grad(
        logits, row_max, exp_sums, weighted, pos, neg,
        labels.positive_mass, labels.negative_mass, 1.0 / b, code,
    )
    loss = float(np.mean(per_loss))
    ensure_finite(loss, "softmax loss")
    return LossOutput(loss=loss, logits_grad=grad, per_instance_loss=per_loss)


def softmax_loss_grad_check(batch: int, classes: int, trials: int = 5,
                            epsilon: float = 1e-6, smoothed: bool = True,
                            variant: str = "weighted_prob", seed: int = 0) -> float:
    """Worst relative error of the analytic logits gradient against central
    finite differences, over `trials` random problems. 64-bit only."""
    from .labels import SmoothedLabelSet, one_hot
    from .util import rng_from

    worst = 0.0
    for t in range(trials):
        rng = rng_from(seed, t)
        logits = rng.standard_normal((batch, classes))
        ids = rng.integers(0, classes, size=batch)
        if smoothed and classes > 1:
            k = min(3, classes - 1)
            hard = np.stack([
                rng.permutation(np.setdiff1d(np.arange(classes), [i]))[:k] for i in ids
            ])
            labels = SmoothedLabelSet(classes, ids, hard, alpha=0.2)
        else:
            labels = one_hot(ids, classes)

        analytic = smoothed_softmax_loss(logits, labels, variant).logits_grad
        numeric = np.zeros_like(logits)
        for i in range(batch):
            for j in range(classes):
                bumped = logits.copy()
                bumped[i, j] += epsilon
                up = smoothed_softmax_loss(bumped, labels, variant).loss
                bumped[i, j] -= 2 * epsilon
                down = smoothed_softmax_loss(bumped, labels, variant).loss
                numeric[i, j] = (up - down) / (2 * epsilon)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
        worst = max(worst, float(np.max(np.abs(analytic - numeric) / denom)))
    return worst
