"""Pure numpy implementations of the hot kernels.

Same contracts as the compiled versions in _ckernels.pyx; results agree to
rounding (selection results agree exactly). Column index -1 in pos_cols /
neg_cols means "this label entry lives outside the local block" and is
skipped.
"""

import numpy as np

BACKEND_NAME = "numpy"

# variant codes shared with the compiled backend
WEIGHTED_EXP = 0     # label-weighted sum of exp(logit - max)
WEIGHTED_LOGIT = 1   # label-weighted sum of (logit - max)


def softmax_stats(logits, row_max, pos_cols, neg_cols, pos_mass, neg_mass, variant):
    """Per-row exp-sum and label-weighted statistic over a column block.

    Returns (exp_sums, weighted), both shaped (B,) in the logits dtype.
    """
    shifted = logits - row_max[:, None]
    expv = np.exp(shifted)
    exp_sums = expv.sum(axis=1)
    source = expv if variant == WEIGHTED_EXP else shifted
    b = logits.shape[0]
    rows = np.arange(b)
    weighted = np.zeros(b, dtype=logits.dtype)
    own = pos_cols >= 0
    if own.any():
        weighted[own] += pos_mass * source[rows[own], pos_cols[own]]
    for k in range(neg_cols.shape[1]):
        col = neg_cols[:, k]
        own = col >= 0
        if own.any():
            weighted[own] += neg_mass * source[rows[own], col[own]]
    return exp_sums, weighted


def softmax_loss_grad(logits, row_max, exp_sums, weighted, pos_cols, neg_cols,
                      pos_mass, neg_mass, scale, variant):
    """Gradient of the batch-mean loss w.r.t. this logits block.

    WEIGHTED_EXP:   scale * (p - y*exp(l-m)/weighted)  with p = exp(l-m)/exp_sums
    WEIGHTED_LOGIT: scale * (p - y)
    """
    expv = np.exp(logits - row_max[:, None])
    grad = expv / exp_sums[:, None]
    b = logits.shape[0]
    rows = np.arange(b)
    if variant == WEIGHTED_EXP:
        own = pos_cols >= 0
        if own.any():
            r, c = rows[own], pos_cols[own]
            grad[r, c] -= pos_mass * expv[r, c] / weighted[own]
        for k in range(neg_cols.shape[1]):
            col = neg_cols[:, k]
            own = col >= 0
            if own.any():
                r, c = rows[own], col[own]
                grad[r, c] -= neg_mass * expv[r, c] / weighted[own]
    else:
        own = pos_cols >= 0
        if own.any():
            grad[rows[own], pos_cols[own]] -= pos_mass
        for k in range(neg_cols.shape[1]):
            col = neg_cols[:, k]
            own = col >= 0
            if own.any():
                grad[rows[own], col[own]] -= neg_mass
    grad *= scale
    return grad


def topk_desc(scores, exclude_cols, k):
    """Top-k column indices per row by (score desc, index asc).

    exclude_cols[i] >= 0 removes that column from row i's candidates.
    Requires k <= number of candidate columns.
    """
    b, n = scores.shape
    k = int(k)
    out = np.empty((b, k), dtype=np.int64)
    if k == 0:
        return out
    any_excluded = bool((np.asarray(exclude_cols) >= 0).any())
    if k > n or (k == n and any_excluded):
        raise ValueError(f"k={k} exceeds available candidate columns")
    idx_key = np.arange(n)
    for i in range(b):
        row = scores[i]
        if exclude_cols[i] >= 0:
            row = row.copy()
            row[exclude_cols[i]] = -np.inf
        order = np.lexsort((idx_key, -row))
        out[i] = order[:k]
    return out
