"""Per-epoch hardest-class discovery and smoothed label construction.

Each instance is represented by its classifier weight column; its k hardest
negatives are the other columns with the highest cosine similarity
(exact top-k, ties broken toward the lower index). The table is rebuilt once
per epoch and stamped, so labels can refuse a stale one.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConfigError
from .labels import SmoothedLabelSet, one_hot


@dataclass
class HardClassTable:
    epoch: int
    k: int
    indices: np.ndarray   # (N, k) int64: row i = i's hardest negatives, best first

    @property
    def num_classes(self) -> int:
        return self.indices.shape[0]

    def to_json(self) -> str:
        return json.dumps(
            {
                "epoch": self.epoch,
                "k": self.k,
                "hardest": {str(i): row.tolist() for i, row in enumerate(self.indices)},
            },
            sort_keys=True,
        )


def _full_weights(weights_or_shards) -> np.ndarray:
    if isinstance(weights_or_shards, np.ndarray):
        return weights_or_shards
    # a sequence of weight shards; assemble columns in rank order
    from .sharding import assemble_weights

    return assemble_weights(weights_or_shards)


def compute_hard_classes(weights_or_shards, k: int, block_size: int = 512,
                         epoch: int = 0) -> HardClassTable:
    """Exact top-k most-similar other classes for every class.

    Similarities are evaluated in float64 in row blocks of `block_size`
    instances, so memory stays at block_size x N. Blocked and unblocked
    runs select identical indices.
    """
    w = np.asarray(_full_weights(weights_or_shards), dtype=np.float64)
    if w.ndim != 2:
        raise ValueError("weights must be (dim, classes)")
    if k < 0:
        raise ValueError("k must be >= 0")
    if block_size < 1:
        raise ValueError("block_size must be >= 1")
    n = w.shape[1]
    if k >= n:
        warnings.warn(f"k={k} >= {n} classes; clamping to {n - 1}", stacklevel=2)
        k = n - 1
    norms = np.linalg.norm(w, axis=0)
    if (norms == 0.0).any():
        raise ValueError(f"zero-norm weight column at index {int(np.flatnonzero(norms == 0)[0])}")
    w_hat = w / norms
    indices = np.empty((n, k), dtype=np.int64)
    for start in range(0, n, block_size):
        stop = min(start + block_size, n)
        sims = np.ascontiguousarray(w_hat[:, start:stop].T @ w_hat)
        self_cols = np.arange(start, stop, dtype=np.int64)
        indices[start:stop] = kernels.topk_desc(sims, self_cols, k)
    return HardClassTable(epoch=epoch, k=k, indices=indices)


def build_labels(instance_ids, table: HardClassTable | None, alpha: float, k: int,
                 num_classes: int, epoch: int = 0) -> SmoothedLabelSet:
    """Label rows for a batch of instance ids.

    alpha = 0 or k = 0 yields exact one-hot labels and ignores the table.
    Otherwise the table must carry the current epoch stamp and at least k
    columns; when fewer than k negatives exist the smoothing mass is spread
    over all of them.
    """
    ids = np.ascontiguousarray(instance_ids, np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= num_classes):
        raise ValueError("instance id outside [0, num_classes)")
    if alpha == 0.0 or k == 0:
        return one_hot(ids, num_classes)
    if table is None:
        raise ConfigError("smoothed labels need a hard-class table when alpha > 0")
    if table.epoch != epoch:
        raise ConfigError(
            f"hard-class table is stale (built at epoch {table.epoch}, now {epoch})"
        )
    if table.num_classes != num_classes:
        raise ValueError("hard-class table covers a different class count")
    k_eff = min(k, num_classes - 1)
    if table.k < k_eff:
        raise ConfigError(f"table holds top-{table.k}, labels need top-{k_eff}")
    negatives = table.indices[ids, :k_eff]
    return SmoothedLabelSet(num_classes, ids, negatives, alpha)
