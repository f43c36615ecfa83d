"""Classifier warm-start from raw features of the untrained encoder.

One inference epoch pushes every instance through the fixed random encoder;
with batch-statistics normalization the running BN averages evolve across
batches, so each feature is centered against the rest of the data. The
resulting feature rows become the initial classifier weight columns.

Also here: the intra/inter-instance similarity diagnostic and the
nearest-neighbor semantic retrieval probe for untrained encoders.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .data import AugmentationConfig, InstanceDataset, augment
from .encoder import BNMode, Encoder
from .errors import DataError, NumericError
from .sharding import ShardPlan, WeightShard

_EXTRACT_MODES = (BNMode.EVAL, BNMode.PRIOR_EXTRACT)


@dataclass
class PriorFeatures:
    features: np.ndarray    # (N, D), row i = instance i
    meta: dict = field(default_factory=dict)

    @property
    def num_instances(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True)
class SimilarityReport:
    mean_intra: float   # mean cosine between two views of the same instance
    mean_inter: float   # mean cosine between views of different instances
    meta: dict = field(default_factory=dict)

    @property
    def gap(self) -> float:
        return self.mean_intra - self.mean_inter

    def to_json(self) -> str:
        return json.dumps(
            {
                "mean_intra": self.mean_intra,
                "mean_inter": self.mean_inter,
                "gap": self.gap,
                "meta": self.meta,
            },
            sort_keys=True,
        )


@dataclass(frozen=True)
class RetrievalResult:
    accuracy: float     # top-1 semantic agreement of nearest other instance
    chance: float       # expected accuracy of a uniformly random other instance
    num_instances: int

    def to_json(self) -> str:
        return json.dumps(
            {
                "accuracy": self.accuracy,
                "chance": self.chance,
                "num_instances": self.num_instances,
            },
            sort_keys=True,
        )


def _batch_ranges(n: int, batch_size: int, merge_singleton: bool):
    starts = list(range(0, n, batch_size))
    ranges = [(s, min(s + batch_size, n)) for s in starts]
    # batch statistics need >= 2 rows; fold a trailing singleton into its
    # predecessor so extraction still covers every instance
    if merge_singleton and len(ranges) > 1 and ranges[-1][1] - ranges[-1][0] == 1:
        last = ranges.pop()
        prev = ranges.pop()
        ranges.append((prev[0], last[1]))
    return ranges


def extract_prior_features(
    encoder: Encoder,
    dataset: InstanceDataset,
    mode: BNMode = BNMode.PRIOR_EXTRACT,
    batch_size: int = 256,
    seed: int = 0,
    augmentation: AugmentationConfig | None = None,
) -> PriorFeatures:
    """One ordered pass over all instances; exactly one view each.

    PRIOR_EXTRACT updates the encoder's BN running statistics in place (that
    evolution is the point); EVAL mutates nothing. Rows come back in
    instance-ID order regardless of batching.
    """
    if dataset.num_instances == 0:
        raise DataError("cannot extract features from an empty dataset")
    if mode not in _EXTRACT_MODES:
        raise ValueError("extraction runs in EVAL or PRIOR_EXTRACT mode")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = dataset.num_instances
    merge = mode is BNMode.PRIOR_EXTRACT
    rows = []
    for start, stop in _batch_ranges(n, batch_size, merge):
        block = dataset.features[start:stop]
        if augmentation is not None:
            block = np.stack([
                augment(dataset.features[i], augmentation, seed, i, 0, 0)
                for i in range(start, stop)
            ])
        emb, _ = encoder.forward(block, mode)
        rows.append(emb)
    features = np.concatenate(rows, axis=0)
    if (np.linalg.norm(features, axis=1) == 0.0).any():
        raise NumericError("prior extraction produced a zero-norm feature row")
    meta = {
        "batch_size": batch_size,
        "seed": seed,
        "mode": mode.value,
        "augmented": augmentation is not None,
    }
    return PriorFeatures(features, meta)


def init_weights_from_features(prior: PriorFeatures, plan: ShardPlan) -> list[WeightShard]:
    """Weight column i := feature row i, split per plan; fresh momentum."""
    if prior.num_instances != plan.num_classes:
        raise ValueError(
            f"{prior.num_instances} prior rows cannot initialize {plan.num_classes} classes"
        )
    w_full = np.ascontiguousarray(prior.features.T)
    shards = []
    for rank in range(plan.num_workers):
        start, stop = plan.rank_range(rank)
        w = np.ascontiguousarray(w_full[:, start:stop])
        shards.append(WeightShard(rank, plan, w, np.zeros_like(w)))
    return shards


def similarity_report(
    encoder: Encoder,
    dataset: InstanceDataset,
    sample_size: int,
    seed: int,
    augmentation: AugmentationConfig,
    mode: BNMode = BNMode.PRIOR_EXTRACT,
    batch_size: int = 256,
) -> SimilarityReport:
    """Mean cosine of same-instance view pairs vs cross-instance view pairs.

    Works on a copy of the encoder, so repeated calls are pure. Both view
    sets are extracted with the requested BN mode (first all first views,
    then all second views).
    """
    from .util import rng_from

    if sample_size < 2:
        raise ValueError("sample_size must be >= 2")
    n = dataset.num_instances
    if sample_size > n:
        raise ValueError(f"sample_size {sample_size} exceeds dataset size {n}")
    ids = np.sort(rng_from(seed, 0).choice(n, size=sample_size, replace=False))
    probe = encoder.copy()
    views = []
    for view_index in (0, 1):
        rows = np.stack([
            augment(dataset.features[int(i)], augmentation, seed, int(i), 0, view_index)
            for i in ids
        ])
        collected = []
        merge = mode is BNMode.PRIOR_EXTRACT
        for start, stop in _batch_ranges(sample_size, batch_size, merge):
            collected.append(probe.forward(rows[start:stop], mode)[0])
        views.append(np.concatenate(collected, axis=0))
    a, b = views
    a_hat = a / np.linalg.norm(a, axis=1, keepdims=True)
    b_hat = b / np.linalg.norm(b, axis=1, keepdims=True)
    sims = a_hat @ b_hat.T
    s = sample_size
    mean_intra = float(np.trace(sims) / s)
    mean_inter = float((sims.sum() - np.trace(sims)) / (s * (s - 1)))
    meta = {"sample_size": s, "seed": seed, "mode": mode.value}
    return SimilarityReport(mean_intra, mean_inter, meta)


def random_retrieval_probe(
    encoder: Encoder,
    dataset: InstanceDataset,
    seed: int = 0,
    mode: BNMode = BNMode.PRIOR_EXTRACT,
    batch_size: int = 256,
) -> RetrievalResult:
    """Nearest-other-instance semantic agreement for an (untrained) encoder.

    Ties in the cosine go to the lowest candidate index. `chance` is the
    exact hit rate of picking a uniformly random other instance.
    """
    if dataset.semantic_labels is None:
        raise DataError("retrieval probe needs a dataset with semantic labels")
    n = dataset.num_instances
    if n < 2:
        raise ValueError("retrieval needs at least two instances")
    prior = extract_prior_features(encoder.copy(), dataset, mode, batch_size, seed)
    feats = prior.features.astype(np.float64)
    feats /= np.linalg.norm(feats, axis=1, keepdims=True)
    labels = dataset.semantic_labels
    hits = 0
    block = 512
    for start in range(0, n, block):
        stop = min(start + block, n)
        sims = feats[start:stop] @ feats.T
        sims[np.arange(stop - start), np.arange(start, stop)] = -np.inf
        nearest = np.argmax(sims, axis=1)   # first max = lowest index on ties
        hits += int((labels[nearest] == labels[start:stop]).sum())
    accuracy = hits / n
    counts = np.bincount(labels)
    chance = float(np.mean((counts[labels] - 1) / (n - 1)))
    return RetrievalResult(accuracy=accuracy, chance=chance, num_instances=n)
