"""Synthetic clustered datasets, vector-space augmentations, dataset bundles.

Every instance is its own class (instance ID = row index). Hidden semantic
labels exist only for evaluation and are stripped from anything the training
path sees.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .ltf import read_ltf, write_ltf
from .util import rng_from

_AUG_STREAM = 11  # keeps augmentation draws disjoint from other seed streams


@dataclass
class InstanceDataset:
    features: np.ndarray                    # (N, input_dim), one row per instance
    semantic_labels: np.ndarray | None = None  # (N,) int64, evaluation-only
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features)
        if self.features.ndim != 2:
            raise DataError("dataset features must be a 2-D (instances x dim) array")
        if self.semantic_labels is not None:
            self.semantic_labels = np.ascontiguousarray(self.semantic_labels, dtype=np.int64)
            if self.semantic_labels.shape != (self.features.shape[0],):
                raise DataError("semantic label count does not match instance count")

    @property
    def num_instances(self) -> int:
        return self.features.shape[0]

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    def without_labels(self) -> "InstanceDataset":
        """Training-side view: same features, no semantic labels."""
        return InstanceDataset(self.features, None, dict(self.meta))


def generate_synthetic(
    num_semantic: int,
    instances_per_class: int,
    input_dim: int,
    spread: float,
    seed: int,
) -> InstanceDataset:
    """Clustered gaussian data: one centroid per hidden semantic class,
    `instances_per_class` noisy copies around each."""
    if num_semantic < 1 or instances_per_class < 1 or input_dim < 1:
        raise ValueError("num_semantic, instances_per_class, input_dim must all be >= 1")
    if spread < 0:
        raise ValueError("spread must be >= 0")
    rng = rng_from(seed, 0)
    centroids = rng.standard_normal((num_semantic, input_dim))
    noise = rng.standard_normal((num_semantic * instances_per_class, input_dim))
    features = np.repeat(centroids, instances_per_class, axis=0) + spread * noise
    labels = np.repeat(np.arange(num_semantic, dtype=np.int64), instances_per_class)
    meta = {
        "num_semantic": num_semantic,
        "instances_per_class": instances_per_class,
        "input_dim": input_dim,
        "spread": spread,
        "seed": seed,
    }
    return InstanceDataset(features, labels, meta)


@dataclass(frozen=True)
class AugmentationConfig:
    """Vector-space stand-ins for image augmentation: additive noise,
    coordinate masking, and global scale jitter."""
    noise_sigma: float = 0.0
    mask_rate: float = 0.0
    scale_jitter: float = 0.0   # scale drawn uniformly from [1 - j, 1 + j]

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not 0.0 <= self.mask_rate < 1.0:
            raise ValueError("mask_rate must be in [0, 1)")
        if self.scale_jitter < 0:
            raise ValueError("scale_jitter must be >= 0")

    @property
    def is_identity(self) -> bool:
        return self.noise_sigma == 0 and self.mask_rate == 0 and self.scale_jitter == 0


def augment(
    x: np.ndarray,
    config: AugmentationConfig,
    seed: int,
    instance_id: int,
    epoch: int,
    view_index: int,
) -> np.ndarray:
    """One augmented view of `x`, deterministic in (seed, instance, epoch, view).

    Applied in order: additive noise, coordinate mask, scale. A zero-strength
    config returns an exact copy.
    """
    out = np.array(x, copy=True)
    if config.is_identity:
        return out
    rng = rng_from(seed, _AUG_STREAM, instance_id, epoch, view_index)
    if config.noise_sigma > 0:
        out += config.noise_sigma * rng.standard_normal(out.shape)
    if config.mask_rate > 0:
        out[rng.random(out.shape) < config.mask_rate] = 0.0
    if config.scale_jitter > 0:
        out *= 1.0 + config.scale_jitter * (2.0 * rng.random() - 1.0)
    return out


def build_view_batch(
    features: np.ndarray,
    instance_ids: np.ndarray,
    views_per_instance: int,
    config: AugmentationConfig,
    seed: int,
    epoch: int,
    dtype=np.float64,
) -> np.ndarray:
    """Instance-major stack of augmented views: rows are
    [id0/view0, id0/view1, ..., id1/view0, ...]."""
    rows = []
    for iid in instance_ids:
        base = features[int(iid)]
        for v in range(views_per_instance):
            rows.append(augment(base, config, seed, int(iid), epoch, v))
    return np.asarray(rows, dtype=dtype)


def save_dataset(dirpath, dataset: InstanceDataset) -> None:
    """Bundle = directory with features.ltf, optional labels.ltf, meta.json."""
    os.makedirs(dirpath, exist_ok=True)
    write_ltf(os.path.join(dirpath, "features.ltf"), dataset.features.astype(np.float64))
    if dataset.semantic_labels is not None:
        write_ltf(
            os.path.join(dirpath, "labels.ltf"),
            dataset.semantic_labels.astype(np.float64),
        )
    with open(os.path.join(dirpath, "meta.json"), "w") as fh:
        json.dump(dataset.meta, fh, indent=2, sort_keys=True)


def load_dataset(dirpath) -> InstanceDataset:
    feat_path = os.path.join(dirpath, "features.ltf")
    if not os.path.isfile(feat_path):
        raise DataError(f"{dirpath}: not a dataset bundle (missing features.ltf)")
    features = read_ltf(feat_path)
    labels = None
    labels_path = os.path.join(dirpath, "labels.ltf")
    if os.path.isfile(labels_path):
        labels = read_ltf(labels_path).astype(np.int64)
    meta = {}
    meta_path = os.path.join(dirpath, "meta.json")
    if os.path.isfile(meta_path):
        with open(meta_path) as fh:
            meta = json.load(fh)
    return InstanceDataset(features, labels, meta)
