"""End-to-end training loop.

Each step feeds two (configurable) augmented views per sampled instance,
runs the distributed classifier forward/backward, backpropagates the summed
feature gradients through the shared encoder, and applies SGD with momentum:
encoder parameters are replicated per worker and stepped identically,
classifier columns are stepped shard-locally. Label smoothing re-mines the
hardest classes once per epoch from the current weights.

Everything is driven by named seeded streams, so a (config, seed) pair fully
determines the run.
"""

from __future__ import annotations

import dataclasses
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .collectives import WorkerGroup
from .data import AugmentationConfig, InstanceDataset, build_view_batch
from .encoder import BNMode, Encoder, EncoderConfig
from .errors import ConfigError
from .labels import one_hot
from .prior import extract_prior_features, init_weights_from_features
from .sharding import (
    assemble_weights,
    dhp_step,
    make_plan,
    random_weights,
    reference_forward_backward,
    save_shards,
    shards_from_full,
)
from .smoothing import build_labels, compute_hard_classes
from .util import resolve_dtype, rng_from

INIT_MODES = ("random", "prior_fixed_bn", "prior_running_bn")
LABEL_MODES = ("onehot", "smoothed")
CLASS_MODES = ("full", "sampled")

# seed-stream tags (see util.rng_from); data.augment uses its own tag
_STREAM_ORDER = 1
_STREAM_CLASSIFIER_INIT = 2
_STREAM_SAMPLE = 3


@dataclass
class TrainConfig:
    total_epochs: int = 30
    warmup_epochs: int = 10
    base_lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 256            # rows per step, counting views
    views_per_instance: int = 2
    tau: float = 0.15
    alpha: float = 0.2
    top_k: int = 100
    workers: int = 1
    seed: int = 0
    init_mode: str = "prior_running_bn"
    label_mode: str = "smoothed"
    class_mode: str = "full"
    sampled_classes: int = 0         # M, only for class_mode == "sampled"
    precision: str = "f32"
    loss_variant: str = "weighted_prob"
    hidden_dims: tuple = (64, 64)
    embed_dim: int = 128
    head_hidden: int | None = None
    bn_momentum: float = 0.1
    bn_epsilon: float = 1e-5
    activation: str = "relu"
    aug_noise: float = 0.1
    aug_mask: float = 0.0
    aug_scale: float = 0.0
    prior_batch: int = 256
    hard_block: int = 512            # column block size for hard-class mining
    checkpoint_every: int = 0        # epochs; 0 = final checkpoint only
    renorm_columns: bool = False     # re-normalize classifier columns after updates

    def __post_init__(self):
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
        self.validate()

    def validate(self):
        if self.total_epochs < 1:
            raise ConfigError("total_epochs must be >= 1")
        if not 0 <= self.warmup_epochs <= self.total_epochs:
            raise ConfigError("warmup_epochs must lie in [0, total_epochs]")
        if self.base_lr < 0:
            raise ConfigError("base_lr must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.views_per_instance < 1:
            raise ConfigError("views_per_instance must be >= 1")
        if self.batch_size < 1 or self.batch_size % self.views_per_instance:
            raise ConfigError("batch_size must be a positive multiple of views_per_instance")
        if self.tau <= 0:
            raise ConfigError("tau must be > 0")
        if not 0 <= self.alpha < 1:
            raise ConfigError("alpha must be in [0, 1)")
        if self.top_k < 0:
            raise ConfigError("top_k must be >= 0")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.init_mode not in INIT_MODES:
            raise ConfigError(f"init_mode must be one of {INIT_MODES}")
        if self.label_mode not in LABEL_MODES:
            raise ConfigError(f"label_mode must be one of {LABEL_MODES}")
        if self.class_mode not in CLASS_MODES:
            raise ConfigError(f"class_mode must be one of {CLASS_MODES}")
        if self.label_mode == "smoothed" and self.alpha > 0 and self.top_k == 0:
            raise ConfigError("smoothed labels with top_k=0 cannot carry smoothing mass")
        if self.class_mode == "sampled":
            if self.label_mode != "onehot":
                raise ConfigError("sampled-class training supports onehot labels only")
            if self.sampled_classes < 1:
                raise ConfigError("sampled-class training needs sampled_classes >= 1")
        if self.precision not in ("f32", "f64"):
            raise ConfigError("precision must be 'f32' or 'f64'")
        if self.loss_variant not in ("weighted_prob", "cross_entropy"):
            raise ConfigError("loss_variant must be 'weighted_prob' or 'cross_entropy'")

    @property
    def instances_per_step(self) -> int:
        return self.batch_size // self.views_per_instance

    def to_json(self) -> str:
        raw = dataclasses.asdict(self)
        raw["hidden_dims"] = list(self.hidden_dims)
        return json.dumps(raw, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        raw = json.loads(text)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "hidden_dims" in raw:
            raw["hidden_dims"] = tuple(raw["hidden_dims"])
        return cls(**raw)

    def encoder_config(self, input_dim: int) -> EncoderConfig:
        return EncoderConfig(
            input_dim=input_dim,
            hidden_dims=self.hidden_dims,
            embed_dim=self.embed_dim,
            head_hidden=self.head_hidden,
            bn_momentum=self.bn_momentum,
            bn_epsilon=self.bn_epsilon,
            activation=self.activation,
        )

    def augmentation(self) -> AugmentationConfig:
        return AugmentationConfig(self.aug_noise, self.aug_mask, self.aug_scale)


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    lr: float
    comm_bytes: int
    wall_time_s: float
    refresh_time_s: float


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)
    final_checkpoint: str | None = None

    def metrics(self) -> dict:
        """Numeric fields only; excludes wall-clock timings so determinism
        can be asserted on this dict."""
        return {
            "epochs": [
                {"epoch": e.epoch, "mean_loss": e.mean_loss, "lr": e.lr,
                 "comm_bytes": e.comm_bytes}
                for e in self.epochs
            ]
        }

    def write(self, out_dir):
        with open(os.path.join(out_dir, "log.jsonl"), "w") as fh:
            for e in self.epochs:
                fh.write(json.dumps(dataclasses.asdict(e), sort_keys=True) + "\n")
        with open(os.path.join(out_dir, "metrics.json"), "w") as fh:
            json.dump(self.metrics(), fh, indent=2, sort_keys=True)


@dataclass
class TrainResult:
    config: TrainConfig
    log: TrainLog
    encoder: Encoder
    shards: list
    group: WorkerGroup


def lr_at(config: TrainConfig, global_step: int, steps_per_epoch: int) -> float:
    """Linear warmup to base_lr, then cosine annealing to ~0."""
    if global_step < 0:
        raise ValueError("global_step must be >= 0")
    warmup_steps = config.warmup_epochs * steps_per_epoch
    total_steps = config.total_epochs * steps_per_epoch
    if global_step < warmup_steps:
        return config.base_lr * (global_step + 1) / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    progress = (global_step - warmup_steps) / span
    return 0.5 * config.base_lr * (1.0 + np.cos(np.pi * progress))


def sgd_update(param: np.ndarray, grad: np.ndarray, buf: np.ndarray,
               lr: float, momentum: float, weight_decay: float) -> None:
    """In place: buf <- momentum*buf + (grad + wd*param); param <- param - lr*buf."""
    if param.shape != grad.shape or param.shape != buf.shape:
        raise ValueError(
            f"shape mismatch: param {param.shape}, grad {grad.shape}, buf {buf.shape}"
        )
    dt = param.dtype.type
    buf *= dt(momentum)
    if weight_decay:
        buf += grad + dt(weight_decay) * param
    else:
        buf += grad
    param -= dt(lr) * buf


def sampled_class_mask(batch_ids, num_classes: int, m: int,
                       rng: np.random.Generator) -> np.ndarray:
    """Sorted class-id domain: batch positives plus uniform negatives, |mask| = m."""
    positives = np.unique(np.asarray(batch_ids, np.int64))
    if m > num_classes:
        m = num_classes
    if m < positives.size:
        raise ValueError(f"sampled_classes={m} smaller than the {positives.size} batch positives")
    pool = np.setdiff1d(np.arange(num_classes, dtype=np.int64), positives)
    extra = rng.choice(pool, size=m - positives.size, replace=False) if m > positives.size else []
    return np.sort(np.concatenate([positives, np.asarray(extra, np.int64)]))


def _decay_for(name: str, weight_decay: float) -> float:
    # BN scale/shift are excluded from weight decay
    if name.endswith(".gamma") or name.endswith(".beta"):
        return 0.0
    return weight_decay


def _init_classifier(config: TrainConfig, encoder: Encoder, dataset, plan):
    dtype = resolve_dtype(config.precision)
    if config.init_mode == "random":
        w = random_weights(plan.num_classes, config.embed_dim,
                           rng_from(config.seed, _STREAM_CLASSIFIER_INIT), dtype)
        return shards_from_full(w, plan)
    mode = BNMode.PRIOR_EXTRACT if config.init_mode == "prior_running_bn" else BNMode.EVAL
    prior = extract_prior_features(encoder, dataset, mode, config.prior_batch, config.seed)
    return init_weights_from_features(prior, plan)


def _sampled_step(config, shards, emb, ids_by_view, mask):
    """Ablation path: softmax restricted to a sampled class domain, evaluated
    in one address space; gradients scatter back to the owning shards."""
    w_full = assemble_weights(shards)
    w_masked = np.ascontiguousarray(w_full[:, mask])
    local_ids = np.searchsorted(mask, ids_by_view)
    labels = one_hot(local_ids, mask.size)
    loss, per_loss, d_w_masked, d_x = reference_forward_backward(
        w_masked, emb, labels, config.tau, config.loss_variant
    )
    per_rank = []
    for shard in shards:
        sel = (mask >= shard.start) & (mask < shard.stop)
        per_rank.append((np.flatnonzero(sel), mask[sel] - shard.start))
    return loss, d_x, d_w_masked, per_rank


def train(config: TrainConfig, dataset: InstanceDataset, out_dir=None) -> TrainResult:
    config.validate()
    dtype = resolve_dtype(config.precision)
    n = dataset.num_instances
    ips = config.instances_per_step
    if n < ips:
        raise ConfigError(f"dataset has {n} instances, steps need {ips}")
    if config.workers > n:
        raise ConfigError(f"{config.workers} workers cannot shard {n} classes")
    if config.class_mode == "sampled" and config.sampled_classes < ips:
        raise ConfigError("sampled_classes must be >= instances per step")
    steps_per_epoch = n // ips
    features = dataset.features  # semantic labels are never read here

    encoder = Encoder.init_random(config.encoder_config(dataset.input_dim),
                                  config.seed, dtype)
    plan = make_plan(n, config.workers)
    shards = _init_classifier(config, encoder, dataset, plan)
    group = WorkerGroup(config.workers)
    aug = config.augmentation()

    # data-parallel replicas of the encoder parameters and optimizer state;
    # replica 0 aliases the live encoder
    replicas = [encoder.params]
    replicas += [{k: v.copy() for k, v in encoder.params.items()}
                 for _ in range(config.workers - 1)]
    enc_momentum = [{k: np.zeros_like(v) for k, v in encoder.params.items()}
                    for _ in range(config.workers)]

    smoothing_on = config.label_mode == "smoothed" and config.alpha > 0 and config.top_k > 0
    log = TrainLog()
    global_step = 0
    lr = 0.0

    for epoch in range(config.total_epochs):
        epoch_start = time.perf_counter()
        comm_before = group.stats.total_bytes()

        refresh_time = 0.0
        table = None
        if smoothing_on:
            t0 = time.perf_counter()
            table = compute_hard_classes(assemble_weights(shards), config.top_k,
                                         config.hard_block, epoch=epoch)
            refresh_time = time.perf_counter() - t0

        order = rng_from(config.seed, _STREAM_ORDER, epoch).permutation(n)
        losses = []
        for step in range(steps_per_epoch):
            ids = order[step * ips:(step + 1) * ips]
            batch = build_view_batch(features, ids, config.views_per_instance,
                                     aug, config.seed, epoch, dtype)
            ids_by_view = np.repeat(ids, config.views_per_instance)
            alpha = config.alpha if smoothing_on else 0.0
            labels = build_labels(ids_by_view, table, alpha, config.top_k, n, epoch=epoch)
            lr = lr_at(config, global_step, steps_per_epoch)

            emb, cache = encoder.forward(batch, BNMode.TRAIN)

            if config.class_mode == "full":
                blocks = np.array_split(emb, config.workers)
                result = dhp_step(group, shards, blocks, labels, config.tau,
                                  config.loss_variant)
                loss, feature_grads = result.loss, result.feature_grads
                for shard, d_w in zip(shards, result.weight_grads):
                    sgd_update(shard.weights, d_w, shard.momentum,
                               lr, config.momentum, config.weight_decay)
            else:
                mask = sampled_class_mask(ids, n, config.sampled_classes,
                                          rng_from(config.seed, _STREAM_SAMPLE, epoch, step))
                loss, feature_grads, d_w_masked, per_rank = _sampled_step(
                    config, shards, emb, ids_by_view, mask
                )
                for shard, (mask_pos, local_cols) in zip(shards, per_rank):
                    if local_cols.size == 0:
                        continue
                    w_sub = shard.weights[:, local_cols]
                    b_sub = shard.momentum[:, local_cols]
                    sgd_update(w_sub, d_w_masked[:, mask_pos], b_sub,
                               lr, config.momentum, config.weight_decay)
                    shard.weights[:, local_cols] = w_sub
                    shard.momentum[:, local_cols] = b_sub

            if config.renorm_columns:
                for shard in shards:
                    shard.weights /= np.linalg.norm(shard.weights, axis=0)

            enc_grads, _ = encoder.backward(cache, feature_grads)
            for rank in range(config.workers):
                for name, grad in enc_grads.items():
                    sgd_update(replicas[rank][name], grad, enc_momentum[rank][name],
                               lr, config.momentum, _decay_for(name, config.weight_decay))
            for rank in range(1, config.workers):
                for name in enc_grads:
                    if not np.array_equal(replicas[rank][name], replicas[0][name]):
                        raise AssertionError(
                            f"encoder replicas diverged at rank {rank}, param {name}"
                        )

            losses.append(loss)
            global_step += 1

        log.epochs.append(EpochRecord(
            epoch=epoch,
            mean_loss=float(np.mean(losses)),
            lr=float(lr),
            comm_bytes=group.stats.total_bytes() - comm_before,
            wall_time_s=time.perf_counter() - epoch_start,
            refresh_time_s=refresh_time,
        ))

        if out_dir and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
            _write_checkpoint(os.path.join(out_dir, "checkpoints", f"epoch_{epoch}"),
                              encoder, shards)

    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        final = os.path.join(out_dir, "checkpoints", "final")
        _write_checkpoint(final, encoder, shards)
        log.final_checkpoint = final
        log.write(out_dir)
        with open(os.path.join(out_dir, "config.json"), "w") as fh:
            fh.write(config.to_json())

    return TrainResult(config=config, log=log, encoder=encoder, shards=shards, group=group)


def _write_checkpoint(dirpath, encoder, shards):
    os.makedirs(dirpath, exist_ok=True)
    encoder.save(os.path.join(dirpath, "encoder"))
    save_shards(os.path.join(dirpath, "classifier"), shards)
