"""Distributed hybrid-parallel softmax classifier over simulated workers.

The classifier weight matrix (D x N, one column per instance class) is split
into contiguous column ranges, one per worker. A training step runs:

    1. each rank contributes its slice of the minibatch features
    2. all_gather so every rank sees the full feature batch
    3. each rank computes cosine logits against its local columns
       (plus one all_reduce MAX for a shared softmax stabilizer)
    4. per-rank exponential sums and label-weighted terms are summed across
       ranks in a single all_reduce, yielding the softmax denominators and
       the per-row label statistic
    5. every rank evaluates the identical per-instance losses
    6. each rank differentiates into its local weight columns
    7. partial feature gradients are summed via all_reduce
    8. the caller applies the optimizer step

`reference_forward_backward` is the single-address-space implementation the
distributed path is tested against; with one worker the two are bit-equal.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .collectives import CommStats, WorkerGroup
from .errors import DataError
from .labels import SmoothedLabelSet
from .losses import VARIANTS, normalize_columns, normalize_rows, per_instance_loss_from_stats
from .util import ensure_finite


@dataclass(frozen=True)
class ShardPlan:
    num_classes: int
    num_workers: int
    bounds: tuple   # length num_workers + 1, ascending, bounds[0] = 0

    def rank_range(self, rank: int) -> tuple[int, int]:
        return self.bounds[rank], self.bounds[rank + 1]

    def rank_size(self, rank: int) -> int:
        return self.bounds[rank + 1] - self.bounds[rank]

    def owner_of(self, class_id: int) -> int:
        return int(np.searchsorted(self.bounds, class_id, side="right") - 1)

    def to_json(self) -> str:
        return json.dumps(
            {
                "num_classes": self.num_classes,
                "num_workers": self.num_workers,
                "bounds": list(self.bounds),
            },
            sort_keys=True,
        )


def make_plan(num_classes: int, num_workers: int) -> ShardPlan:
    """Contiguous even split; the first (N mod T) ranks carry one extra class."""
    if num_workers < 1:
        raise ValueError("need at least one worker")
    if num_classes < num_workers:
        raise ValueError(f"cannot split {num_classes} classes over {num_workers} workers")
    base, extra = divmod(num_classes, num_workers)
    bounds = [0]
    for rank in range(num_workers):
        bounds.append(bounds[-1] + base + (1 if rank < extra else 0))
    return ShardPlan(num_classes, num_workers, tuple(bounds))


@dataclass
class WeightShard:
    rank: int
    plan: ShardPlan
    weights: np.ndarray    # (D, local classes)
    momentum: np.ndarray   # same shape, optimizer state

    @property
    def start(self) -> int:
        return self.plan.bounds[self.rank]

    @property
    def stop(self) -> int:
        return self.plan.bounds[self.rank + 1]


def shards_from_full(w_full: np.ndarray, plan: ShardPlan) -> list[WeightShard]:
    if w_full.shape[1] != plan.num_classes:
        raise ValueError(f"weights have {w_full.shape[1]} columns, plan expects {plan.num_classes}")
    shards = []
    for rank in range(plan.num_workers):
        start, stop = plan.rank_range(rank)
        w = np.ascontiguousarray(w_full[:, start:stop])
        shards.append(WeightShard(rank, plan, w, np.zeros_like(w)))
    return shards


def assemble_weights(shards) -> np.ndarray:
    """Reassemble the full (D, N) matrix from per-rank shards."""
    ordered = sorted(shards, key=lambda s: s.rank)
    return np.concatenate([s.weights for s in ordered], axis=1)


def random_weights(num_classes: int, dim: int, rng: np.random.Generator, dtype) -> np.ndarray:
    return (rng.standard_normal((dim, num_classes)) / np.sqrt(dim)).astype(dtype)


@dataclass
class DistLossResult:
    loss: float
    per_instance_loss: np.ndarray
    feature_grads: np.ndarray       # (B, D), already summed, identical on all ranks
    weight_grads: list              # per-rank (D, local classes)
    comm: CommStats                 # collective traffic of this step


@dataclass
class DhpState:
    """Forward-pass residuals consumed exactly once by dhp_backward."""
    group: WorkerGroup
    plan: ShardPlan
    tau: float
    variant_code: int
    batch_size: int
    loss: float
    per_instance_loss: np.ndarray
    comm_before: CommStats
    rank_cache: list = field(default_factory=list)
    consumed: bool = False


def _cosine_forward(w: np.ndarray, x: np.ndarray, tau: float, col_offset: int = 0):
    """Shared by the reference and every rank: returns
    (logits, cosines, w_hat, w_norms, x_hat, x_norms)."""
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    w_hat, w_norms = normalize_columns(w, col_offset)
    x_hat, x_norms = normalize_rows(x)
    cosines = x_hat @ w_hat
    return cosines / tau, cosines, w_hat, w_norms, x_hat, x_norms


def _cosine_backward(logit_grad, cosines, w_hat, w_norms, x_hat, x_norms, tau):
    """Gradients of the loss through cos(w_j, x_i) / tau.

    d/dw_j = (x_hat^T g_j - w_hat_j * sum_i g_ij c_ij) / (tau |w_j|)
    d/dx_i = (g_i w_hat^T - x_hat_i * sum_j g_ij c_ij) / (tau |x_i|)
    """
    colsum = np.einsum("ij,ij->j", logit_grad, cosines)
    d_w = (x_hat.T @ logit_grad - w_hat * colsum) / (tau * w_norms)
    rowsum = np.einsum("ij,ij->i", logit_grad, cosines)
    d_x = (logit_grad @ w_hat.T - x_hat * rowsum[:, None]) / (tau * x_norms[:, None])
    return d_w, d_x


def _local_label_columns(labels: SmoothedLabelSet, start: int, stop: int):
    pos = labels.positives
    pos_local = np.where((pos >= start) & (pos < stop), pos - start, -1)
    neg = labels.negatives
    neg_local = np.where((neg >= start) & (neg < stop), neg - start, -1)
    return np.ascontiguousarray(pos_local, np.int64), np.ascontiguousarray(neg_local, np.int64)


def _validate_labels(labels: SmoothedLabelSet, num_classes: int, batch_size: int):
    if labels.num_classes != num_classes:
        raise ValueError(
            f"labels cover {labels.num_classes} classes, classifier has {num_classes}"
        )
    if labels.batch_size != batch_size:
        raise ValueError(f"labels have {labels.batch_size} rows, batch has {batch_size}")
    if abs(labels.row_mass() - 1.0) > 1e-6:
        raise ValueError(f"label rows sum to {labels.row_mass()!r}, expected 1")


def dhp_forward(group: WorkerGroup, shards, feature_blocks, labels: SmoothedLabelSet,
                tau: float, variant: str = "weighted_prob") -> DhpState:
    """Steps 1-5: gather features, rank-local logits, distributed softmax.

    `feature_blocks` is one (b_r, D) array per rank whose rows concatenate to
    the full batch in rank order. The returned state carries the loss and
    feeds dhp_backward.
    """
    code = VARIANTS[variant]
    if len(shards) != group.size or len(feature_blocks) != group.size:
        raise ValueError("need exactly one shard and one feature block per rank")
    plan = shards[0].plan
    for rank, shard in enumerate(shards):
        if shard.rank != rank or shard.plan != plan:
            raise ValueError(f"shard list out of order or mixed plans at rank {rank}")
    batch_size = sum(int(np.asarray(b).shape[0]) for b in feature_blocks)
    if batch_size == 0:
        raise ValueError("empty batch")
    _validate_labels(labels, plan.num_classes, batch_size)
    comm_before = group.stats.snapshot()

    gathered = group.all_gather(feature_blocks)

    local_logits, local_cos, local_geom, local_maxes = [], [], [], []
    for rank in range(group.size):
        start, stop = plan.rank_range(rank)
        logits, cosines, w_hat, w_norms, x_hat, x_norms = _cosine_forward(
            shards[rank].weights, gathered[rank], tau, col_offset=start
        )
        local_logits.append(logits)
        local_cos.append(cosines)
        local_geom.append((w_hat, w_norms, x_hat, x_norms))
        local_maxes.append(np.ascontiguousarray(logits.max(axis=1)))

    maxes = group.all_reduce(local_maxes, op="max")

    stat_blocks = []
    label_cols = []
    for rank in range(group.size):
        start, stop = plan.rank_range(rank)
        pos_local, neg_local = _local_label_columns(labels, start, stop)
        label_cols.append((pos_local, neg_local))
        exp_sums, weighted = kernels.softmax_stats(
            local_logits[rank], maxes[rank], pos_local, neg_local,
            labels.positive_mass, labels.negative_mass, code,
        )
        stat_blocks.append(np.stack([exp_sums, weighted], axis=1))

    stats = group.all_reduce(stat_blocks, op="sum")

    losses = []
    rank_cache = []
    for rank in range(group.size):
        exp_sums = np.ascontiguousarray(stats[rank][:, 0])
        weighted = np.ascontiguousarray(stats[rank][:, 1])
        per_loss = per_instance_loss_from_stats(exp_sums, weighted, code)
        losses.append((float(np.mean(per_loss)), per_loss))
        rank_cache.append({
            "logits": local_logits[rank],
            "cosines": local_cos[rank],
            "geom": local_geom[rank],
            "row_max": maxes[rank],
            "exp_sums": exp_sums,
            "weighted": weighted,
            "label_cols": label_cols[rank],
        })
    for loss_r, per_r in losses[1:]:
        if loss_r != losses[0][0] or not np.array_equal(per_r, losses[0][1]):
            raise AssertionError("per-rank losses diverged; collectives are broken")
    loss, per_instance = losses[0]
    ensure_finite(loss, "distributed softmax loss")

    return DhpState(
        group=group, plan=plan, tau=tau, variant_code=code, batch_size=batch_size,
        loss=loss, per_instance_loss=per_instance, comm_before=comm_before,
        rank_cache=rank_cache,
    )


def dhp_backward(state: DhpState, labels: SmoothedLabelSet) -> DistLossResult:
    """Steps 6-7: rank-local weight gradients, summed feature gradients."""
    if state.consumed:
        raise ValueError("dhp_backward needs a fresh forward state (already consumed)")
    state.consumed = True
    group = state.group
    weight_grads = []
    partial_feature_grads = []
    for rank in range(group.size):
        cache = state.rank_cache[rank]
        pos_local, neg_local = cache["label_cols"]
        grad = kernels.softmax_loss_grad(
            cache["logits"], cache["row_max"], cache["exp_sums"], cache["weighted"],
            pos_local, neg_local, labels.positive_mass, labels.negative_mass,
            1.0 / state.batch_size, state.variant_code,
        )
        w_hat, w_norms, x_hat, x_norms = cache["geom"]
        d_w, d_x = _cosine_backward(
            grad, cache["cosines"], w_hat, w_norms, x_hat, x_norms, state.tau
        )
        weight_grads.append(d_w)
        partial_feature_grads.append(d_x)

    feature_grads = group.all_reduce(partial_feature_grads, op="sum")
    for other in feature_grads[1:]:
        if not np.array_equal(other, feature_grads[0]):
            raise AssertionError("feature gradients diverged across ranks")
    comm = group.stats.snapshot().delta(state.comm_before)
    return DistLossResult(
        loss=state.loss,
        per_instance_loss=state.per_instance_loss,
        feature_grads=feature_grads[0],
        weight_grads=weight_grads,
        comm=comm,
    )


def dhp_step(group, shards, feature_blocks, labels, tau,
             variant: str = "weighted_prob") -> DistLossResult:
    state = dhp_forward(group, shards, feature_blocks, labels, tau, variant)
    return dhp_backward(state, labels)


def reference_forward_backward(w_full: np.ndarray, x: np.ndarray,
                               labels: SmoothedLabelSet, tau: float,
                               variant: str = "weighted_prob"):
    """Single-address-space evaluation of the same loss and gradients.

    Returns (loss, per_instance_loss, weight_grads (D, N), feature_grads (B, D)).
    """
    code = VARIANTS[variant]
    x = np.asarray(x)
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    _validate_labels(labels, w_full.shape[1], x.shape[0])
    logits, cosines, w_hat, w_norms, x_hat, x_norms = _cosine_forward(w_full, x, tau)
    row_max = np.ascontiguousarray(logits.max(axis=1))
    pos = np.ascontiguousarray(labels.positives, np.int64)
    neg = np.ascontiguousarray(labels.negatives, np.int64)
    exp_sums, weighted = kernels.softmax_stats(
        logits, row_max, pos, neg, labels.positive_mass, labels.negative_mass, code
    )
    per_loss = per_instance_loss_from_stats(exp_sums, weighted, code)
    loss = float(np.mean(per_loss))
    ensure_finite(loss, "softmax loss")
    grad = kernels.softmax_loss_grad(
        logits, row_max, exp_sums, weighted, pos, neg,
        labels.positive_mass, labels.negative_mass, 1.0 / x.shape[0], code,
    )
    d_w, d_x = _cosine_backward(grad, cosines, w_hat, w_norms, x_hat, x_norms, tau)
    return loss, per_loss, d_w, d_x


# -- checkpointing ----------------------------------------------------------

def save_shards(dirpath, shards) -> None:
    """One LTF per rank plus plan.json; momentum buffers are not persisted."""
    os.makedirs(dirpath, exist_ok=True)
    from .ltf import write_ltf

    plan = shards[0].plan
    with open(os.path.join(dirpath, "plan.json"), "w") as fh:
        fh.write(plan.to_json())
    for shard in shards:
        write_ltf(os.path.join(dirpath, f"shard_{shard.rank}.ltf"), shard.weights)


def load_shards(dirpath) -> list[WeightShard]:
    from .ltf import read_ltf

    plan_path = os.path.join(dirpath, "plan.json")
    if not os.path.isfile(plan_path):
        raise DataError(f"{dirpath}: no plan.json, not a classifier checkpoint")
    with open(plan_path) as fh:
        raw = json.load(fh)
    plan = ShardPlan(raw["num_classes"], raw["num_workers"], tuple(raw["bounds"]))
    shards = []
    for rank in range(plan.num_workers):
        w = read_ltf(os.path.join(dirpath, f"shard_{rank}.ltf"))
        if w.shape[1] != plan.rank_size(rank):
            raise DataError(f"shard_{rank}.ltf width does not match the plan")
        shards.append(WeightShard(rank, plan, w, np.zeros_like(w)))
    return shards
