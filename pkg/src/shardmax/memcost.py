"""Analytic per-worker memory and per-step communication model.

Two training layouts are compared:

    ddp   every worker replicates the full classifier (weights, momentum,
          gradient) and computes logits for its slice of the batch
    dhp   the classifier is column-sharded; every worker stores 1/T of the
          weight state but computes logits for the whole batch against its
          local columns

Communication volumes use the same ring accounting as the collectives
module, so a live simulated step must match `comm_volume` byte for byte.

The fixed per-worker overhead (backbone, buffers, allocator slack) is a
single calibrated constant per layout. Defaults are calibrated so the
reference scenario (64 workers, 32 GiB each, global batch 4096, dim 128,
fp32, weights+momentum+gradient) tops out near 4.7M classes replicated and
30M classes sharded.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .errors import ConfigError

GIB = 1 << 30

MODES = ("ddp", "dhp")

_REF_BUDGET = 32 * GIB
_REF_SCALAR = 4
_REF_MULT = 3
_REF_DIM = 128
_REF_BATCH = 4096
_REF_WORKERS = 64
_REF_DDP_MAX = 4.7e6
_REF_DHP_MAX = 30e6

# bytes per class per worker in the reference scenario
_DDP_PER_CLASS = _REF_MULT * _REF_DIM * _REF_SCALAR + 2 * (_REF_BATCH // _REF_WORKERS) * _REF_SCALAR
_DHP_PER_CLASS = (_REF_MULT * _REF_DIM * _REF_SCALAR + 2 * _REF_BATCH * _REF_SCALAR) / _REF_WORKERS

DDP_FIXED_OVERHEAD = int(_REF_BUDGET - _DDP_PER_CLASS * _REF_DDP_MAX)
DHP_FIXED_OVERHEAD = int(_REF_BUDGET - _DHP_PER_CLASS * _REF_DHP_MAX)


@dataclass(frozen=True)
class CostScenario:
    num_classes: int
    num_workers: int
    embed_dim: int = 128
    global_batch: int = 4096
    bytes_per_scalar: int = 4
    state_multiplicity: int = 3      # weights + momentum + gradient
    count_activations: bool = True
    budget_bytes: int = 32 * GIB
    encoder_params: int = 0          # parameter count of the replicated encoder

    def __post_init__(self):
        for name in ("num_classes", "num_workers", "embed_dim", "global_batch",
                     "bytes_per_scalar", "state_multiplicity", "budget_bytes"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"scenario field {name} must be positive")
        if self.encoder_params < 0:
            raise ConfigError("encoder_params must be >= 0")

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True)


def _check_mode(mode: str):
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}")


def classifier_memory(s: CostScenario, mode: str) -> dict:
    """Per-worker classifier bytes: weight state plus (optionally) the
    forward+backward logit activations.

    The sharded weight state is literally the replicated figure divided by
    the worker count, so that ratio is exact. Logit activations are the same
    in both layouts: replicated workers score (B/T) rows against N columns,
    sharded workers score B rows against N/T columns.
    """
    _check_mode(mode)
    bpp = s.bytes_per_scalar
    replicated_weights = float(s.state_multiplicity * s.embed_dim * s.num_classes * bpp)
    weights = replicated_weights if mode == "ddp" else replicated_weights / s.num_workers
    activations = 2.0 * s.global_batch * s.num_classes * bpp / s.num_workers
    if not s.count_activations:
        activations = 0.0
    return {
        "weights_state_bytes": weights,
        "logit_activation_bytes": activations,
        "total_bytes": weights + activations,
    }


def _per_class_cost(s: CostScenario, mode: str) -> float:
    """ddp: bytes per global class per worker (activation share depends on T);
    dhp: bytes per *local* class (T-independent, capacity scales by T)."""
    bpp = s.bytes_per_scalar
    per = s.state_multiplicity * s.embed_dim * bpp
    if s.count_activations:
        if mode == "ddp":
            per += 2 * (s.global_batch / s.num_workers) * bpp
        else:
            per += 2 * s.global_batch * bpp
    return per


def fixed_overhead(mode: str) -> int:
    _check_mode(mode)
    return DDP_FIXED_OVERHEAD if mode == "ddp" else DHP_FIXED_OVERHEAD


def max_classes(s: CostScenario, mode: str, overhead: int | None = None) -> float:
    """Largest class count fitting the per-worker budget (model-level real
    number; round down for a deployable integer).

    Sharded capacity is computed as per-worker capacity times worker count,
    so max_classes(kT) == k * max_classes(T) holds exactly.
    """
    _check_mode(mode)
    oh = fixed_overhead(mode) if overhead is None else overhead
    free = s.budget_bytes - oh
    if free <= 0:
        raise ConfigError(
            f"budget {s.budget_bytes} does not cover the fixed overhead {oh}"
        )
    per_class = _per_class_cost(s, mode)
    if mode == "ddp":
        return free / per_class
    return (free / per_class) * s.num_workers


def comm_volume(s: CostScenario, mode: str) -> dict:
    """Total collective bytes moved per training step (ring accounting,
    summed over all workers)."""
    _check_mode(mode)
    t = s.num_workers
    bpp = s.bytes_per_scalar
    b = s.global_batch
    d = s.embed_dim
    if mode == "dhp":
        parts = {
            "feature_gather": (t - 1) * b * d * bpp,
            "max_reduce": 2 * (t - 1) * b * bpp,
            "stat_reduce": 2 * (t - 1) * 2 * b * bpp,
            "feature_grad_reduce": 2 * (t - 1) * b * d * bpp,
        }
    else:
        parts = {
            "encoder_grad_reduce": 2 * (t - 1) * s.encoder_params * bpp,
            "classifier_grad_reduce": 2 * (t - 1) * d * s.num_classes * bpp,
        }
    parts = {k: int(v) for k, v in parts.items()}
    parts["total"] = sum(parts.values())
    return parts


@dataclass
class CostReport:
    scenario: CostScenario
    ddp_memory: dict
    dhp_memory: dict
    ddp_max_classes: float
    dhp_max_classes: float
    ddp_comm: dict
    dhp_comm: dict

    def to_json(self) -> str:
        return json.dumps(
            {
                "scenario": json.loads(self.scenario.to_json()),
                "ddp": {"memory": self.ddp_memory, "max_classes": self.ddp_max_classes,
                        "comm_per_step": self.ddp_comm},
                "dhp": {"memory": self.dhp_memory, "max_classes": self.dhp_max_classes,
                        "comm_per_step": self.dhp_comm},
                "dhp_over_ddp_max_classes": self.dhp_max_classes / self.ddp_max_classes,
            },
            indent=2,
            sort_keys=True,
        )

    def to_text(self) -> str:
        rows = [
            ("classifier memory / worker", f"{self.ddp_memory['total_bytes'] / GIB:.3f} GiB",
             f"{self.dhp_memory['total_bytes'] / GIB:.3f} GiB"),
            ("max classes in budget", f"{self.ddp_max_classes:,.0f}",
             f"{self.dhp_max_classes:,.0f}"),
            ("comm bytes / step", f"{self.ddp_comm['total']:,}", f"{self.dhp_comm['total']:,}"),
        ]
        width = max(len(r[0]) for r in rows)
        lines = [f"{'':<{width}}  {'ddp':>18}  {'dhp':>18}"]
        lines += [f"{name:<{width}}  {a:>18}  {b:>18}" for name, a, b in rows]
        return "\n".join(lines) + "\n"


def capacity_report(s: CostScenario) -> CostReport:
    return CostReport(
        scenario=s,
        ddp_memory=classifier_memory(s, "ddp"),
        dhp_memory=classifier_memory(s, "dhp"),
        ddp_max_classes=max_classes(s, "ddp"),
        dhp_max_classes=max_classes(s, "dhp"),
        ddp_comm=comm_volume(s, "ddp"),
        dhp_comm=comm_volume(s, "dhp"),
    )


def sweep_max_classes(s: CostScenario, budgets_gib) -> str:
    """CSV of budget vs supported classes for both layouts."""
    lines = ["budget_gib,ddp_max_classes,dhp_max_classes"]
    for gib in budgets_gib:
        scen = CostScenario(**{**s.__dict__, "budget_bytes": int(gib * GIB)})
        try:
            ddp = f"{max_classes(scen, 'ddp'):.0f}"
        except ConfigError:
            ddp = ""
        try:
            dhp = f"{max_classes(scen, 'dhp'):.0f}"
        except ConfigError:
            dhp = ""
        lines.append(f"{gib},{ddp},{dhp}")
    return "\n".join(lines) + "\n"
