"""Simulated multi-worker collectives with byte accounting.

Workers live in one process; a collective takes the per-rank inputs as a
list indexed by rank and returns the per-rank outputs. Reductions always
combine contributions in rank-ascending order, so results are
bit-reproducible regardless of the (simulated) arrival order.

Byte accounting follows ring-algorithm volumes:
    all_gather  (T-1) * sum of per-rank payload bytes
    all_reduce  2 * (T-1) * payload bytes
    broadcast   (T-1) * payload bytes
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


@dataclass
class CommStats:
    calls: dict = field(default_factory=dict)
    bytes: dict = field(default_factory=dict)

    def record(self, kind: str, nbytes: int):
        self.calls[kind] = self.calls.get(kind, 0) + 1
        self.bytes[kind] = self.bytes.get(kind, 0) + int(nbytes)

    def total_bytes(self) -> int:
        return sum(self.bytes.values())

    def snapshot(self) -> "CommStats":
        return CommStats(dict(self.calls), dict(self.bytes))

    def delta(self, earlier: "CommStats") -> "CommStats":
        calls = {k: v - earlier.calls.get(k, 0) for k, v in self.calls.items()}
        bytes_ = {k: v - earlier.bytes.get(k, 0) for k, v in self.bytes.items()}
        return CommStats({k: v for k, v in calls.items() if v},
                         {k: v for k, v in bytes_.items() if v})

    def to_json(self) -> str:
        return json.dumps(
            {"calls": self.calls, "bytes": self.bytes, "total_bytes": self.total_bytes()},
            sort_keys=True,
        )


class WorkerGroup:
    """T simulated workers sharing deterministic collectives."""

    def __init__(self, size: int):
        if size < 1:
            raise ValueError("worker group needs at least one worker")
        self.size = size
        self.stats = CommStats()

    def _check_count(self, tensors):
        if len(tensors) != self.size:
            raise ValueError(f"expected {self.size} per-rank tensors, got {len(tensors)}")

    def all_gather(self, tensors) -> list[np.ndarray]:
        """Rank-ordered concatenation along axis 0, delivered to every rank."""
        self._check_count(tensors)
        tensors = [np.asarray(t) for t in tensors]
        trailing = tensors[0].shape[1:]
        for rank, t in enumerate(tensors):
            if t.shape[1:] != trailing:
                raise ValueError(
                    f"all_gather shape mismatch: rank 0 has trailing dims {trailing}, "
                    f"rank {rank} has {t.shape[1:]}"
                )
        gathered = np.concatenate(tensors, axis=0)
        payload = sum(t.nbytes for t in tensors)
        self.stats.record("all_gather", (self.size - 1) * payload)
        return [gathered] + [gathered.copy() for _ in range(self.size - 1)]

    def all_reduce(self, tensors, op: str = "sum", arrival_order=None) -> list[np.ndarray]:
        """Elementwise reduction, identical on every rank.

        SUM accumulates in rank-ascending order (bit-reproducible); MAX is
        exact. `arrival_order` simulates out-of-order delivery and is
        deliberately ignored beyond validation: contributions are re-sorted
        by rank before reducing.
        """
        self._check_count(tensors)
        tensors = [np.asarray(t) for t in tensors]
        shape = tensors[0].shape
        for rank, t in enumerate(tensors):
            if t.shape != shape:
                raise ValueError(
                    f"all_reduce shape mismatch: rank 0 has {shape}, rank {rank} has {t.shape}"
                )
        if arrival_order is not None:
            if sorted(arrival_order) != list(range(self.size)):
                raise ValueError("arrival_order must be a permutation of ranks")
        if op == "sum":
            acc = tensors[0].copy()
            for t in tensors[1:]:
                acc = acc + t
        elif op == "max":
            acc = tensors[0].copy()
            for t in tensors[1:]:
                acc = np.maximum(acc, t)
        else:
            raise ValueError(f"unknown reduction op {op!r}")
        self.stats.record(f"all_reduce_{op}", 2 * (self.size - 1) * tensors[0].nbytes)
        return [acc] + [acc.copy() for _ in range(self.size - 1)]

    def broadcast(self, tensor, root: int = 0) -> list[np.ndarray]:
        if not 0 <= root < self.size:
            raise ValueError(f"root {root} outside [0, {self.size})")
        t = np.asarray(tensor)
        self.stats.record("broadcast", (self.size - 1) * t.nbytes)
        return [t.copy() for _ in range(self.size)]
