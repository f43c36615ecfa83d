import json

import numpy as np
import pytest

from shardmax.collectives import WorkerGroup


def _rank_tensors(t, rng, shape=(3, 4)):
    return [rng.standard_normal(shape) for _ in range(t)]


class TestAllGather:
    def test_single_worker_identity(self):
        g = WorkerGroup(1)
        x = np.arange(6.0).reshape(2, 3)
        (out,) = g.all_gather([x])
        assert np.array_equal(out, x)
        assert g.stats.total_bytes() == 0

    def test_rank_order(self):
        g = WorkerGroup(3)
        blocks = [np.full((1, 2), float(r)) for r in range(3)]
        outs = g.all_gather(blocks)
        for out in outs:
            assert out[:, 0].tolist() == [0.0, 1.0, 2.0]

    def test_concatenation_oracle_bit_exact(self):
        rng = np.random.default_rng(0)
        blocks = _rank_tensors(4, rng)
        g = WorkerGroup(4)
        outs = g.all_gather(blocks)
        expect = np.concatenate(blocks, axis=0)
        for out in outs:
            assert np.array_equal(out, expect)

    def test_unequal_leading_dims_allowed(self):
        g = WorkerGroup(2)
        outs = g.all_gather([np.zeros((2, 3)), np.ones((5, 3))])
        assert outs[0].shape == (7, 3)

    def test_shape_mismatch_names_rank(self):
        g = WorkerGroup(3)
        blocks = [np.zeros((2, 3)), np.zeros((2, 3)), np.zeros((2, 4))]
        with pytest.raises(ValueError, match="rank 2"):
            g.all_gather(blocks)

    def test_byte_accounting_ring(self):
        g = WorkerGroup(4)
        blocks = [np.zeros((2, 5)) for _ in range(4)]
        g.all_gather(blocks)
        payload = sum(b.nbytes for b in blocks)
        assert g.stats.bytes["all_gather"] == 3 * payload

    def test_repeated_calls_scale_linearly(self):
        g = WorkerGroup(3)
        blocks = [np.zeros((2, 2)) for _ in range(3)]
        g.all_gather(blocks)
        single = g.stats.total_bytes()
        for _ in range(4):
            g.all_gather(blocks)
        assert g.stats.total_bytes() == 5 * single


class TestAllReduce:
    def test_zero_sum(self):
        g = WorkerGroup(3)
        outs = g.all_reduce([np.zeros(4)] * 3, op="sum")
        for out in outs:
            assert np.array_equal(out, np.zeros(4))

    def test_constant_rank_sum(self):
        g = WorkerGroup(4)
        outs = g.all_reduce([np.full(3, float(r)) for r in range(4)], op="sum")
        for out in outs:
            assert np.array_equal(out, np.full(3, 6.0))

    def test_sequential_accumulation_oracle(self):
        rng = np.random.default_rng(1)
        tensors = _rank_tensors(8, rng)
        g = WorkerGroup(8)
        outs = g.all_reduce(tensors, op="sum")
        acc = tensors[0].copy()
        for t in tensors[1:]:
            acc = acc + t
        for out in outs:
            assert np.array_equal(out, acc)

    def test_max(self):
        g = WorkerGroup(3)
        tensors = [np.array([1.0, 5.0]), np.array([4.0, 2.0]), np.array([3.0, 3.0])]
        outs = g.all_reduce(tensors, op="max")
        for out in outs:
            assert out.tolist() == [4.0, 5.0]

    def test_arrival_order_is_irrelevant(self):
        rng = np.random.default_rng(2)
        tensors = _rank_tensors(5, rng)
        g = WorkerGroup(5)
        base = g.all_reduce(tensors, op="sum")[0]
        shuffled = g.all_reduce(tensors, op="sum", arrival_order=[4, 2, 0, 3, 1])[0]
        assert np.array_equal(base, shuffled)

    def test_bad_arrival_order(self):
        g = WorkerGroup(2)
        with pytest.raises(ValueError, match="permutation"):
            g.all_reduce([np.zeros(1)] * 2, arrival_order=[0, 0])

    def test_shape_mismatch(self):
        g = WorkerGroup(2)
        with pytest.raises(ValueError, match="rank 1"):
            g.all_reduce([np.zeros(2), np.zeros(3)])

    def test_unknown_op(self):
        g = WorkerGroup(2)
        with pytest.raises(ValueError, match="unknown"):
            g.all_reduce([np.zeros(1)] * 2, op="prod")

    def test_byte_accounting(self):
        g = WorkerGroup(4)
        g.all_reduce([np.zeros(10)] * 4, op="sum")
        assert g.stats.bytes["all_reduce_sum"] == 2 * 3 * 80


class TestBroadcastAndStats:
    def test_broadcast(self):
        g = WorkerGroup(3)
        outs = g.broadcast(np.arange(3.0))
        for out in outs:
            assert out.tolist() == [0.0, 1.0, 2.0]
        assert g.stats.bytes["broadcast"] == 2 * 24

    def test_outputs_are_independent_copies(self):
        g = WorkerGroup(2)
        a, b = g.all_reduce([np.zeros(2), np.ones(2)])
        a[0] = 99.0
        assert b[0] == 1.0

    def test_determinism_across_repeats(self):
        rng = np.random.default_rng(3)
        tensors = _rank_tensors(6, rng)
        first = WorkerGroup(6).all_reduce(tensors, op="sum")[0]
        second = WorkerGroup(6).all_reduce(tensors, op="sum")[0]
        assert np.array_equal(first, second)

    def test_stats_json_and_delta(self):
        g = WorkerGroup(2)
        g.all_gather([np.zeros(2)] * 2)
        before = g.stats.snapshot()
        g.all_reduce([np.zeros(2)] * 2)
        delta = g.stats.delta(before)
        assert set(delta.bytes) == {"all_reduce_sum"}
        payload = json.loads(g.stats.to_json())
        assert payload["calls"]["all_gather"] == 1
        assert payload["total_bytes"] == g.stats.total_bytes()

    def test_monotone_counters(self):
        g = WorkerGroup(3)
        seen = [0]
        for _ in range(3):
            g.all_gather([np.zeros(4)] * 3)
            assert g.stats.total_bytes() >= seen[-1]
            seen.append(g.stats.total_bytes())

    def test_group_size_validation(self):
        with pytest.raises(ValueError):
            WorkerGroup(0)
        g = WorkerGroup(2)
        with pytest.raises(ValueError, match="per-rank"):
            g.all_gather([np.zeros(2)])
