import json

import numpy as np
import pytest

from shardmax.errors import ConfigError
from shardmax.memcost import (
    GIB,
    CostScenario,
    capacity_report,
    classifier_memory,
    comm_volume,
    max_classes,
    sweep_max_classes,
)


def scenario(**kw):
    base = dict(num_classes=1_280_000, num_workers=64, embed_dim=128,
                global_batch=4096, bytes_per_scalar=4, state_multiplicity=3,
                budget_bytes=32 * GIB)
    base.update(kw)
    return CostScenario(**base)


class TestClassifierMemory:
    def test_replicated_weight_arithmetic(self):
        mem = classifier_memory(scenario(), "ddp")
        assert mem["weights_state_bytes"] == 3 * 128 * 1_280_000 * 4  # ~1.966 GB

    def test_sharded_is_exactly_one_worker_share(self):
        s = scenario()
        ddp = classifier_memory(s, "ddp")
        dhp = classifier_memory(s, "dhp")
        assert dhp["weights_state_bytes"] == ddp["weights_state_bytes"] / 64

    def test_single_worker_modes_agree(self):
        s = scenario(num_workers=1)
        assert classifier_memory(s, "ddp") == classifier_memory(s, "dhp")

    def test_activation_toggle(self):
        s = scenario(count_activations=False)
        mem = classifier_memory(s, "dhp")
        assert mem["logit_activation_bytes"] == 0
        assert mem["total_bytes"] == mem["weights_state_bytes"]

    def test_activations_equal_across_modes(self):
        s = scenario()
        a = classifier_memory(s, "ddp")["logit_activation_bytes"]
        b = classifier_memory(s, "dhp")["logit_activation_bytes"]
        assert a == b


class TestMaxClasses:
    def test_reference_anchors(self):
        s = scenario()
        ddp = max_classes(s, "ddp")
        dhp = max_classes(s, "dhp")
        assert 3.7e6 <= ddp <= 5.7e6
        assert 5.5 <= dhp / ddp <= 7.5

    def test_sharded_capacity_exactly_linear_in_workers(self):
        base = max_classes(scenario(num_workers=1), "dhp")
        for t in (2, 3, 7, 64, 128):
            assert max_classes(scenario(num_workers=t), "dhp") == t * base

    def test_doubling_workers(self):
        # with activations off, the replicated layout gains nothing from T
        s32 = scenario(num_workers=32, count_activations=False)
        s64 = scenario(num_workers=64, count_activations=False)
        assert max_classes(s64, "dhp") == 2 * max_classes(s32, "dhp")
        assert max_classes(s64, "ddp") == max_classes(s32, "ddp")

    def test_budget_below_overhead(self):
        with pytest.raises(ConfigError, match="overhead"):
            max_classes(scenario(budget_bytes=GIB), "ddp")

    def test_custom_overhead(self):
        s = scenario(count_activations=False)
        got = max_classes(s, "ddp", overhead=0)
        assert got == pytest.approx(s.budget_bytes / (3 * 128 * 4))


class TestCommVolume:
    def test_single_worker_is_free(self):
        s = scenario(num_workers=1)
        assert comm_volume(s, "ddp")["total"] == 0
        assert comm_volume(s, "dhp")["total"] == 0

    def test_shape_sharded_independent_of_classes(self):
        a = comm_volume(scenario(num_classes=10_000), "dhp")["total"]
        b = comm_volume(scenario(num_classes=10_000_000), "dhp")["total"]
        assert a == b

    def test_shape_replicated_linear_in_classes(self):
        s1 = scenario(num_classes=1_000_000, encoder_params=0)
        s2 = scenario(num_classes=2_000_000, encoder_params=0)
        assert comm_volume(s2, "ddp")["total"] == 2 * comm_volume(s1, "ddp")["total"]

    def test_sharded_breakdown_matches_live_step(self):
        # the model must mirror the collectives' measured bytes exactly
        from shardmax.collectives import WorkerGroup
        from shardmax.labels import one_hot
        from shardmax.sharding import dhp_step, make_plan, shards_from_full

        rng = np.random.default_rng(0)
        n, b, d, t = 60, 12, 16, 4
        w = rng.standard_normal((d, n))
        x = rng.standard_normal((b, d))
        shards = shards_from_full(w, make_plan(n, t))
        group = WorkerGroup(t)
        result = dhp_step(group, shards, np.array_split(x, t), one_hot(
            rng.integers(0, n, b), n), 0.15)
        model = comm_volume(CostScenario(num_classes=n, num_workers=t, embed_dim=d,
                                         global_batch=b, bytes_per_scalar=8), "dhp")
        measured = result.comm.bytes
        assert measured["all_gather"] == model["feature_gather"]
        assert measured["all_reduce_max"] == model["max_reduce"]
        assert measured["all_reduce_sum"] == model["stat_reduce"] + model["feature_grad_reduce"]
        assert sum(measured.values()) == model["total"]


class TestReportsAndSweep:
    def test_report_json_fields(self):
        report = capacity_report(scenario())
        payload = json.loads(report.to_json())
        assert payload["dhp"]["max_classes"] > payload["ddp"]["max_classes"]
        assert payload["dhp_over_ddp_max_classes"] == pytest.approx(
            payload["dhp"]["max_classes"] / payload["ddp"]["max_classes"])

    def test_text_table(self):
        text = capacity_report(scenario()).to_text()
        assert "max classes in budget" in text and "dhp" in text

    def test_sweep_csv(self):
        csv = sweep_max_classes(scenario(), [16, 32, 64])
        lines = csv.strip().splitlines()
        assert lines[0] == "budget_gib,ddp_max_classes,dhp_max_classes"
        assert len(lines) == 4
        # 16 GiB is below the replicated overhead: the cell stays empty
        assert lines[1].split(",")[1] == ""

    def test_scenario_validation(self):
        with pytest.raises(ConfigError):
            CostScenario(num_classes=0, num_workers=1)
        with pytest.raises(ConfigError):
            CostScenario(num_classes=10, num_workers=1, encoder_params=-1)
