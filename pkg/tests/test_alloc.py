import math

import numpy as np
import pytest
from scipy.optimize import bisect

from randprune.alloc import (
    load_plan,
    load_ratios,
    plan_er,
    plan_erk,
    plan_erk_last,
    plan_erk_plus,
    plan_for,
    plan_from_ratios,
    plan_uniform,
    plan_uniform_plus,
    round_half_up,
    save_plan,
)
from randprune.arch import conv_network, mlp_network, param_count, parse_network
from randprune.exceptions import InfeasiblePlanError, PlanMismatchError

SPARSITIES = (0.3, 0.5, 0.7, 0.9, 0.95)


def random_nets(count, seed=0, mlp_only=False):
    rng = np.random.default_rng(seed)
    nets = []
    for _ in range(count):
        depth = int(rng.integers(1, 8))  # 2 to 8 layers with the classifier
        width = int(rng.integers(8, 65))
        if mlp_only or rng.random() < 0.5:
            features = int(rng.integers(16, 65))
            nets.append(mlp_network((features, 1, 1), 10, width, depth))
        else:
            channels = int(rng.integers(1, 4))
            nets.append(conv_network((channels, 8, 8), 10, width, depth))
    return nets


def erk_raw(layer):
    shape = layer.weight_shape
    return sum(shape) / math.prod(shape)


def excess(scale, raw, counts, budget):
    return sum(min(1.0, scale * r) * p for r, p in zip(raw, counts)) - budget


def test_round_half_up():
    assert [round_half_up(x) for x in (0.5, 1.5, 2.5, 3.6, 16.72)] == [1, 2, 3, 4, 17]


def test_uniform(small_net):
    plan = plan_uniform(small_net, 0.5)
    assert plan.densities == [0.5, 0.5]
    assert plan.retained_counts == [18, 20]
    assert plan.method == "uniform"


def test_uniform_dense(small_net):
    assert plan_uniform(small_net, 0.0).densities == [1.0, 1.0]


def test_uniform_rounding_floor(small_net):
    # 36 * 0.1 = 3.6 rounds to 4
    assert plan_uniform(small_net, 0.9).retained_counts == [4, 4]


@pytest.mark.parametrize("sparsity", [-0.1, 1.0, 1.5])
def test_sparsity_domain(small_net, sparsity):
    with pytest.raises(InfeasiblePlanError):
        plan_uniform(small_net, sparsity)


def test_uniform_plus_infeasible(small_net):
    # dense conv (36) plus a 20% floor on the fc (8) exceeds 38
    with pytest.raises(InfeasiblePlanError, match="fc2"):
        plan_uniform_plus(small_net, 0.5)


def test_uniform_plus_three_layers(three_layer_net):
    plan = plan_uniform_plus(three_layer_net, 0.5)
    assert plan.densities == pytest.approx([1.0, 0.44, 0.2])
    assert plan.retained_counts == [36, 44, 8]
    assert plan.total_retained == plan.budget == 88


def test_uniform_plus_dense(small_net, three_layer_net):
    assert plan_uniform_plus(small_net, 0.0).densities == pytest.approx([1.0, 1.0])
    assert plan_uniform_plus(three_layer_net, 0.0).densities == pytest.approx(
        [1.0, 1.0, 1.0]
    )


def test_uniform_plus_first_conv_too_large():
    net = parse_network("input 1 4 4\nclasses 2\nconv 1->8 k3 pos4\nfc 32->2\n")
    # conv has 72 of 136 weights, the budget at S=0.5 is 68
    with pytest.raises(InfeasiblePlanError, match="conv1"):
        plan_uniform_plus(net, 0.5)


def test_er_on_mlp():
    net = parse_network("input 4 1 1\nclasses 10\nfc 4->10\nfc 10->10\n")
    plan = plan_er(net, 0.5)
    # raw 0.35 and 0.2, scale 70 / 34
    assert plan.scale == pytest.approx(70 / 34)
    assert plan.densities == pytest.approx([0.7206, 0.4118], abs=1e-4)


def test_er_single_layer():
    net = parse_network("input 5 1 1\nclasses 5\nfc 5->5\n")
    assert plan_er(net, 0.3).densities == pytest.approx([0.7])


def test_erk_one_pass(small_net):
    plan = plan_erk(small_net, 0.5)
    assert plan.scale == pytest.approx(38 / 25)
    assert plan.densities == pytest.approx([0.4644, 0.5320], abs=1e-4)
    assert plan.retained_counts == [17, 21]
    assert plan.total_retained == 38


def test_erk_capped(small_net):
    plan = plan_erk(small_net, 0.05)
    # fc overflows on the first pass and is capped dense
    assert plan.densities[1] == 1.0
    assert plan.scale == pytest.approx(32.2 / 11)
    assert plan.densities[0] == pytest.approx(0.8944, abs=1e-4)
    assert plan.retained_counts == [32, 40]


def test_erk_dense(three_layer_net):
    plan = plan_erk(three_layer_net, 0.0)
    assert plan.densities == pytest.approx([1.0, 1.0, 1.0])
    assert plan.retained_counts == plan.param_counts


def test_erk_budget_too_small():
    net = parse_network("input 2 1 1\nclasses 2\nfc 2->2\nfc 2->2\n")
    # 8 weights at S=0.9 leave 0.8, not one per layer
    with pytest.raises(InfeasiblePlanError):
        plan_erk(net, 0.9)


def test_erk_plus(small_net):
    plan = plan_erk_plus(small_net, 0.4)
    assert plan.method == "erk_plus"
    assert plan.densities == pytest.approx([5.6 / 36, 1.0])
    assert plan.retained_counts == [6, 40]


def test_erk_plus_infeasible(small_net):
    with pytest.raises(InfeasiblePlanError, match="fc2"):
        plan_erk_plus(small_net, 0.5)


def test_erk_plus_equals_erk_when_last_dense(small_net):
    erk, plus = plan_erk(small_net, 0.05), plan_erk_plus(small_net, 0.05)
    assert erk.densities[1] == 1.0
    assert plus.densities == pytest.approx(erk.densities)
    assert plus.retained_counts == erk.retained_counts


def test_erk_last(small_net):
    plan = plan_erk_last(small_net, 0.4, 0.5)
    assert plan.method == "erk_last"
    assert plan.densities[1] == 0.5
    assert plan.total_retained == pytest.approx(plan.budget, abs=2)


def test_erk_last_density_range(small_net):
    with pytest.raises(InfeasiblePlanError):
        plan_erk_last(small_net, 0.4, 0.0)


def test_erk_power(three_layer_net):
    flat = plan_erk(three_layer_net, 0.5, power=0.0)
    # power 0 makes every raw score 1, i.e. uniform
    assert flat.densities == pytest.approx([0.5, 0.5, 0.5])


@pytest.mark.parametrize("power", [math.inf, math.nan, -1.0, 1e6])
def test_erk_power_domain(small_net, power):
    with pytest.raises(InfeasiblePlanError, match="power"):
        plan_erk(small_net, 0.5, power=power)


def test_from_ratios(small_net):
    plan = plan_from_ratios(small_net, [0.4644, 0.5320])
    assert plan.method == "external"
    assert plan.global_sparsity == pytest.approx(0.5, abs=1e-3)
    assert plan_from_ratios(small_net, [1.0, 1.0]).global_sparsity == 0.0


@pytest.mark.parametrize("ratios", [[0.5], [0.5, 0.5, 0.5], [0.0, 0.5], [0.5, 1.2]])
def test_from_ratios_rejects(small_net, ratios):
    with pytest.raises(PlanMismatchError):
        plan_from_ratios(small_net, ratios)


def test_plan_for_dispatch(small_net):
    assert plan_for("dense", small_net, 0.7).densities == [1.0, 1.0]
    assert plan_for("erk", small_net, 0.5) == plan_erk(small_net, 0.5)
    with pytest.raises(PlanMismatchError):
        plan_for("snip", small_net, 0.5)


def test_plan_file_round_trip(tmp_path, small_net):
    plan = plan_erk(small_net, 0.5)
    save_plan(plan, tmp_path / "plan.json")
    assert load_plan(tmp_path / "plan.json") == plan
    assert load_ratios(tmp_path / "plan.json", small_net) == plan.densities


def test_ratios_for_other_network(tmp_path, small_net, three_layer_net):
    save_plan(plan_erk(three_layer_net, 0.5), tmp_path / "plan.json")
    with pytest.raises(PlanMismatchError, match="do not match"):
        load_ratios(tmp_path / "plan.json", small_net)


def test_unreadable_plan(tmp_path):
    (tmp_path / "plan.json").write_text("{}")
    with pytest.raises(PlanMismatchError):
        load_plan(tmp_path / "plan.json")
    with pytest.raises(PlanMismatchError):
        load_plan(tmp_path / "missing.json")


def test_erk_scale_matches_bisection():
    for net in random_nets(50):
        layers = net.prunable_layers
        raw = [erk_raw(layer) for layer in layers]
        counts = [layer.param_count for layer in layers]
        for sparsity in SPARSITIES:
            budget = (1 - sparsity) * sum(counts)
            plan = plan_erk(net, sparsity)

            upper = max(1 / r for r in raw)
            root = bisect(
                excess, 0.0, upper, args=(raw, counts, budget), xtol=1e-14, rtol=1e-14
            )
            assert plan.scale == pytest.approx(root, rel=1e-9)


def test_budget_conservation():
    schemes = (plan_uniform, plan_uniform_plus, plan_er, plan_erk, plan_erk_plus)
    for net in random_nets(50, seed=1):
        layers = len(net.prunable_layers)
        for sparsity in SPARSITIES:
            budget = round_half_up((1 - sparsity) * param_count(net))
            for scheme in schemes:
                try:
                    plan = scheme(net, sparsity)
                except InfeasiblePlanError:
                    continue
                assert abs(plan.total_retained - budget) <= layers, scheme.__name__
                assert all(0 < d <= 1 for d in plan.densities)
                assert all(
                    1 <= k <= p for k, p in zip(plan.retained_counts, plan.param_counts)
                )


def test_erk_plus_parity():
    for net in random_nets(50, seed=2):
        layers = net.prunable_layers
        last = layers[-1].param_count
        for sparsity in SPARSITIES:
            budget = (1 - sparsity) * param_count(net)
            erk = plan_erk(net, sparsity)
            if last + len(layers) - 1 > budget:
                with pytest.raises(InfeasiblePlanError):
                    plan_erk_plus(net, sparsity)
                continue
            plus = plan_erk_plus(net, sparsity)
            assert plus.densities[-1] == 1.0
            assert abs(plus.total_retained - erk.total_retained) <= len(layers)


def test_er_equals_erk_on_mlps():
    for net in random_nets(20, seed=3, mlp_only=True):
        for sparsity in SPARSITIES:
            assert plan_er(net, sparsity).densities == plan_erk(net, sparsity).densities


def test_monotone_in_sparsity():
    for net in random_nets(20, seed=4):
        for scheme in (plan_uniform, plan_er, plan_erk):
            plans = [scheme(net, s) for s in (0.0,) + SPARSITIES]
            for lower, higher in zip(plans, plans[1:]):
                for a, b in zip(lower.densities, higher.densities):
                    assert b <= a + 1e-12
