"""Layer-wise sparsity ratios fixed before training.

Every scheme turns (network, global sparsity S) into per-layer densities
d^l = 1 - s^l whose weighted sum matches the budget (1 - S) * P, P being the
number of prunable weights. Retained counts round half up and never drop
below one weight per layer, so the realized budget is exact up to one weight
per layer.
"""

from __future__ import annotations

import math
import typing as t
from logging import getLogger
from pathlib import Path

from pydantic import ValidationError

from randprune.config import config
from randprune.exceptions import InfeasiblePlanError, PlanMismatchError
from randprune.models import LayerAllocation, LayerSpec, NetworkSpec, SparsityPlan
from randprune.models.plan import PlanMethod

__all__ = (
    "round_half_up",
    "solve_capped_scale",
    "plan_uniform",
    "plan_uniform_plus",
    "plan_er",
    "plan_erk",
    "plan_erk_plus",
    "plan_erk_last",
    "plan_from_ratios",
    "plan_for",
    "save_plan",
    "load_plan",
    "load_ratios",
)

logger = getLogger(__name__)

UNIFORM_PLUS_LAST_FLOOR = 0.2


def round_half_up(x: float) -> int:
    return math.floor(x + 0.5)


def _check_sparsity(sparsity: float) -> None:
    if not 0.0 <= sparsity < 1.0:
        raise InfeasiblePlanError(
            f"global sparsity must lie in [0, 1), got {sparsity}"
        )


def _budget(net: NetworkSpec, sparsity: float) -> float:
    _check_sparsity(sparsity)
    layers = net.prunable_layers
    budget = (1.0 - sparsity) * sum(layer.param_count for layer in layers)
    if budget < config.min_retained_per_layer * len(layers):
        raise InfeasiblePlanError(
            f"budget of {budget:.1f} weights cannot keep one weight in each of"
            f" {len(layers)} prunable layers"
        )
    return budget


def _build_plan(
    method: PlanMethod,
    net: NetworkSpec,
    sparsity: float,
    densities: t.Sequence[float],
    scale: float | None = None,
) -> SparsityPlan:
    allocations = []
    for layer, density in zip(net.prunable_layers, densities, strict=True):
        total = layer.param_count
        retained = round_half_up(density * total)
        retained = min(total, max(config.min_retained_per_layer, retained))
        allocations.append(
            LayerAllocation(
                name=layer.name, density=density, retained=retained, total=total
            )
        )
    plan = SparsityPlan(
        method=method,
        global_sparsity=sparsity,
        layers=tuple(allocations),
        scale=scale,
    )
    logger.debug(
        "%s plan at S=%.3f retains %d/%d weights",
        method,
        sparsity,
        plan.total_retained,
        plan.total_params,
    )
    return plan


def plan_uniform(net: NetworkSpec, sparsity: float) -> SparsityPlan:
    _budget(net, sparsity)
    densities = [1.0 - sparsity] * len(net.prunable_layers)
    return _build_plan("uniform", net, sparsity, densities)


def _first_conv(net: NetworkSpec) -> LayerSpec | None:
    first = net.layers[0]
    return first if first.kind == "conv" and first.prunable else None


def _last_fc(net: NetworkSpec) -> LayerSpec | None:
    last = net.layers[-1]
    return last if last.kind == "fc" and last.prunable else None


def plan_uniform_plus(net: NetworkSpec, sparsity: float) -> SparsityPlan:
    """First conv layer dense, last fc layer at a 20% floor, every other layer
    sharing one density. Once the middle layers are dense, leftover budget
    lifts the last layer above its floor."""
    budget = _budget(net, sparsity)
    first, last = _first_conv(net), _last_fc(net)
    first_p = first.param_count if first else 0
    last_p = last.param_count if last else 0
    middle = [
        layer
        for layer in net.prunable_layers
        if layer is not first and layer is not last
    ]
    middle_p = sum(layer.param_count for layer in middle)

    if first is not None and first_p > budget:
        raise InfeasiblePlanError(
            f"layer '{first.name}': kept dense it needs {first_p} weights,"
            f" budget is {budget:.1f}"
        )
    remaining = budget - first_p - UNIFORM_PLUS_LAST_FLOOR * last_p
    if last is not None and remaining < 0:
        needed = first_p + UNIFORM_PLUS_LAST_FLOOR * last_p
        raise InfeasiblePlanError(
            f"layer '{last.name}': its 20% floor plus {first_p} forced-dense"
            f" weights need {needed:.1f}, budget is {budget:.1f}"
        )

    middle_density = min(1.0, remaining / middle_p) if middle_p else 0.0
    if middle and middle_density <= 0.0:
        raise InfeasiblePlanError(
            f"layer '{middle[0].name}': no budget left for the middle layers"
        )
    surplus = remaining - middle_density * middle_p
    last_density = 0.0
    if last is not None:
        last_density = min(1.0, UNIFORM_PLUS_LAST_FLOOR + surplus / last_p)

    densities = []
    for layer in net.prunable_layers:
        if layer is first:
            densities.append(1.0)
        elif layer is last:
            densities.append(last_density)
        else:
            densities.append(middle_density)
    return _build_plan("uniform_plus", net, sparsity, densities)


def solve_capped_scale(
    raw: t.Sequence[float],
    counts: t.Sequence[int],
    budget: float,
    fixed: t.Mapping[int, float] | None = None,
) -> tuple[float, frozenset[int]]:
    """Find the scale epsilon with sum_l min(1, epsilon * raw^l) * p^l = budget.

    Layers in ``fixed`` keep the given density. Layers whose scaled density
    would exceed 1 are capped dense and the scale is re-solved on the rest,
    until no layer overflows. Returns epsilon and the indices capped on the
    way. When every free layer ends up capped, epsilon is the smallest value
    keeping them all dense.
    """
    fixed = dict(fixed or {})
    capped: set[int] = set()
    while True:
        free = [i for i in range(len(raw)) if i not in capped and i not in fixed]
        if not free:
            scale = max((1.0 / raw[i] for i in capped), default=0.0)
            return scale, frozenset(capped)
        spent = sum(
            (fixed[i] if i in fixed else 1.0) * counts[i]
            for i in sorted(capped | fixed.keys())
        )
        divisor = sum(raw[i] * counts[i] for i in free)
        scale = (budget - spent) / divisor
        overflow = {i for i in free if scale * raw[i] > 1.0}
        if not overflow:
            return scale, frozenset(capped)
        capped |= overflow


def _er_raw(layer: LayerSpec) -> float:
    n_in, n_out = layer.fan_in_channels, layer.fan_out_channels
    return (n_in + n_out) / (n_in * n_out)


def _erk_raw(layer: LayerSpec) -> float:
    # fc weights have no kernel axes, so this is exactly ER for them
    shape = layer.weight_shape
    return sum(shape) / math.prod(shape)


def _erk_scores(net: NetworkSpec, power: float) -> list[float]:
    if not math.isfinite(power) or power < 0.0:
        raise InfeasiblePlanError(f"ERK power must be finite and >= 0, got {power}")
    try:
        raw = [_erk_raw(layer) ** power for layer in net.prunable_layers]
    except OverflowError:
        raw = [math.inf]
    if not all(0.0 < score < math.inf for score in raw):
        raise InfeasiblePlanError(f"ERK power {power} under- or overflows the scores")
    return raw


def _scaled_plan(
    method: PlanMethod,
    net: NetworkSpec,
    sparsity: float,
    raw: list[float],
    fixed: dict[int, float] | None = None,
) -> SparsityPlan:
    budget = _budget(net, sparsity)
    counts = [layer.param_count for layer in net.prunable_layers]
    fixed = fixed or {}
    scale, capped = solve_capped_scale(raw, counts, budget, fixed)
    if scale <= 0.0:
        raise InfeasiblePlanError(
            f"no budget left for the layers outside {sorted(fixed)}"
        )
    densities = [
        fixed[i] if i in fixed else 1.0 if i in capped else scale * raw[i]
        for i in range(len(raw))
    ]
    return _build_plan(method, net, sparsity, densities, scale)


def plan_er(net: NetworkSpec, sparsity: float) -> SparsityPlan:
    raw = [_er_raw(layer) for layer in net.prunable_layers]
    return _scaled_plan("er", net, sparsity, raw)


def plan_erk(net: NetworkSpec, sparsity: float, power: float = 1.0) -> SparsityPlan:
    raw = _erk_scores(net, power)
    return _scaled_plan("erk", net, sparsity, raw)


def plan_erk_last(
    net: NetworkSpec, sparsity: float, last_density: float, power: float = 1.0
) -> SparsityPlan:
    """ERK with the last fc layer pinned at ``last_density`` under the same
    global budget."""
    if not 0.0 < last_density <= 1.0:
        raise InfeasiblePlanError(
            f"last-layer density must lie in (0, 1], got {last_density}"
        )
    last = _last_fc(net)
    if last is None:
        raise InfeasiblePlanError("last layer is not a prunable fc layer")
    budget = _budget(net, sparsity)
    pinned = last_density * last.param_count
    others = len(net.prunable_layers) - 1
    if pinned + config.min_retained_per_layer * others > budget:
        raise InfeasiblePlanError(
            f"layer '{last.name}': pinning it at density {last_density} needs"
            f" {pinned:.1f} of a {budget:.1f}-weight budget"
        )
    raw = _erk_scores(net, power)
    method: PlanMethod = "erk_plus" if last_density == 1.0 else "erk_last"
    return _scaled_plan(method, net, sparsity, raw, {len(raw) - 1: last_density})


def plan_erk_plus(
    net: NetworkSpec, sparsity: float, power: float = 1.0
) -> SparsityPlan:
    if _last_fc(net) is None:
        # A non-prunable classifier is already dense
        return plan_erk(net, sparsity, power).model_copy(update={"method": "erk_plus"})
    return plan_erk_last(net, sparsity, 1.0, power)


def plan_from_ratios(net: NetworkSpec, ratios: t.Sequence[float]) -> SparsityPlan:
    layers = net.prunable_layers
    if len(ratios) != len(layers):
        raise PlanMismatchError(
            f"got {len(ratios)} densities for {len(layers)} prunable layers"
        )
    for layer, density in zip(layers, ratios):
        if not 0.0 < density <= 1.0:
            raise PlanMismatchError(
                f"layer '{layer.name}': density {density} outside (0, 1]"
            )
    total = sum(layer.param_count for layer in layers)
    kept = sum(d * layer.param_count for d, layer in zip(ratios, layers))
    sparsity = max(0.0, 1.0 - kept / total) if total else 0.0
    return _build_plan("external", net, sparsity, list(ratios))


def plan_for(
    method: str,
    net: NetworkSpec,
    sparsity: float,
    *,
    last_density: float = 1.0,
    power: float = 1.0,
) -> SparsityPlan:
    """Dispatch the pre-defined schemes by name; ``dense`` is uniform at S=0."""
    match method:
        case "dense":
            return plan_uniform(net, 0.0)
        case "uniform":
            return plan_uniform(net, sparsity)
        case "uniform_plus":
            return plan_uniform_plus(net, sparsity)
        case "er":
            return plan_er(net, sparsity)
        case "erk":
            return plan_erk(net, sparsity, power)
        case "erk_plus":
            return plan_erk_plus(net, sparsity, power)
        case "erk_last":
            return plan_erk_last(net, sparsity, last_density, power)
    raise PlanMismatchError(f"{method!r} is not a pre-defined ratio scheme")


def save_plan(plan: SparsityPlan, path: Path) -> None:
    path.write_text(plan.model_dump_json(indent=2) + "\n", encoding="utf-8")


def load_plan(path: Path) -> SparsityPlan:
    try:
        return SparsityPlan.model_validate_json(path.read_text(encoding="utf-8"))
    except OSError as err:
        raise PlanMismatchError(f"cannot read plan {path}: {err}") from None
    except ValidationError as err:
        raise PlanMismatchError(f"{path}: {err.errors()[0]['msg']}") from None


def load_ratios(path: Path, net: NetworkSpec) -> list[float]:
    """Densities of a plan document, checked against ``net``'s layer names."""
    plan = load_plan(path)
    expected = [layer.name for layer in net.prunable_layers]
    if plan.layer_names != expected:
        raise PlanMismatchError(
            f"{path}: layers {plan.layer_names} do not match network {expected}"
        )
    return plan.densities
