"""One-shot saliency scores and the layer-wise ratios they induce.

Only the per-layer surviving fractions are kept: which positions survive is
discarded, and the ratios go on to random pruning like any other scheme.
"""

from __future__ import annotations

import typing as t
from logging import getLogger

import numpy as np

from randprune.alloc import round_half_up
from randprune.config import config
from randprune.engine.network import Batch, ParamState, backward, init_params
from randprune.exceptions import InfeasiblePlanError, SaliencyError
from randprune.mask import Mask, full_mask
from randprune.models import NetworkSpec
from randprune.types import FloatArray

__all__ = (
    "finite_difference_hvp",
    "hvp",
    "snip_scores",
    "grasp_scores",
    "ratios_from_scores",
    "snip_ratios",
    "grasp_ratios",
)

logger = getLogger(__name__)


def finite_difference_hvp(
    grad_fn: t.Callable[[FloatArray], FloatArray],
    w: FloatArray,
    v: FloatArray,
    rel_step: float | None = None,
) -> FloatArray:
    """Central difference [g(w + dv) - g(w - dv)] / 2d of a flat gradient
    function, with d = rel_step * (1 + |w|) / |v|."""
    v_norm = float(np.linalg.norm(v))
    if v_norm == 0.0:
        return np.zeros_like(w)
    rel_step = config.hvp_rel_step if rel_step is None else rel_step
    delta = rel_step * (1.0 + float(np.linalg.norm(w))) / v_norm
    return (grad_fn(w + delta * v) - grad_fn(w - delta * v)) / (2.0 * delta)


def _flatten(arrays: t.Sequence[FloatArray]) -> FloatArray:
    return np.concatenate([a.ravel() for a in arrays])


def _unflatten(flat: FloatArray, like: t.Sequence[FloatArray]) -> list[FloatArray]:
    out, start = [], 0
    for array in like:
        out.append(flat[start : start + array.size].reshape(array.shape))
        start += array.size
    return out


def hvp(
    params: ParamState, mask: Mask, batch: Batch, v: t.Sequence[FloatArray]
) -> list[FloatArray]:
    """Hessian of the batch loss w.r.t. the weights (biases held fixed)
    applied to ``v``, one tensor per layer."""
    w = _flatten(params.weights)

    def grad_fn(flat: FloatArray) -> FloatArray:
        shifted = params.with_weights(_unflatten(flat, params.weights))
        return backward(shifted, mask, batch).flat_weights()

    return _unflatten(finite_difference_hvp(grad_fn, w, _flatten(v)), params.weights)


def _check_batch(batch: Batch) -> None:
    if len(batch) == 0:
        raise SaliencyError("saliency scoring needs a nonempty batch")


def snip_scores(params: ParamState, batch: Batch) -> list[FloatArray]:
    """|g * w| of every prunable layer."""
    _check_batch(batch)
    mask = full_mask(params.net)
    grads = backward(params, mask, batch)
    return [
        np.abs(g * w)
        for layer, g, w in zip(params.net.layers, grads.weights, params.weights)
        if layer.prunable
    ]


def grasp_scores(params: ParamState, batch: Batch) -> list[FloatArray]:
    """-w * Hg of every prunable layer."""
    _check_batch(batch)
    mask = full_mask(params.net)
    grads = backward(params, mask, batch)
    hg = hvp(params, mask, batch, grads.weights)
    return [
        -w * h
        for layer, w, h in zip(params.net.layers, params.weights, hg)
        if layer.prunable
    ]


def ratios_from_scores(
    scores: t.Sequence[FloatArray], sparsity: float, prune_highest: bool = False
) -> list[float]:
    """Rank all weights globally and prune the S fraction at the chosen end.

    Ties keep their position order (stable sort). A layer left empty is
    floored to one weight.
    """
    if not 0.0 <= sparsity < 1.0:
        raise InfeasiblePlanError(f"global sparsity must lie in [0, 1), got {sparsity}")
    flat = _flatten(scores)
    pruned = round_half_up(sparsity * flat.size)
    order = np.argsort(-flat if prune_highest else flat, kind="stable")
    keep = np.ones(flat.size, dtype=bool)
    keep[order[:pruned]] = False

    densities, start = [], 0
    for layer_scores in scores:
        kept = int(np.count_nonzero(keep[start : start + layer_scores.size]))
        densities.append(max(kept, 1) / layer_scores.size)
        start += layer_scores.size
    return densities


def snip_ratios(
    net: NetworkSpec, seed: int, batch: Batch, sparsity: float
) -> list[float]:
    scores = snip_scores(init_params(net, seed), batch)
    densities = ratios_from_scores(scores, sparsity)
    logger.info("snip ratios at S=%.3f: %s", sparsity, np.round(densities, 4).tolist())
    return densities


def grasp_ratios(
    net: NetworkSpec,
    seed: int,
    batch: Batch,
    sparsity: float,
    prune_highest: bool = True,
) -> list[float]:
    scores = grasp_scores(init_params(net, seed), batch)
    densities = ratios_from_scores(scores, sparsity, prune_highest)
    logger.info("grasp ratios at S=%.3f: %s", sparsity, np.round(densities, 4).tolist())
    return densities
