from __future__ import annotations

from bisect import bisect_right
from dataclasses import replace

import numpy as np

from randprune.engine.network import Gradients, ParamState
from randprune.mask import Mask
from randprune.models import TrainConfig

__all__ = ("learning_rate", "sgd_step")


def learning_rate(config: TrainConfig, epoch: int) -> float:
    """Step schedule: the base rate divided by ``lr_decay_factor`` once for
    every milestone already reached (epochs count from 0)."""
    drops = bisect_right(config.decay_milestones, epoch)
    return config.learning_rate / config.lr_decay_factor**drops


def sgd_step(
    params: ParamState,
    mask: Mask,
    grads: Gradients,
    config: TrainConfig,
    epoch: int,
) -> ParamState:
    """One momentum SGD step with coupled weight decay.

    buf <- momentum * buf + (g + wd * w);  w <- w - lr * buf

    Weights, their decayed gradients and the momentum buffers are re-masked
    with ``where`` so a pruned position stays exactly +0.0.
    """
    lr = learning_rate(config, epoch)
    mu, wd = config.momentum, config.weight_decay

    weights, momentum = [], []
    layers = zip(params.weights, grads.weights, params.momentum, mask.layers)
    for w, g, buf, keep in layers:
        step = np.where(keep, g + wd * w, 0.0)
        buf = np.where(keep, mu * buf + step, 0.0)
        weights.append(np.where(keep, w - lr * buf, 0.0))
        momentum.append(buf)

    biases: list[np.ndarray | None] = []
    bias_momentum: list[np.ndarray | None] = []
    for b, gb, bbuf in zip(params.biases, grads.biases, params.bias_momentum):
        if b is None or gb is None or bbuf is None:
            biases.append(b)
            bias_momentum.append(bbuf)
            continue
        bbuf = mu * bbuf + gb + wd * b
        biases.append(b - lr * bbuf)
        bias_momentum.append(bbuf)

    return replace(
        params,
        weights=weights,
        biases=biases,
        momentum=momentum,
        bias_momentum=bias_momentum,
    )
