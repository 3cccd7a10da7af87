from __future__ import annotations

import typing as t
from logging import getLogger

import numpy as np

from randprune.engine.network import Batch, ParamState, apply_mask, value_and_grad
from randprune.engine.optim import learning_rate, sgd_step
from randprune.mask import Mask, layer_generator
from randprune.models import TrainConfig

__all__ = ("fit", "epoch_order", "ORDER_STREAM")

logger = getLogger(__name__)

ORDER_STREAM = 3

EpochCallback = t.Callable[[int, ParamState, float], None]


def epoch_order(order_seed: int, epoch: int, size: int) -> np.ndarray:
    """Sample order of one epoch; depends on nothing but its arguments, so a
    resumed run replays the same batches."""
    return layer_generator(order_seed, ORDER_STREAM, epoch).permutation(size)


def fit(
    params: ParamState,
    mask: Mask,
    train: Batch,
    config: TrainConfig,
    order_seed: int,
    on_epoch: EpochCallback | None = None,
    start_epoch: int = 0,
) -> ParamState:
    """Train with a static mask from ``start_epoch`` to ``config.epochs``.

    ``on_epoch(epoch, params, train_loss)`` runs after every epoch with the
    sample-weighted mean training loss of that epoch.
    """
    params = apply_mask(params, mask)
    size = len(train)
    for epoch in range(start_epoch, config.epochs):
        order = epoch_order(order_seed, epoch, size)
        total = 0.0
        for start in range(0, size, config.batch_size):
            batch = train.take(order[start : start + config.batch_size])
            loss, grads = value_and_grad(params, mask, batch)
            params = sgd_step(params, mask, grads, config, epoch)
            total += loss * len(batch)
        train_loss = total / size
        logger.info(
            "epoch %d/%d loss %.4f lr %.4g",
            epoch + 1,
            config.epochs,
            train_loss,
            learning_rate(config, epoch),
        )
        if on_epoch is not None:
            on_epoch(epoch, params, train_loss)
    return params
