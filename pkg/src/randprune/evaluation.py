"""Measurement suite of a trained (or untrained) masked network.

Each metric comes in two flavours: a ``*_from_*`` function over stored
logits/scores, and a wrapper running the network on a dataset first.
"""

from __future__ import annotations

from logging import getLogger

import numpy as np
import pandas as pd
from scipy.special import log_softmax, softmax
from scipy.stats import rankdata

from randprune.arch import param_count
from randprune.config import config
from randprune.engine.network import (
    Batch,
    ParamState,
    backward,
    input_gradient,
    predict_logits,
)
from randprune.exceptions import DatasetError
from randprune.mask import Mask, sparse_flops, sparse_param_count
from randprune.models import AttackConfig, MetricsRecord, MetricToggles
from randprune.types import FloatArray, IntArray

__all__ = (
    "accuracy",
    "accuracy_from_logits",
    "ece",
    "calibration_error",
    "reliability_table",
    "nll",
    "nll_from_logits",
    "fgsm_perturb",
    "fgsm_accuracy",
    "auc_from_scores",
    "confidence_scores",
    "ood_auc",
    "grad_flow_norm",
    "evaluate",
)

logger = getLogger(__name__)


def _nonempty(dataset: Batch, what: str = "dataset") -> None:
    if len(dataset) == 0:
        raise DatasetError(f"{what} is empty")


def _logits(params: ParamState, mask: Mask, dataset: Batch) -> FloatArray:
    _nonempty(dataset)
    return predict_logits(params, mask, dataset.inputs, config.eval_batch_size)


def accuracy_from_logits(logits: FloatArray, labels: IntArray) -> float:
    # argmax breaks ties towards the lowest class index
    return float(np.mean(logits.argmax(axis=1) == labels))


def accuracy(params: ParamState, mask: Mask, dataset: Batch) -> float:
    return accuracy_from_logits(_logits(params, mask, dataset), dataset.labels)


def _bin_stats(
    probs: FloatArray, labels: IntArray, bins: int
) -> tuple[IntArray, FloatArray, FloatArray]:
    """Per-bin sample count, correct count and confidence sum over equal-width
    bins (lo, hi] of the max-softmax confidence; zero confidence joins bin 0."""
    if bins < 1:
        raise ValueError(f"bin count must be >= 1, got {bins}")
    confidence = probs.max(axis=1)
    correct = probs.argmax(axis=1) == labels
    edges = np.linspace(0.0, 1.0, bins + 1)
    index = np.clip(np.searchsorted(edges, confidence, side="left") - 1, 0, bins - 1)
    counts = np.bincount(index, minlength=bins)
    hits = np.bincount(index, weights=correct, minlength=bins)
    conf = np.bincount(index, weights=confidence, minlength=bins)
    return counts, hits, conf


def calibration_error(probs: FloatArray, labels: IntArray, bins: int = 15) -> float:
    """sum_b (n_b / N) |acc_b - conf_b| over equal-width confidence bins."""
    if len(labels) == 0:
        raise DatasetError("dataset is empty")
    _, hits, conf = _bin_stats(probs, labels, bins)
    return float(np.abs(hits - conf).sum() / len(labels))


def reliability_table(
    probs: FloatArray, labels: IntArray, bins: int = 15
) -> pd.DataFrame:
    """Plot data of a reliability diagram; empty bins carry NaN rates."""
    if len(labels) == 0:
        raise DatasetError("dataset is empty")
    counts, hits, conf = _bin_stats(probs, labels, bins)
    edges = np.linspace(0.0, 1.0, bins + 1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return pd.DataFrame(
            {
                "bin": np.arange(bins),
                "lower": edges[:-1],
                "upper": edges[1:],
                "count": counts,
                "accuracy": np.where(counts > 0, hits / counts, np.nan),
                "confidence": np.where(counts > 0, conf / counts, np.nan),
            }
        )


def ece(params: ParamState, mask: Mask, dataset: Batch, bins: int = 15) -> float:
    probs = softmax(_logits(params, mask, dataset), axis=1)
    return calibration_error(probs, dataset.labels, bins)


def nll_from_logits(logits: FloatArray, labels: IntArray) -> float:
    picked = log_softmax(logits, axis=1)[np.arange(len(labels)), labels]
    # A perfect prediction gives -0.0 here
    return float(max(0.0, -picked.mean()))


def nll(params: ParamState, mask: Mask, dataset: Batch) -> float:
    return nll_from_logits(_logits(params, mask, dataset), dataset.labels)


def fgsm_perturb(
    params: ParamState, mask: Mask, dataset: Batch, attack: AttackConfig
) -> Batch:
    """x <- clip(x + eps * sign(grad_x L(x, y))) with the true labels y."""
    _nonempty(dataset)
    if attack.epsilon == 0.0:
        return dataset
    chunks = []
    step = config.eval_batch_size
    for start in range(0, len(dataset), step):
        batch = dataset.take(slice(start, start + step))
        grad = input_gradient(params, mask, batch)
        chunks.append(
            np.clip(
                batch.inputs + attack.epsilon * np.sign(grad),
                attack.input_min,
                attack.input_max,
            )
        )
    return Batch(np.concatenate(chunks), dataset.labels)


def fgsm_accuracy(
    params: ParamState, mask: Mask, dataset: Batch, attack: AttackConfig
) -> float:
    return accuracy(params, mask, fgsm_perturb(params, mask, dataset, attack))


def auc_from_scores(in_scores: FloatArray, out_scores: FloatArray) -> float:
    """Mann-Whitney estimate of P(in > out), ties counted half."""
    n_in, n_out = len(in_scores), len(out_scores)
    if not n_in or not n_out:
        raise DatasetError("AUC needs nonempty in- and out-distribution sets")
    ranks = rankdata(np.concatenate([in_scores, out_scores]))
    u = ranks[:n_in].sum() - n_in * (n_in + 1) / 2.0
    return float(u / (n_in * n_out))


def confidence_scores(params: ParamState, mask: Mask, dataset: Batch) -> FloatArray:
    """Max-softmax probability of every sample."""
    return softmax(_logits(params, mask, dataset), axis=1).max(axis=1)


def ood_auc(
    params: ParamState, mask: Mask, in_dataset: Batch, out_dataset: Batch
) -> float:
    _nonempty(in_dataset, "in-distribution set")
    _nonempty(out_dataset, "out-of-distribution set")
    return auc_from_scores(
        confidence_scores(params, mask, in_dataset),
        confidence_scores(params, mask, out_dataset),
    )


def grad_flow_norm(params: ParamState, mask: Mask, batch: Batch) -> float:
    """L2 norm of the weight gradient over active (unmasked) weights."""
    _nonempty(batch, "batch")
    grads = backward(params, mask, batch)
    squares = [
        np.sum(np.where(keep, g, 0.0) ** 2)
        for g, keep in zip(grads.weights, mask.layers)
    ]
    return float(np.sqrt(np.sum(squares)))


def evaluate(
    params: ParamState,
    mask: Mask,
    test: Batch,
    toggles: MetricToggles,
    *,
    run: str,
    method: str,
    epoch: int,
    train_loss: float | None = None,
    ood_noise: Batch | None = None,
    ood_heldout: Batch | None = None,
    grad_batch: Batch | None = None,
) -> MetricsRecord:
    """Full snapshot of the switched-on metrics."""
    net = params.net
    logits = _logits(params, mask, test)
    probs = softmax(logits, axis=1)
    attack = AttackConfig(epsilon=toggles.fgsm_epsilon)

    in_scores = probs.max(axis=1)
    bins = toggles.ece_bins
    params_kept = sparse_param_count(mask)
    total = param_count(net)
    record = MetricsRecord(
        run=run,
        method=method,
        epoch=epoch,
        train_loss=train_loss,
        clean_accuracy=accuracy_from_logits(logits, test.labels),
        ece=calibration_error(probs, test.labels, bins) if toggles.ece else None,
        nll=nll_from_logits(logits, test.labels) if toggles.nll else None,
        fgsm_accuracy=(
            fgsm_accuracy(params, mask, test, attack) if toggles.fgsm else None
        ),
        ood_auc=(
            auc_from_scores(in_scores, confidence_scores(params, mask, ood_noise))
            if toggles.ood and ood_noise is not None
            else None
        ),
        ood_auc_heldout=(
            auc_from_scores(in_scores, confidence_scores(params, mask, ood_heldout))
            if toggles.ood and ood_heldout is not None and len(ood_heldout)
            else None
        ),
        grad_flow_norm=(
            grad_flow_norm(params, mask, grad_batch if grad_batch is not None else test)
            if toggles.grad_flow
            else None
        ),
        params=params_kept,
        total_params=total,
        flops=sparse_flops(mask, net),
        sparsity=1 - params_kept / total if total else 0.0,
    )
    logger.debug("epoch %d: accuracy %.4f", epoch, record.clean_accuracy)
    return record
