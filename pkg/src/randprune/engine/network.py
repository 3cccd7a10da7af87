"""Parameters, masked forward pass and exact reverse-mode gradients.

The network computes with effective weights ``where(mask, w, 0)``, so a
masked position contributes nothing and its gradient is reported as an exact
+0.0. Every hidden layer is followed by ReLU and then its declared pooling;
the last layer produces logits for a softmax cross-entropy averaged over the
batch.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from logging import getLogger

import numpy as np
from scipy.special import log_softmax, softmax

from randprune.exceptions import PlanMismatchError
from randprune.engine import layers as ops
from randprune.mask import Mask, layer_generator
from randprune.models import NetworkSpec
from randprune.types import FloatArray, IntArray

__all__ = (
    "Batch",
    "ParamState",
    "Gradients",
    "init_params",
    "apply_mask",
    "forward_loss",
    "backward",
    "value_and_grad",
    "input_gradient",
    "predict_logits",
)

logger = getLogger(__name__)

INIT_STREAM = 2


@dataclass(frozen=True, eq=False)
class Batch:
    inputs: FloatArray  # (N, C, H, W), or (N, D) flattened
    labels: IntArray

    def __post_init__(self) -> None:
        if self.inputs.ndim not in (2, 4):
            raise PlanMismatchError(
                f"inputs must be (N, C, H, W) or (N, D), got shape {self.inputs.shape}"
            )
        if len(self.inputs) != len(self.labels):
            raise PlanMismatchError(
                f"{len(self.inputs)} inputs but {len(self.labels)} labels"
            )

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, index: np.ndarray | slice) -> Batch:
        return Batch(self.inputs[index], self.labels[index])


@dataclass(frozen=True, eq=False)
class ParamState:
    net: NetworkSpec
    weights: list[FloatArray]
    biases: list[FloatArray | None]
    momentum: list[FloatArray]
    bias_momentum: list[FloatArray | None]
    init_seed: int

    def with_weights(self, weights: list[FloatArray]) -> ParamState:
        return replace(self, weights=weights)


@dataclass(frozen=True, eq=False)
class Gradients:
    weights: list[FloatArray]
    biases: list[FloatArray | None]

    def flat_weights(self) -> FloatArray:
        return np.concatenate([g.ravel() for g in self.weights])


def init_params(net: NetworkSpec, seed: int) -> ParamState:
    """Kaiming-normal weights with variance 2 / fan_in, zero biases."""
    weights, biases = [], []
    for index, layer in enumerate(net.layers):
        rng = layer_generator(seed, INIT_STREAM, index)
        fan_in = layer.fan_in_channels * layer.kernel_w * layer.kernel_h
        std = np.sqrt(2.0 / fan_in)
        weights.append(rng.standard_normal(layer.weight_shape) * std)
        biases.append(np.zeros(layer.fan_out_channels) if layer.has_bias else None)
    return ParamState(
        net=net,
        weights=weights,
        biases=biases,
        momentum=[np.zeros_like(w) for w in weights],
        bias_momentum=[None if b is None else np.zeros_like(b) for b in biases],
        init_seed=seed,
    )


def apply_mask(params: ParamState, mask: Mask) -> ParamState:
    mask.check_aligned(params.net)
    return replace(
        params,
        weights=[np.where(m, w, 0.0) for w, m in zip(params.weights, mask.layers)],
        momentum=[np.where(m, v, 0.0) for v, m in zip(params.momentum, mask.layers)],
    )


def _shape_inputs(net: NetworkSpec, inputs: FloatArray) -> FloatArray:
    if inputs.ndim == 2:
        if inputs.shape[1] != np.prod(net.input_shape):
            raise PlanMismatchError(
                f"{inputs.shape[1]} input features, network expects"
                f" {net.input_shape}"
            )
        return inputs.reshape((len(inputs),) + net.input_shape)
    if inputs.shape[1:] != net.input_shape:
        raise PlanMismatchError(
            f"input shape {inputs.shape[1:]}, network expects {net.input_shape}"
        )
    return inputs


def _forward(
    params: ParamState, mask: Mask, inputs: FloatArray
) -> tuple[FloatArray, list[dict], list[FloatArray]]:
    net = params.net
    effective = [np.where(m, w, 0.0) for w, m in zip(params.weights, mask.layers)]
    a = _shape_inputs(net, inputs).astype(np.float64, copy=False)
    caches = []
    last = len(net.layers) - 1
    for i, layer in enumerate(net.layers):
        cache: dict = {"input_shape": a.shape}
        if layer.kind == "conv":
            z, cache["windows"] = ops.conv_forward(
                a, effective[i], params.biases[i], layer.padding
            )
        else:
            flat = a.reshape(len(a), -1)
            cache["flat"] = flat
            z = ops.fc_forward(flat, effective[i], params.biases[i])
        if i < last:
            cache["active"] = z > 0
            a = np.where(cache["active"], z, 0.0)
            cache["pool_input_shape"] = a.shape
            a, cache["winners"] = ops.pool_forward(a, layer.pool, layer.pool_size)
        else:
            a = z
        caches.append(cache)
    return a, caches, effective


def _check_labels(net: NetworkSpec, batch: Batch) -> None:
    if len(batch) == 0:
        raise PlanMismatchError("empty batch")
    labels = batch.labels
    if labels.min() < 0 or labels.max() >= net.class_count:
        raise PlanMismatchError(f"labels must lie in [0, {net.class_count})")


def _loss(logits: FloatArray, labels: IntArray) -> float:
    picked = log_softmax(logits, axis=1)[np.arange(len(labels)), labels]
    return float(-picked.mean())


def _propagate(
    params: ParamState, mask: Mask, batch: Batch, need_input: bool = False
) -> tuple[float, FloatArray, Gradients, FloatArray | None]:
    net = params.net
    _check_labels(net, batch)
    logits, caches, effective = _forward(params, mask, batch.inputs)
    n = len(batch)
    loss = _loss(logits, batch.labels)

    dz = softmax(logits, axis=1)
    dz[np.arange(n), batch.labels] -= 1.0
    dz /= n

    dweights: list[FloatArray] = [np.empty(0)] * len(net.layers)
    dbiases: list[FloatArray | None] = [None] * len(net.layers)
    last = len(net.layers) - 1
    da: FloatArray | None = None
    for i in range(last, -1, -1):
        layer, cache = net.layers[i], caches[i]
        if i < last:
            assert da is not None
            da = ops.pool_backward(
                da,
                layer.pool,
                layer.pool_size,
                cache["pool_input_shape"],
                cache["winners"],
            )
            dz = np.where(cache["active"], da, 0.0)
        need = i > 0 or need_input
        if layer.kind == "conv":
            da, dw, db = ops.conv_backward(
                dz,
                cache["windows"],
                effective[i],
                layer.padding,
                cache["input_shape"],
                need,
            )
        else:
            dflat, dw, db = ops.fc_backward(dz, cache["flat"], effective[i])
            da = dflat.reshape(cache["input_shape"]) if need else None
        dweights[i] = np.where(mask.layers[i], dw, 0.0)
        dbiases[i] = db if layer.has_bias else None

    grad_input = None
    if need_input:
        assert da is not None
        grad_input = da.reshape(batch.inputs.shape)
    return loss, logits, Gradients(dweights, dbiases), grad_input


def forward_loss(
    params: ParamState, mask: Mask, batch: Batch
) -> tuple[float, FloatArray]:
    _check_labels(params.net, batch)
    logits, _, _ = _forward(params, mask, batch.inputs)
    return _loss(logits, batch.labels), logits


def backward(params: ParamState, mask: Mask, batch: Batch) -> Gradients:
    return _propagate(params, mask, batch)[2]


def value_and_grad(
    params: ParamState, mask: Mask, batch: Batch
) -> tuple[float, Gradients]:
    loss, _, grads, _ = _propagate(params, mask, batch)
    return loss, grads


def input_gradient(params: ParamState, mask: Mask, batch: Batch) -> FloatArray:
    grad = _propagate(params, mask, batch, need_input=True)[3]
    assert grad is not None
    return grad


def predict_logits(
    params: ParamState, mask: Mask, inputs: FloatArray, batch_size: int = 256
) -> FloatArray:
    """Logits in fixed-size chunks, concatenated in input order."""
    chunks = [
        _forward(params, mask, inputs[start : start + batch_size])[0]
        for start in range(0, len(inputs), batch_size)
    ]
    if not chunks:
        return np.empty((0, params.net.class_count))
    return np.concatenate(chunks)
