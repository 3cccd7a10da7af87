"""Forward/backward kernels of the layer kinds the engine supports.

Convolutions are stride 1 and run as an im2col einsum over
``sliding_window_view`` windows of shape (N, C, H_out, W_out, kh, kw).
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from randprune.types import FloatArray

__all__ = (
    "conv_forward",
    "conv_backward",
    "fc_forward",
    "fc_backward",
    "pool_forward",
    "pool_backward",
)


def _pad(x: FloatArray, padding: int) -> FloatArray:
    if not padding:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def conv_forward(
    x: FloatArray, weight: FloatArray, bias: FloatArray | None, padding: int
) -> tuple[FloatArray, FloatArray]:
    kh, kw = weight.shape[2:]
    windows = sliding_window_view(_pad(x, padding), (kh, kw), axis=(2, 3))
    out = np.einsum("nchwij,ocij->nohw", windows, weight, optimize=True)
    if bias is not None:
        out = out + bias[None, :, None, None]
    return out, windows


def conv_backward(
    dout: FloatArray,
    windows: FloatArray,
    weight: FloatArray,
    padding: int,
    input_shape: tuple[int, ...],
    need_input: bool = True,
) -> tuple[FloatArray | None, FloatArray, FloatArray]:
    dweight = np.einsum("nohw,nchwij->ocij", dout, windows, optimize=True)
    dbias = dout.sum(axis=(0, 2, 3))
    if not need_input:
        return None, dweight, dbias
    n, c, h, w = input_shape
    kh, kw = weight.shape[2:]
    ho, wo = dout.shape[2:]
    dpadded = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
    for i in range(kh):
        for j in range(kw):
            dpadded[:, :, i : i + ho, j : j + wo] += np.einsum(
                "nohw,oc->nchw", dout, weight[:, :, i, j], optimize=True
            )
    if padding:
        dpadded = dpadded[:, :, padding : padding + h, padding : padding + w]
    return dpadded, dweight, dbias


def fc_forward(
    x: FloatArray, weight: FloatArray, bias: FloatArray | None
) -> FloatArray:
    out = x @ weight.T
    if bias is not None:
        out = out + bias
    return out


def fc_backward(
    dout: FloatArray, x: FloatArray, weight: FloatArray
) -> tuple[FloatArray, FloatArray, FloatArray]:
    return dout @ weight, dout.T @ x, dout.sum(axis=0)


def _blocks(x: FloatArray, k: int) -> FloatArray:
    # (N, C, H, W) -> (N, C, H/k, W/k, k*k)
    n, c, h, w = x.shape
    return (
        x.reshape(n, c, h // k, k, w // k, k)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h // k, w // k, k * k)
    )


def _unblocks(x: FloatArray, k: int) -> FloatArray:
    n, c, ho, wo, _ = x.shape
    return (
        x.reshape(n, c, ho, wo, k, k)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, ho * k, wo * k)
    )


def pool_forward(
    x: FloatArray, kind: str, size: int
) -> tuple[FloatArray, np.ndarray | None]:
    if kind == "none":
        return x, None
    if kind == "global":
        return x.mean(axis=(2, 3), keepdims=True), None
    blocks = _blocks(x, size)
    if kind == "avg":
        return blocks.mean(axis=-1), None
    # max: first maximum wins ties
    winners = blocks.argmax(axis=-1)
    return np.take_along_axis(blocks, winners[..., None], axis=-1)[..., 0], winners


def pool_backward(
    dout: FloatArray,
    kind: str,
    size: int,
    input_shape: tuple[int, ...],
    winners: np.ndarray | None,
) -> FloatArray:
    if kind == "none":
        return dout
    if kind == "global":
        h, w = input_shape[2:]
        return np.broadcast_to(dout / (h * w), input_shape).copy()
    if kind == "avg":
        spread = np.repeat(dout[..., None], size * size, axis=-1) / (size * size)
        return _unblocks(spread, size)
    assert winners is not None
    grad = np.zeros(dout.shape + (size * size,))
    np.put_along_axis(grad, winners[..., None], dout[..., None], axis=-1)
    return _unblocks(grad, size)
