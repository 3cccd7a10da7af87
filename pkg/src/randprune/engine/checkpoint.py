"""Versioned binary checkpoints of a training run.

Layout (little endian)::

    b"RPCKPT" | u16 version | u32 header length | header (JSON, utf-8)
    | float64 arrays in header order | mask bytes

The header carries the architecture document, epoch, init seed, the RNG
state of the next epoch and the shape of every stored array. Keys are
sorted so identical states give identical bytes.
"""

from __future__ import annotations

import json
import struct
import typing as t
from dataclasses import dataclass
from logging import getLogger
from pathlib import Path

import numpy as np

from randprune.arch import parse_network, serialize_network
from randprune.engine.network import ParamState
from randprune.exceptions import ArtifactError, NetworkParseError, RandPruneError
from randprune.mask import Mask, mask_from_bytes, mask_to_bytes

__all__ = (
    "Checkpoint",
    "checkpoint_to_bytes",
    "checkpoint_from_bytes",
    "save_checkpoint",
    "load_checkpoint",
)

logger = getLogger(__name__)

MAGIC = b"RPCKPT"
VERSION = 1
_PREFIX = "<6sHI"
_GROUPS = ("weights", "biases", "momentum", "bias_momentum")


@dataclass(frozen=True, eq=False)
class Checkpoint:
    params: ParamState
    mask: Mask
    epoch: int  # epochs completed
    rng_state: dict[str, t.Any]


def _to_json(value: t.Any) -> t.Any:
    if isinstance(value, np.ndarray):
        return {"__ndarray__": value.tolist(), "dtype": value.dtype.str}
    if isinstance(value, np.integer):
        return int(value)
    raise TypeError(f"cannot store {type(value).__name__} in a checkpoint header")


def _from_json(value: dict[str, t.Any]) -> t.Any:
    if "__ndarray__" in value:
        return np.array(value["__ndarray__"], dtype=value["dtype"])
    return value


def checkpoint_to_bytes(ckpt: Checkpoint) -> bytes:
    params = ckpt.params
    arrays: list[np.ndarray] = []
    shapes: dict[str, list[list[int] | None]] = {}
    for group in _GROUPS:
        shapes[group] = []
        for array in getattr(params, group):
            if array is None:
                shapes[group].append(None)
                continue
            shapes[group].append(list(array.shape))
            arrays.append(np.ascontiguousarray(array, dtype="<f8"))
    mask_bytes = mask_to_bytes(ckpt.mask)
    header = json.dumps(
        {
            "network": serialize_network(params.net),
            "epoch": ckpt.epoch,
            "init_seed": params.init_seed,
            "rng_state": ckpt.rng_state,
            "shapes": shapes,
            "mask_bytes": len(mask_bytes),
        },
        sort_keys=True,
        default=_to_json,
    ).encode("utf-8")
    return b"".join(
        [struct.pack(_PREFIX, MAGIC, VERSION, len(header)), header]
        + [a.tobytes() for a in arrays]
        + [mask_bytes]
    )


def checkpoint_from_bytes(data: bytes) -> Checkpoint:
    prefix = struct.calcsize(_PREFIX)
    if len(data) < prefix:
        raise ArtifactError("checkpoint is truncated")
    magic, version, length = struct.unpack_from(_PREFIX, data)
    if magic != MAGIC:
        raise ArtifactError("not a checkpoint file")
    if version != VERSION:
        raise ArtifactError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(data[prefix : prefix + length], object_hook=_from_json)
        net = parse_network(header["network"])
    except (ValueError, KeyError, NetworkParseError) as err:
        raise ArtifactError(f"corrupt checkpoint header: {err}") from None

    offset = prefix + length
    groups: dict[str, list[np.ndarray | None]] = {}
    for group in _GROUPS:
        groups[group] = []
        for shape in header["shapes"][group]:
            if shape is None:
                groups[group].append(None)
                continue
            count = int(np.prod(shape))
            end = offset + 8 * count
            if end > len(data):
                raise ArtifactError("checkpoint is truncated")
            array = np.frombuffer(data[offset:end], dtype="<f8").reshape(shape)
            groups[group].append(array.astype(np.float64))
            offset = end
    if offset + header["mask_bytes"] != len(data):
        raise ArtifactError("checkpoint mask section has the wrong length")
    mask = mask_from_bytes(data[offset:])

    params = ParamState(
        net=net,
        weights=t.cast(list, groups["weights"]),
        biases=groups["biases"],
        momentum=t.cast(list, groups["momentum"]),
        bias_momentum=groups["bias_momentum"],
        init_seed=header["init_seed"],
    )
    try:
        mask.check_aligned(net)
    except RandPruneError as err:
        raise ArtifactError(f"checkpoint mask does not fit: {err}") from None
    return Checkpoint(params, mask, header["epoch"], header["rng_state"])


def save_checkpoint(ckpt: Checkpoint, path: Path) -> None:
    path.write_bytes(checkpoint_to_bytes(ckpt))
    logger.debug("checkpoint at epoch %d written to %s", ckpt.epoch, path)


def load_checkpoint(path: Path) -> Checkpoint:
    try:
        data = path.read_bytes()
    except OSError as err:
        raise ArtifactError(f"cannot read checkpoint {path}: {err}") from None
    return checkpoint_from_bytes(data)
