"""Seeded random masks realizing a SparsityPlan.

Each layer draws from its own Philox stream keyed by (mask seed, layer
index), so a layer's mask does not depend on the layers sampled before it
and identical arguments give bit-identical masks on every platform.

Binary layout (little endian)::

    b"RPMASK" | u16 version | u64 seed | u8 mode | u32 layer count
    per layer: u16 name length | name utf-8 | u8 prunable | u8 ndim
               | u32 dims... | u64 popcount | packed bits (np.packbits)
"""

from __future__ import annotations

import json
import struct
import typing as t
from dataclasses import dataclass
from logging import getLogger
from pathlib import Path

import numpy as np

from randprune.exceptions import ArtifactError, PlanMismatchError
from randprune.models import NetworkSpec, SparsityPlan
from randprune.types import BoolArray

__all__ = (
    "Mask",
    "MaskMode",
    "full_mask",
    "sample_mask",
    "sparse_param_count",
    "sparse_flops",
    "mask_summary",
    "save_mask",
    "load_mask",
    "mask_to_bytes",
    "mask_from_bytes",
)

logger = getLogger(__name__)

MaskMode = t.Literal["exact", "bernoulli"]

MAGIC = b"RPMASK"
VERSION = 1
_MODES: tuple[MaskMode, ...] = ("exact", "bernoulli")
# Keeps mask streams apart from the init streams drawn from the same seed
MASK_STREAM = 1


@dataclass(frozen=True, eq=False)
class Mask:
    names: tuple[str, ...]
    layers: tuple[BoolArray, ...]  # one per network layer, weight shaped
    prunable: tuple[bool, ...]
    seed: int
    mode: MaskMode

    def popcounts(self) -> list[int]:
        return [int(np.count_nonzero(layer)) for layer in self.layers]

    def check_aligned(self, net: NetworkSpec) -> None:
        names = tuple(layer.name for layer in net.layers)
        if names != self.names:
            raise PlanMismatchError(f"mask layers {self.names} do not match {names}")
        for layer, bits in zip(net.layers, self.layers):
            if bits.shape != layer.weight_shape:
                raise PlanMismatchError(
                    f"layer '{layer.name}': mask shape {bits.shape}, weights"
                    f" {layer.weight_shape}"
                )

    def equals(self, other: Mask) -> bool:
        return (
            self.names == other.names
            and self.prunable == other.prunable
            and self.seed == other.seed
            and self.mode == other.mode
            and all(np.array_equal(a, b) for a, b in zip(self.layers, other.layers))
        )


def _check_seed(seed: int) -> None:
    if not 0 <= seed < 2**64:
        raise PlanMismatchError(f"mask seed must be an unsigned 64-bit int, got {seed}")


def layer_generator(seed: int, stream: int, index: int) -> np.random.Generator:
    sequence = np.random.SeedSequence(seed, spawn_key=(stream, index))
    return np.random.Generator(np.random.Philox(sequence))


def full_mask(net: NetworkSpec) -> Mask:
    return Mask(
        names=tuple(layer.name for layer in net.layers),
        layers=tuple(np.ones(layer.weight_shape, dtype=bool) for layer in net.layers),
        prunable=tuple(layer.prunable for layer in net.layers),
        seed=0,
        mode="exact",
    )


def sample_mask(
    plan: SparsityPlan, net: NetworkSpec, seed: int, mode: MaskMode = "exact"
) -> Mask:
    """Exact mode keeps exactly ``retained`` weights per layer, chosen by a
    seeded shuffle; bernoulli mode keeps each weight with probability d^l."""
    _check_seed(seed)
    if mode not in _MODES:
        raise PlanMismatchError(f"unknown mask mode {mode!r}")
    prunable = net.prunable_layers
    if plan.layer_names != [layer.name for layer in prunable]:
        raise PlanMismatchError(
            f"plan layers {plan.layer_names} do not match prunable layers"
            f" {[layer.name for layer in prunable]}"
        )
    allocations = iter(plan.layers)
    layers = []
    for index, layer in enumerate(net.layers):
        if not layer.prunable:
            layers.append(np.ones(layer.weight_shape, dtype=bool))
            continue
        alloc = next(allocations)
        if alloc.total != layer.param_count:
            raise PlanMismatchError(
                f"layer '{layer.name}': plan counts {alloc.total} weights,"
                f" network has {layer.param_count}"
            )
        rng = layer_generator(seed, MASK_STREAM, index)
        bits = np.zeros(layer.param_count, dtype=bool)
        if mode == "exact":
            bits[rng.permutation(layer.param_count)[: alloc.retained]] = True
        else:
            bits = rng.random(layer.param_count) < alloc.density
        layers.append(bits.reshape(layer.weight_shape))

    mask = Mask(
        names=tuple(layer.name for layer in net.layers),
        layers=tuple(layers),
        prunable=tuple(layer.prunable for layer in net.layers),
        seed=seed,
        mode=mode,
    )
    logger.debug(
        "sampled %s mask, seed %d, %d weights", mode, seed, sparse_param_count(mask)
    )
    return mask


def sparse_param_count(mask: Mask) -> int:
    return sum(
        count for count, prunable in zip(mask.popcounts(), mask.prunable) if prunable
    )


def sparse_flops(mask: Mask, net: NetworkSpec) -> int:
    mask.check_aligned(net)
    return sum(
        2 * count * layer.out_positions
        for count, layer in zip(mask.popcounts(), net.layers)
        if layer.prunable
    )


def mask_summary(mask: Mask) -> dict[str, t.Any]:
    """Human-readable companion document of a binary mask."""
    return {
        "seed": mask.seed,
        "mode": mask.mode,
        "params": sparse_param_count(mask),
        "layers": [
            {
                "name": name,
                "shape": list(bits.shape),
                "prunable": prunable,
                "popcount": count,
                "total": int(bits.size),
                "density": count / bits.size,
            }
            for name, bits, prunable, count in zip(
                mask.names, mask.layers, mask.prunable, mask.popcounts()
            )
        ],
    }


def mask_to_bytes(mask: Mask) -> bytes:
    chunks = [
        struct.pack(
            "<6sHQBI",
            MAGIC,
            VERSION,
            mask.seed,
            _MODES.index(mask.mode),
            len(mask.layers),
        )
    ]
    for name, bits, prunable in zip(mask.names, mask.layers, mask.prunable):
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)) + encoded)
        chunks.append(struct.pack("<BB", prunable, bits.ndim))
        chunks.append(struct.pack(f"<{bits.ndim}I", *bits.shape))
        chunks.append(struct.pack("<Q", int(np.count_nonzero(bits))))
        chunks.append(np.packbits(bits.ravel()).tobytes())
    return b"".join(chunks)


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.offset = 0

    def take(self, fmt: str) -> tuple[t.Any, ...]:
        size = struct.calcsize(fmt)
        if self.offset + size > len(self.data):
            raise ArtifactError("mask file is truncated")
        values = struct.unpack_from(fmt, self.data, self.offset)
        self.offset += size
        return values

    def raw(self, size: int) -> bytes:
        if self.offset + size > len(self.data):
            raise ArtifactError("mask file is truncated")
        chunk = self.data[self.offset : self.offset + size]
        self.offset += size
        return chunk


def mask_from_bytes(data: bytes) -> Mask:
    reader = _Reader(data)
    magic, version, seed, mode, count = reader.take("<6sHQBI")
    if magic != MAGIC:
        raise ArtifactError("not a mask file")
    if version != VERSION:
        raise ArtifactError(f"unsupported mask format version {version}")
    if mode >= len(_MODES):
        raise ArtifactError(f"unknown mask mode code {mode}")
    names, layers, prunables = [], [], []
    for _ in range(count):
        (length,) = reader.take("<H")
        try:
            name = reader.raw(length).decode("utf-8")
        except UnicodeDecodeError:
            raise ArtifactError("layer name is not valid utf-8") from None
        prunable, ndim = reader.take("<BB")
        shape = reader.take(f"<{ndim}I")
        (popcount,) = reader.take("<Q")
        size = int(np.prod(shape))
        packed = np.frombuffer(reader.raw((size + 7) // 8), dtype=np.uint8)
        bits = np.unpackbits(packed, count=size).astype(bool).reshape(shape)
        if int(np.count_nonzero(bits)) != popcount:
            raise ArtifactError(f"layer '{name}': popcount header disagrees with bits")
        names.append(name)
        layers.append(bits)
        prunables.append(bool(prunable))
    if reader.offset != len(data):
        raise ArtifactError("trailing bytes after the last mask layer")
    return Mask(
        names=tuple(names),
        layers=tuple(layers),
        prunable=tuple(prunables),
        seed=seed,
        mode=_MODES[mode],
    )


def save_mask(mask: Mask, path: Path, summary: Path | None = None) -> None:
    path.write_bytes(mask_to_bytes(mask))
    if summary is not None:
        summary.write_text(json.dumps(mask_summary(mask), indent=2) + "\n")


def load_mask(path: Path) -> Mask:
    try:
        data = path.read_bytes()
    except OSError as err:
        raise ArtifactError(f"cannot read mask {path}: {err}") from None
    return mask_from_bytes(data)
