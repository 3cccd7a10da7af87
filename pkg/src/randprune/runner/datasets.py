"""Dataset sources: synthetic generators, IDX files and NPZ archives.

Every source ends up as inputs scaled into [0, 1] with integer labels,
split into train/test by a seeded permutation. Two out-of-distribution
sets come with it: Gaussian noise matching the training inputs' mean and
standard deviation, and, for synthetic data, samples of extra classes held
out of training entirely.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from logging import getLogger
from pathlib import Path

import numpy as np

from randprune.alloc import round_half_up
from randprune.engine.network import Batch
from randprune.exceptions import DatasetError
from randprune.mask import layer_generator
from randprune.models import DatasetSource, NetworkSpec
from randprune.types import FloatArray, IntArray

__all__ = (
    "Splits",
    "gaussian_mixture",
    "image_grid",
    "read_idx",
    "load_dataset",
    "check_against_network",
)

logger = getLogger(__name__)

DATA_STREAM = 4
SPLIT_STREAM = 5
NOISE_STREAM = 6

# IDX type byte -> big-endian numpy dtype
_IDX_TYPES = {
    0x08: ">u1",
    0x09: ">i1",
    0x0B: ">i2",
    0x0C: ">i4",
    0x0D: ">f4",
    0x0E: ">f8",
}


@dataclass(frozen=True, eq=False)
class Splits:
    train: Batch
    test: Batch
    ood_noise: Batch
    ood_heldout: Batch | None
    input_shape: tuple[int, int, int]
    class_count: int


def _classes_of(count: int, total_classes: int, rng: np.random.Generator) -> IntArray:
    labels = np.arange(count) % total_classes
    return rng.permutation(labels)


def gaussian_mixture(
    classes: int, samples: int, dim: int, noise: float, seed: int
) -> tuple[FloatArray, IntArray]:
    """Isotropic clusters around means drawn in [0.25, 0.75]^dim, clipped to
    the unit cube. Inputs come back flat, (N, dim)."""
    rng = layer_generator(seed, DATA_STREAM, 0)
    means = rng.uniform(0.25, 0.75, size=(classes, dim))
    labels = _classes_of(samples, classes, rng)
    inputs = means[labels] + noise * rng.standard_normal((samples, dim))
    return np.clip(inputs, 0.0, 1.0), labels


def image_grid(
    classes: int,
    samples: int,
    image_size: int,
    channels: int,
    noise: float,
    seed: int,
) -> tuple[FloatArray, IntArray]:
    """Small images: each class lights a random half of a 4x4 cell grid,
    every sample adds pixel noise and a random brightness."""
    rng = layer_generator(seed, DATA_STREAM, 1)
    cells = 4
    cell = max(1, image_size // cells)
    patterns = rng.random((classes, channels, cells, cells)) < 0.5
    prototypes = np.kron(patterns, np.ones((cell, cell)))
    margin = max(0, image_size - cell * cells)
    prototypes = np.pad(prototypes, ((0, 0), (0, 0), (0, margin), (0, margin)))
    prototypes = prototypes[:, :, :image_size, :image_size]
    labels = _classes_of(samples, classes, rng)
    brightness = rng.uniform(0.6, 1.0, size=(samples, 1, 1, 1))
    inputs = prototypes[labels] * brightness
    inputs = inputs + noise * rng.standard_normal(inputs.shape)
    return np.clip(inputs, 0.0, 1.0), labels


def read_idx(path: Path) -> np.ndarray:
    """Read an IDX array (optionally gzip-compressed)."""
    try:
        raw = path.read_bytes()
    except OSError as err:
        raise DatasetError(f"cannot read {path}: {err}") from None
    if path.suffix == ".gz":
        try:
            raw = gzip.decompress(raw)
        except OSError as err:
            raise DatasetError(f"{path}: {err}") from None
    if len(raw) < 4 or raw[0] or raw[1]:
        raise DatasetError(f"{path}: not an IDX file")
    kind, ndim = raw[2], raw[3]
    if kind not in _IDX_TYPES:
        raise DatasetError(f"{path}: unknown IDX element type 0x{kind:02x}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DatasetError(f"{path}: truncated IDX header")
    shape = struct.unpack_from(f">{ndim}I", raw, 4)
    dtype = np.dtype(_IDX_TYPES[kind])
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(raw) - header != expected:
        raise DatasetError(
            f"{path}: IDX body holds {len(raw) - header} bytes, shape {shape}"
            f" needs {expected}"
        )
    return np.frombuffer(raw, dtype=dtype, offset=header).reshape(shape)


def _scale_inputs(inputs: np.ndarray, where: str) -> FloatArray:
    if inputs.dtype == np.uint8:
        return inputs.astype(np.float64) / 255.0
    scaled = inputs.astype(np.float64)
    if scaled.size and (scaled.min() < 0.0 or scaled.max() > 1.0):
        raise DatasetError(f"{where}: inputs must be uint8 or lie in [0, 1]")
    return scaled


def _check_labels(labels: np.ndarray, class_count: int, where: str) -> IntArray:
    if labels.ndim != 1:
        raise DatasetError(f"{where}: labels must be one-dimensional")
    if labels.dtype.kind not in "iu":
        raise DatasetError(f"{where}: labels must be integers")
    bad = np.flatnonzero((labels < 0) | (labels >= class_count))
    if bad.size:
        index = int(bad[0])
        raise DatasetError(
            f"{where}: sample {index} has label {int(labels[index])},"
            f" expected [0, {class_count})"
        )
    return labels.astype(np.int64)


def _from_files(source: DatasetSource) -> tuple[FloatArray, np.ndarray, str]:
    if source.kind == "idx":
        assert source.images is not None and source.labels is not None
        images, labels = read_idx(source.images), read_idx(source.labels)
        where = str(source.images)
    else:
        assert source.path is not None
        where = str(source.path)
        try:
            with np.load(source.path, allow_pickle=False) as archive:
                images, labels = archive["inputs"], archive["labels"]
        except (OSError, ValueError) as err:
            raise DatasetError(f"cannot read {where}: {err}") from None
        except KeyError:
            raise DatasetError(f"{where}: needs 'inputs' and 'labels'") from None
    if images.ndim == 3:
        images = images[:, None]  # (N, H, W) -> (N, 1, H, W)
    if images.ndim not in (2, 4):
        raise DatasetError(f"{where}: inputs must be (N, D), (N, H, W) or (N, C, H, W)")
    if len(images) != len(labels):
        raise DatasetError(f"{where}: {len(images)} inputs but {len(labels)} labels")
    return _scale_inputs(images, where), labels, where


def _split(
    inputs: FloatArray, labels: IntArray, fraction: float, seed: int
) -> tuple[Batch, Batch]:
    n = len(labels)
    if n < 2:
        raise DatasetError(f"need at least 2 samples to split, got {n}")
    order = layer_generator(seed, SPLIT_STREAM, 0).permutation(n)
    n_test = min(n - 1, max(1, round_half_up(fraction * n)))
    test, train = order[:n_test], order[n_test:]
    return Batch(inputs[train], labels[train]), Batch(inputs[test], labels[test])


def _noise_like(train: Batch, count: int, seed: int) -> Batch:
    rng = layer_generator(seed, NOISE_STREAM, 0)
    mean, std = float(train.inputs.mean()), float(train.inputs.std())
    shape = (count,) + train.inputs.shape[1:]
    inputs = np.clip(mean + std * rng.standard_normal(shape), 0.0, 1.0)
    return Batch(inputs, np.zeros(count, dtype=np.int64))


def load_dataset(source: DatasetSource, class_count: int | None = None) -> Splits:
    """Materialize ``source``. File labels are checked against
    ``class_count`` (default ``source.classes``)."""
    heldout = None
    if source.kind in ("gaussian_mixture", "image_grid"):
        classes = source.classes
        total_classes = classes + source.heldout_classes
        count = source.samples + (source.samples // classes) * source.heldout_classes
        if source.kind == "gaussian_mixture":
            noise = 0.1 if source.noise is None else source.noise
            inputs, labels = gaussian_mixture(
                total_classes, count, source.dim, noise, source.seed
            )
            shape = (source.dim, 1, 1)
        else:
            noise = 0.35 if source.noise is None else source.noise
            inputs, labels = image_grid(
                total_classes,
                count,
                source.image_size,
                source.channels,
                noise,
                source.seed,
            )
            shape = (source.channels, source.image_size, source.image_size)
        if source.heldout_classes:
            out = labels >= classes
            heldout = Batch(inputs[out], labels[out] - classes)
            inputs, labels = inputs[~out], labels[~out]
    else:
        classes = source.classes if class_count is None else class_count
        inputs, raw_labels, where = _from_files(source)
        labels = _check_labels(raw_labels, classes, where)
        if inputs.ndim == 2:
            shape = (inputs.shape[1], 1, 1)
        else:
            shape = inputs.shape[1:]

    train, test = _split(inputs, labels, source.test_fraction, source.split_seed)
    splits = Splits(
        train=train,
        test=test,
        ood_noise=_noise_like(train, len(test), source.split_seed),
        ood_heldout=heldout,
        input_shape=(int(shape[0]), int(shape[1]), int(shape[2])),
        class_count=classes,
    )
    logger.info(
        "%s dataset: %d train, %d test samples of shape %s",
        source.kind,
        len(train),
        len(test),
        splits.input_shape,
    )
    return splits


def check_against_network(splits: Splits, net: NetworkSpec) -> None:
    """Inputs must fit the network; flat vectors only need a matching size."""
    shape = splits.input_shape
    if shape != net.input_shape and (
        splits.train.inputs.ndim != 2 or np.prod(shape) != np.prod(net.input_shape)
    ):
        raise DatasetError(
            f"dataset inputs have shape {shape}, network expects {net.input_shape}"
        )
    if splits.class_count != net.class_count:
        raise DatasetError(
            f"dataset has {splits.class_count} classes, network has {net.class_count}"
        )
