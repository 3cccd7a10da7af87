"""One experiment: plan, mask, init, static sparse training, snapshots.

Everything that can be rejected is checked by ``prepare_experiment`` before
the first byte is written. A run directory then holds::

    network.net      architecture document of the trained network
    plan.json        the SparsityPlan
    mask.bin         binary mask (+ mask.json summary)
    metrics.jsonl    one MetricsRecord per snapshot, epoch 0 = at init
    summary.csv      the same records as a table
    reliability.csv  reliability-diagram data of the final network
    checkpoint.bin   state after the last finished epoch
"""

from __future__ import annotations

import tomllib
import typing as t
from dataclasses import dataclass
from logging import getLogger
from pathlib import Path

import numpy as np
import pandas as pd
from pydantic import ValidationError
from scipy.special import softmax

from randprune.alloc import load_ratios, plan_for, plan_from_ratios, save_plan
from randprune.arch import conv_network, mlp_network, parse_network, serialize_network
from randprune.config import config
from randprune.engine.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from randprune.engine.network import (
    Batch,
    ParamState,
    apply_mask,
    init_params,
    predict_logits,
)
from randprune.engine.saliency import grasp_ratios, snip_ratios
from randprune.engine.training import ORDER_STREAM, epoch_order, fit
from randprune.evaluation import evaluate, reliability_table
from randprune.exceptions import ArtifactError, ConfigError, RunFailure
from randprune.mask import Mask, layer_generator, sample_mask, save_mask
from randprune.models import (
    RECORD_COLUMNS,
    ExperimentConfig,
    MetricsRecord,
    NetworkSource,
    NetworkSpec,
    SparsityPlan,
)
from randprune.runner.datasets import Splits, check_against_network, load_dataset
from randprune.runner.plotdata import load_records

__all__ = (
    "PreparedRun",
    "read_toml",
    "load_experiment",
    "resolve_output_dir",
    "build_network",
    "build_plan",
    "load_inputs",
    "scoring_batch",
    "prepare_experiment",
    "run_experiment",
)

logger = getLogger(__name__)

NETWORK_FILE = "network.net"
PLAN_FILE = "plan.json"
MASK_FILE = "mask.bin"
MASK_SUMMARY_FILE = "mask.json"
METRICS_FILE = "metrics.jsonl"
SUMMARY_FILE = "summary.csv"
RELIABILITY_FILE = "reliability.csv"
CHECKPOINT_FILE = "checkpoint.bin"

# Dotted locations of every path-valued key, resolved against the config file
_PATH_KEYS = (
    ("network", "path"),
    ("dataset", "images"),
    ("dataset", "labels"),
    ("dataset", "path"),
    ("sparsity", "ratio_file"),
)


@dataclass(frozen=True, eq=False)
class PreparedRun:
    config: ExperimentConfig
    net: NetworkSpec
    splits: Splits
    plan: SparsityPlan
    mask: Mask
    out_dir: Path


def read_toml(path: Path) -> dict[str, t.Any]:
    """Parse a TOML config, resolving its file references against the
    directory the config lives in."""
    try:
        with path.open("rb") as fp:
            data = tomllib.load(fp)
    except OSError as err:
        raise ConfigError(f"cannot read {path}: {err}") from None
    except tomllib.TOMLDecodeError as err:
        raise ConfigError(f"{path}: {err}") from None
    for table, key in _PATH_KEYS:
        section = data.get(table)
        if isinstance(section, dict) and isinstance(section.get(key), str):
            section[key] = str(path.parent / section[key])
    return data


def _validation_message(err: ValidationError) -> str:
    first = err.errors()[0]
    where = ".".join(str(part) for part in first["loc"])
    return f"{where}: {first['msg']}" if where else first["msg"]


def load_experiment(path: Path) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(read_toml(path))
    except ValidationError as err:
        raise ConfigError(f"{path}: {_validation_message(err)}") from None


def resolve_output_dir(cfg: ExperimentConfig, root: Path | None = None) -> Path:
    """Output directory of ``cfg`` below ``root``; escaping the root is an
    error."""
    root = (config.output_root if root is None else root).resolve()
    out_dir = (root / cfg.output_dir).resolve()
    if not out_dir.is_relative_to(root):
        raise ConfigError(f"output directory {cfg.output_dir} lies outside {root}")
    return out_dir


def _check_files(cfg: ExperimentConfig) -> None:
    files = list(cfg.dataset.files)
    if cfg.network.path is not None:
        files.append(cfg.network.path)
    if cfg.sparsity.ratio_file is not None:
        files.append(cfg.sparsity.ratio_file)
    for path in files:
        if not path.is_file():
            raise ConfigError(f"referenced file {path} does not exist")


def build_network(source: NetworkSource, splits: Splits | None = None) -> NetworkSpec:
    if source.path is not None:
        return parse_network(source.path.read_text(encoding="utf-8"))
    assert splits is not None
    family = mlp_network if source.family == "mlp" else conv_network
    return family(splits.input_shape, splits.class_count, source.width, source.depth)


def scoring_batch(cfg: ExperimentConfig, splits: Splits) -> Batch:
    """The first training batch, which one-shot saliency scoring sees."""
    size = cfg.sparsity.scoring_batch_size or cfg.train.batch_size
    order = epoch_order(cfg.order_seed, 0, len(splits.train))
    return splits.train.take(order[:size])


def build_plan(cfg: ExperimentConfig, net: NetworkSpec, splits: Splits) -> SparsityPlan:
    source = cfg.sparsity
    match source.method:
        case "snip":
            ratios = snip_ratios(
                net, cfg.init_seed, scoring_batch(cfg, splits), source.sparsity
            )
            return plan_from_ratios(net, ratios)
        case "grasp":
            ratios = grasp_ratios(
                net,
                cfg.init_seed,
                scoring_batch(cfg, splits),
                source.sparsity,
                source.grasp_prune_highest,
            )
            return plan_from_ratios(net, ratios)
        case "external":
            assert source.ratio_file is not None
            return plan_from_ratios(net, load_ratios(source.ratio_file, net))
    return plan_for(
        source.method,
        net,
        source.sparsity,
        last_density=source.last_density,
        power=source.erk_power,
    )


def load_inputs(cfg: ExperimentConfig) -> tuple[NetworkSpec, Splits]:
    """Network and dataset of a config, checked against each other."""
    _check_files(cfg)
    if cfg.network.path is not None:
        net = build_network(cfg.network)
        splits = load_dataset(cfg.dataset, net.class_count)
    else:
        splits = load_dataset(cfg.dataset)
        net = build_network(cfg.network, splits)
    check_against_network(splits, net)
    return net, splits


def prepare_experiment(cfg: ExperimentConfig, root: Path | None = None) -> PreparedRun:
    """Validate every input of a run and derive its plan and mask. Writes
    nothing."""
    out_dir = resolve_output_dir(cfg, root)
    net, splits = load_inputs(cfg)
    plan = build_plan(cfg, net, splits)
    mask = sample_mask(plan, net, cfg.mask_seed, cfg.sparsity.mask_mode)
    return PreparedRun(cfg, net, splits, plan, mask, out_dir)


def _write_records(path: Path, records: list[MetricsRecord]) -> None:
    lines = "".join(r.model_dump_json() + "\n" for r in records)
    path.write_text(lines, encoding="utf-8")


def _append_record(path: Path, record: MetricsRecord) -> None:
    with path.open("a", encoding="utf-8") as fp:
        fp.write(record.model_dump_json() + "\n")


def _resume_state(
    prepared: PreparedRun, out_dir: Path
) -> tuple[ParamState, int, list[MetricsRecord]] | None:
    ckpt_path = out_dir / CHECKPOINT_FILE
    if not ckpt_path.exists():
        return None
    ckpt = load_checkpoint(ckpt_path)
    if not ckpt.mask.equals(prepared.mask):
        raise ArtifactError(f"{ckpt_path} was written with a different mask")
    if ckpt.params.init_seed != prepared.config.init_seed:
        raise ArtifactError(f"{ckpt_path} was written with a different init seed")
    records = [
        r for r in load_records(out_dir / METRICS_FILE) if r.epoch <= ckpt.epoch
    ]
    logger.info("resuming %s after epoch %d", prepared.config.name, ckpt.epoch)
    return ckpt.params, ckpt.epoch, records


def run_experiment(
    cfg: ExperimentConfig, root: Path | None = None, resume: bool = False
) -> list[MetricsRecord]:
    prepared = prepare_experiment(cfg, root)
    net, splits, mask = prepared.net, prepared.splits, prepared.mask
    out_dir = prepared.out_dir
    toggles = cfg.metrics

    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / NETWORK_FILE).write_text(serialize_network(net), encoding="utf-8")
    save_plan(prepared.plan, out_dir / PLAN_FILE)
    save_mask(mask, out_dir / MASK_FILE, out_dir / MASK_SUMMARY_FILE)

    def snapshot(
        params: ParamState, epoch: int, train_loss: float | None
    ) -> MetricsRecord:
        return evaluate(
            params,
            mask,
            splits.test,
            toggles,
            run=cfg.name,
            method=cfg.sparsity.method,
            epoch=epoch,
            train_loss=train_loss,
            ood_noise=splits.ood_noise,
            ood_heldout=splits.ood_heldout,
            grad_batch=scoring_batch(cfg, splits),
        )

    resumed = _resume_state(prepared, out_dir) if resume else None
    if resumed is not None:
        params, start, records = resumed
    else:
        params = apply_mask(init_params(net, cfg.init_seed), mask)
        start, records = 0, [snapshot(params, 0, None)]
    metrics_path = out_dir / METRICS_FILE
    _write_records(metrics_path, records)

    def on_epoch(epoch: int, params: ParamState, train_loss: float) -> None:
        done = epoch + 1
        if not np.isfinite(train_loss):
            raise RunFailure(f"{cfg.name}: training loss diverged in epoch {done}")
        if done % toggles.eval_every == 0 or done == cfg.train.epochs:
            record = snapshot(params, done, train_loss)
            records.append(record)
            _append_record(metrics_path, record)
        rng = layer_generator(cfg.order_seed, ORDER_STREAM, done)
        rng_state = {
            "order_seed": cfg.order_seed,
            "next_epoch": rng.bit_generator.state,
        }
        save_checkpoint(
            Checkpoint(params, mask, done, rng_state),
            out_dir / CHECKPOINT_FILE,
        )

    params = fit(params, mask, splits.train, cfg.train, cfg.order_seed, on_epoch, start)

    summary = pd.DataFrame(
        [r.model_dump() for r in records], columns=list(RECORD_COLUMNS)
    )
    summary.to_csv(out_dir / SUMMARY_FILE, index=False)
    logits = predict_logits(params, mask, splits.test.inputs, config.eval_batch_size)
    probs = softmax(logits, axis=1)
    reliability_table(probs, splits.test.labels, toggles.ece_bins).to_csv(
        out_dir / RELIABILITY_FILE, index=False
    )
    logger.info("%s finished: accuracy %.4f", cfg.name, records[-1].clean_accuracy)
    return records
