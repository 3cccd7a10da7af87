"""Grid sweeps over depth, width, global sparsity or ratio method.

Every grid value runs ``repeats`` times with mask, init and data-order seeds
all shifted by the repeat index. Dense baselines go through the same code
path as S=0 plans: one group per grid value when the grid changes the
network (depth, width), a single shared group otherwise.

A sweep directory holds ``sweep.jsonl`` (final record of every cell, failed
cells with their error) and ``sweep_summary.csv`` (mean and std per grid
value plus the dense-minus-sparse accuracy gap). A failing cell is logged
and recorded; the other cells still run.
"""

from __future__ import annotations

import asyncio
import json
import typing as t
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from logging import getLogger
from pathlib import Path

import pandas as pd
from pydantic import ValidationError

from randprune.exceptions import ConfigError
from randprune.models import METRIC_COLUMNS, ExperimentConfig, SweepSpec
from randprune.runner.experiment import read_toml, resolve_output_dir, run_experiment

__all__ = (
    "Cell",
    "load_sweep",
    "expand_sweep",
    "summarize_sweep",
    "run_sweep",
)

logger = getLogger(__name__)

SWEEP_RECORDS_FILE = "sweep.jsonl"
SWEEP_SUMMARY_FILE = "sweep_summary.csv"

GridValue = t.Union[float, int, str]


@dataclass(frozen=True)
class Cell:
    cell_id: str
    value: GridValue | None  # None for the shared dense group
    repeat: int
    dense: bool
    config: ExperimentConfig


def load_sweep(path: Path) -> tuple[SweepSpec, ExperimentConfig]:
    """A sweep file is an experiment config plus a ``[sweep]`` table."""
    data = read_toml(path)
    sweep = data.pop("sweep", None)
    if not isinstance(sweep, dict):
        raise ConfigError(f"{path}: missing [sweep] table")
    try:
        return SweepSpec.model_validate(sweep), ExperimentConfig.model_validate(data)
    except ValidationError as err:
        first = err.errors()[0]
        where = ".".join(str(part) for part in first["loc"])
        raise ConfigError(f"{path}: {where}: {first['msg']}") from None


def _cell_config(
    base: ExperimentConfig,
    label: str,
    repeat: int,
    changes: dict[str, dict[str, t.Any]],
) -> ExperimentConfig:
    data = base.model_dump()
    for section, values in changes.items():
        data[section].update(values)
    data["name"] = f"{base.name}/{label}/seed{repeat}"
    data["output_dir"] = base.output_dir / label / f"seed{repeat}"
    data["mask_seed"] = base.mask_seed + repeat
    data["init_seed"] = base.init_seed + repeat
    data["order_seed"] = base.order_seed + repeat
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as err:
        raise ConfigError(f"sweep cell {label}: {err.errors()[0]['msg']}") from None


def _axis_changes(axis: str, value: GridValue) -> dict[str, dict[str, t.Any]]:
    match axis:
        case "depth" | "width":
            return {"network": {axis: value}}
        case "sparsity":
            return {"sparsity": {"sparsity": value}}
    return {"sparsity": {"method": value}}


_DENSE = {"sparsity": {"method": "dense", "sparsity": 0.0, "ratio_file": None}}


def expand_sweep(spec: SweepSpec, base: ExperimentConfig) -> list[Cell]:
    """All cells of a sweep in execution order: sparse cells grid value by
    grid value, then the dense baselines."""
    if spec.axis in ("depth", "width") and base.network.family is None:
        raise ConfigError(f"a {spec.axis} sweep needs a generated network family")
    cells = []
    for value in spec.values:
        label = f"{spec.axis}={value}"
        changes = _axis_changes(spec.axis, value)
        for repeat in range(spec.repeats):
            config = _cell_config(base, label, repeat, changes)
            cells.append(Cell(config.name, value, repeat, False, config))

    if spec.axis in ("depth", "width"):
        groups: list[tuple[GridValue | None, str, dict]] = [
            (
                value,
                f"{spec.axis}={value}/dense",
                {**_axis_changes(spec.axis, value), **_DENSE},
            )
            for value in spec.values
        ]
    else:
        groups = [(None, "dense", _DENSE)]
    for value, label, changes in groups:
        for repeat in range(spec.baseline_repeats):
            config = _cell_config(base, label, repeat, changes)
            cells.append(Cell(config.name, value, repeat, True, config))
    return cells


def _run_cell(cell: Cell, root: Path | None) -> dict[str, t.Any]:
    records = run_experiment(cell.config, root)
    return _row(cell) | records[-1].model_dump()


def _row(cell: Cell, error: str | None = None) -> dict[str, t.Any]:
    return {
        "cell": cell.cell_id,
        "value": cell.value,
        "repeat": cell.repeat,
        "dense": cell.dense,
        "error": error,
    }


def _failed(cell: Cell, err: Exception) -> dict[str, t.Any]:
    logger.exception("sweep cell %s failed", cell.cell_id, exc_info=err)
    return _row(cell, f"{type(err).__name__}: {err}")


async def _run_parallel(
    cells: list[Cell], root: Path | None, workers: int
) -> list[dict[str, t.Any]]:
    loop = asyncio.get_running_loop()
    results: dict[str, dict[str, t.Any]] = {}

    async def guarded(pool: ProcessPoolExecutor, cell: Cell) -> None:
        logger.info("starting %s", cell.cell_id)
        try:
            results[cell.cell_id] = await loop.run_in_executor(
                pool, _run_cell, cell, root
            )
        except Exception as err:
            results[cell.cell_id] = _failed(cell, err)
        else:
            logger.info("finished %s", cell.cell_id)

    with ProcessPoolExecutor(max_workers=workers) as pool:
        async with asyncio.TaskGroup() as tg:
            for cell in cells:
                tg.create_task(guarded(pool, cell))
    # Keyed by cell id, so completion order does not matter
    return [results[cell.cell_id] for cell in cells]


def _run_sequential(cells: list[Cell], root: Path | None) -> list[dict[str, t.Any]]:
    rows = []
    for cell in cells:
        logger.info("starting %s", cell.cell_id)
        try:
            rows.append(_run_cell(cell, root))
        except Exception as err:
            rows.append(_failed(cell, err))
        else:
            logger.info("finished %s", cell.cell_id)
    return rows


def summarize_sweep(rows: pd.DataFrame, axis: str) -> pd.DataFrame:
    """Mean and sample std (NaN for a single run) of every metric per grid
    value, plus the dense baseline accuracy and the gap to it."""
    failed = rows["error"].notna()
    ok = rows[~failed]
    sparse = ok[~ok["dense"].astype(bool)]
    dense = ok[ok["dense"].astype(bool)]
    values = list(dict.fromkeys(rows.loc[~rows["dense"].astype(bool), "value"]))

    metrics = [c for c in METRIC_COLUMNS if c in sparse and sparse[c].notna().any()]
    summary = pd.DataFrame({"value": values})
    grouped = sparse.groupby("value", sort=False)
    summary["runs"] = summary["value"].map(grouped.size()).fillna(0).astype(int)
    failures = rows[failed & ~rows["dense"].astype(bool)].groupby("value").size()
    summary["failed"] = summary["value"].map(failures).fillna(0).astype(int)
    for metric in metrics:
        stats = grouped[metric].agg(["mean", "std"])
        summary[f"{metric}_mean"] = summary["value"].map(stats["mean"])
        summary[f"{metric}_std"] = summary["value"].map(stats["std"])

    if dense.empty or "clean_accuracy" not in dense:
        summary["dense_accuracy"] = float("nan")
    elif axis in ("depth", "width"):
        baseline = dense.groupby("value")["clean_accuracy"].mean()
        summary["dense_accuracy"] = summary["value"].map(baseline)
    else:
        summary["dense_accuracy"] = dense["clean_accuracy"].mean()
    if "clean_accuracy_mean" in summary:
        summary["accuracy_gap"] = (
            summary["dense_accuracy"] - summary["clean_accuracy_mean"]
        )
    return summary


def run_sweep(
    spec: SweepSpec, base: ExperimentConfig, root: Path | None = None
) -> pd.DataFrame:
    """Run every cell of the sweep; returns the summary table."""
    out_dir = resolve_output_dir(base, root)
    cells = expand_sweep(spec, base)
    logger.info("%s sweep over %s: %d cells", spec.axis, spec.values, len(cells))
    if spec.workers == 1:
        rows = _run_sequential(cells, root)
    else:
        rows = asyncio.run(_run_parallel(cells, root, spec.workers))

    out_dir.mkdir(parents=True, exist_ok=True)
    with (out_dir / SWEEP_RECORDS_FILE).open("w", encoding="utf-8") as fp:
        for row in rows:
            fp.write(json.dumps(row, sort_keys=True) + "\n")
    summary = summarize_sweep(pd.DataFrame(rows), spec.axis)
    summary.to_csv(out_dir / SWEEP_SUMMARY_FILE, index=False)
    failed = sum(row["error"] is not None for row in rows)
    if failed:
        logger.warning("%d of %d sweep cells failed", failed, len(rows))
    return summary
