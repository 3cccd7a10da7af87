"""Plot-ready tables from metric records and sweep summaries.

Every table is long-format CSV: one row per (method, x) point with the mean,
standard deviation and run count of one metric over the final records of
all matching runs. Rendering is left to whatever reads the CSVs.
"""

from __future__ import annotations

from logging import getLogger
from pathlib import Path

import pandas as pd
from pydantic import ValidationError

from randprune.exceptions import ArtifactError
from randprune.models import MetricsRecord

__all__ = (
    "PLOT_AXES",
    "PLOT_METRICS",
    "load_records",
    "collect_records",
    "final_records",
    "emit_plot_data",
    "gap_table",
    "write_plot_data",
)

logger = getLogger(__name__)

PLOT_AXES = ("params", "flops", "sparsity")
PLOT_METRICS = (
    "clean_accuracy",
    "ece",
    "nll",
    "fgsm_accuracy",
    "ood_auc",
    "ood_auc_heldout",
    "grad_flow_norm",
)
METRICS_FILE = "metrics.jsonl"


def load_records(path: Path) -> list[MetricsRecord]:
    """Records of one JSON-lines file."""
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as err:
        raise ArtifactError(f"cannot read {path}: {err}") from None
    try:
        return [MetricsRecord.model_validate_json(line) for line in lines if line]
    except ValidationError as err:
        message = err.errors()[0]["msg"]
        raise ArtifactError(f"{path}: malformed record: {message}") from None


def collect_records(path: Path) -> list[MetricsRecord]:
    """Records of a metrics file, or of every run found below a directory."""
    if path.is_file():
        return load_records(path)
    files = sorted(path.rglob(METRICS_FILE))
    if not files:
        raise ArtifactError(f"no {METRICS_FILE} below {path}")
    return [record for file in files for record in load_records(file)]


def final_records(records: list[MetricsRecord]) -> list[MetricsRecord]:
    """Last snapshot of every run, in first-seen run order."""
    last: dict[str, MetricsRecord] = {}
    for record in records:
        if record.run not in last or record.epoch >= last[record.run].epoch:
            last[record.run] = record
    return list(last.values())


def emit_plot_data(records: list[MetricsRecord]) -> dict[str, pd.DataFrame]:
    """Tables named ``<metric>_vs_<x>`` for x in params, flops and sparsity.

    Metrics switched off in every run are left out."""
    if not records:
        raise ArtifactError("no metric records to plot")
    frame = pd.DataFrame([r.model_dump() for r in final_records(records)])
    tables = {}
    for metric in PLOT_METRICS:
        points = frame.dropna(subset=[metric])
        if points.empty:
            continue
        for axis in PLOT_AXES:
            table = (
                points.groupby(["method", axis], sort=True)[metric]
                .agg(["mean", "std", "count"])
                .reset_index()
                .rename(
                    columns={
                        "mean": metric,
                        "std": f"{metric}_std",
                        "count": "runs",
                    }
                )
            )
            tables[f"{metric}_vs_{axis}"] = table
    return tables


def gap_table(summary: pd.DataFrame) -> pd.DataFrame:
    """Dense minus sparse accuracy per grid value of a sweep summary."""
    needed = {"value", "dense_accuracy", "clean_accuracy_mean", "accuracy_gap"}
    if missing := needed - set(summary.columns):
        raise ArtifactError(f"sweep summary lacks columns {sorted(missing)}")
    table = summary[["value", "dense_accuracy", "clean_accuracy_mean", "accuracy_gap"]]
    table = table.rename(
        columns={"clean_accuracy_mean": "sparse_accuracy", "accuracy_gap": "gap"}
    )
    return table.sort_values("value", kind="stable").reset_index(drop=True)


def write_plot_data(tables: dict[str, pd.DataFrame], out_dir: Path) -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name, table in sorted(tables.items()):
        path = out_dir / f"{name}.csv"
        table.to_csv(path, index=False)
        written.append(path)
    logger.info("wrote %d plot tables to %s", len(written), out_dir)
    return written
