from __future__ import annotations

from logging import getLogger
from time import monotonic

import pandas as pd
from fastapi import APIRouter, Request, Response
from fastapi.concurrency import run_in_threadpool

from randprune.config import config
from randprune.exceptions import ArtifactError
from randprune.models import MetricsRecord
from randprune.runner.plotdata import emit_plot_data, load_records

# Metadata at the top for instant accessibility
metadata = {
    "name": "runs",
    "description": "Read-only access to finished and running experiments",
}

router = APIRouter(prefix="/runs", tags=["runs"])
logger = getLogger(__name__)


class ExpiringRunCache:
    """Records of every run below the output root, re-read at most once per
    ``period`` seconds unless ``app.state.force_expire`` is set."""

    period: float
    last_update: float
    data: dict[str, list[MetricsRecord]]

    def __init__(self, period: float) -> None:
        self.period = period
        self.last_update = 0
        self.data = {}

    def _read_all(self) -> dict[str, list[MetricsRecord]]:
        index = {}
        for path in sorted(config.output_root.rglob("metrics.jsonl")):
            try:
                records = load_records(path)
            except ArtifactError:
                logger.exception("skipping unreadable %s", path)
                continue
            if records:
                index[records[0].run] = records
        return index

    async def _do_update(self) -> None:
        # File IO stays off the event loop
        self.data = await run_in_threadpool(self._read_all)
        self.last_update = monotonic()

    async def get_runs(self, req: Request) -> dict[str, list[MetricsRecord]]:
        if (
            getattr(req.app.state, "force_expire", False)
            or (monotonic() - self.last_update) > self.period  # noqa: W503
        ):
            await self._do_update()
            req.app.state.force_expire = False
        return self.data


gcache = ExpiringRunCache(config.run_cache_period)


def _summary(records: list[MetricsRecord]) -> dict:
    last = records[-1]
    return {
        "run": last.run,
        "method": last.method,
        "epoch": last.epoch,
        "clean_accuracy": last.clean_accuracy,
        "sparsity": last.sparsity,
        "params": last.params,
    }


def _json_table(table: pd.DataFrame) -> list[dict]:
    # NaN is not valid JSON
    return table.astype(object).where(table.notna(), None).to_dict("records")


@router.get("")
async def list_runs(req: Request):
    runs = await gcache.get_runs(req)
    return [_summary(records) for records in runs.values()]


@router.get("/{name:path}/metrics")
async def run_metrics(name: str, req: Request, response: Response):
    records = (await gcache.get_runs(req)).get(name)
    if records is None:
        response.status_code = 404
        return {"msg_code": config.msg_codes["run_not_found"]}
    return [record.model_dump() for record in records]


@router.get("/{name:path}/plotdata")
async def run_plot_data(name: str, req: Request, response: Response):
    records = (await gcache.get_runs(req)).get(name)
    if records is None:
        response.status_code = 404
        return {"msg_code": config.msg_codes["run_not_found"]}
    tables = emit_plot_data(records)
    return {name: _json_table(table) for name, table in tables.items()}
