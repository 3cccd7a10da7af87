"""Command line entry point.

Exit codes: 0 on success, 2 when an input fails validation, 3 when a run
fails at runtime.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import typing as t
from logging import getLogger
from pathlib import Path

import pandas as pd
import uvicorn

from randprune.alloc import (
    load_plan,
    load_ratios,
    plan_for,
    plan_from_ratios,
    save_plan,
)
from randprune.arch import parse_network
from randprune.config import config
from randprune.engine.saliency import grasp_ratios, snip_ratios
from randprune.exceptions import ConfigError, RandPruneError
from randprune.mask import mask_summary, sample_mask, save_mask
from randprune.models import NetworkSpec, SparsityPlan
from randprune.models.experiment import RATIO_METHODS
from randprune.runner.experiment import (
    load_experiment,
    load_inputs,
    run_experiment,
    scoring_batch,
)
from randprune.runner.plotdata import (
    collect_records,
    emit_plot_data,
    gap_table,
    write_plot_data,
)
from randprune.runner.sweep import SWEEP_SUMMARY_FILE, load_sweep, run_sweep

__all__ = ("main", "build_parser")

logger = getLogger(__name__)

EXIT_OK = 0
EXIT_FAILED = 3

_SCHEMES = tuple(m for m in RATIO_METHODS if m not in ("snip", "grasp", "external"))


def _read_network(path: Path) -> NetworkSpec:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as err:
        raise ConfigError(f"cannot read {path}: {err}") from None
    return parse_network(text)


def _plan_from_args(args: argparse.Namespace) -> SparsityPlan:
    net = _read_network(args.network)
    if args.ratios is not None:
        return plan_from_ratios(net, load_ratios(args.ratios, net))
    return plan_for(
        args.method,
        net,
        args.sparsity,
        last_density=args.last_density,
        power=args.power,
    )


def cmd_plan(args: argparse.Namespace) -> int:
    plan = _plan_from_args(args)
    if args.out is not None:
        save_plan(plan, args.out)
    print(plan.model_dump_json(indent=2))
    return EXIT_OK


def cmd_mask(args: argparse.Namespace) -> int:
    net = _read_network(args.network)
    plan = load_plan(args.plan) if args.plan is not None else _plan_from_args(args)
    mask = sample_mask(plan, net, args.seed, args.mode)
    save_mask(mask, args.out, args.out.with_suffix(".json"))
    print(json.dumps(mask_summary(mask), indent=2))
    return EXIT_OK


def cmd_ratios(args: argparse.Namespace) -> int:
    cfg = load_experiment(args.config)
    method = cfg.sparsity.method
    if method not in ("snip", "grasp"):
        raise ConfigError(f"ratio extraction needs snip or grasp, config has {method}")
    net, splits = load_inputs(cfg)
    batch = scoring_batch(cfg, splits)
    if method == "snip":
        ratios = snip_ratios(net, cfg.init_seed, batch, cfg.sparsity.sparsity)
    else:
        ratios = grasp_ratios(
            net,
            cfg.init_seed,
            batch,
            cfg.sparsity.sparsity,
            cfg.sparsity.grasp_prune_highest,
        )
    plan = plan_from_ratios(net, ratios)
    save_plan(plan, args.out)
    print(plan.model_dump_json(indent=2))
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    cfg = load_experiment(args.config)
    records = run_experiment(cfg, args.root, resume=args.resume)
    print(records[-1].model_dump_json(indent=2))
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    spec, base = load_sweep(args.config)
    summary = run_sweep(spec, base, args.root)
    print(summary.to_string(index=False))
    return EXIT_OK


def cmd_plotdata(args: argparse.Namespace) -> int:
    tables = emit_plot_data(collect_records(args.path))
    summary_path = args.path / SWEEP_SUMMARY_FILE
    if args.path.is_dir() and summary_path.exists():
        tables["accuracy_gap"] = gap_table(pd.read_csv(summary_path))
    base = args.path if args.path.is_dir() else args.path.parent
    out = args.out if args.out is not None else base / "plots"
    for path in write_plot_data(tables, out):
        print(path)
    return EXIT_OK


def cmd_serve(args: argparse.Namespace) -> int:
    uvicorn.run("randprune:app", host=args.host, port=args.port)
    return EXIT_OK


def _plan_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("network", type=Path, help="architecture document")
    parser.add_argument("--method", choices=_SCHEMES, default="erk")
    parser.add_argument("--sparsity", type=float, default=0.0)
    parser.add_argument("--last-density", type=float, default=1.0)
    parser.add_argument("--power", type=float, default=1.0)
    parser.add_argument("--ratios", type=Path, help="plan file to take densities from")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="randprune",
        description="Random pruning at initialization.",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", help="print a sparsity plan")
    _plan_arguments(p)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("mask", help="sample and write a mask")
    _plan_arguments(p)
    p.add_argument("--plan", type=Path, help="use a saved plan instead")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--mode", choices=("exact", "bernoulli"), default="exact")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_mask)

    p = sub.add_parser("ratios", help="extract SNIP/GraSP layer-wise ratios")
    p.add_argument("config", type=Path, help="experiment config (TOML)")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_ratios)

    p = sub.add_parser("train", help="run one experiment")
    p.add_argument("config", type=Path, help="experiment config (TOML)")
    p.add_argument("--root", type=Path, help="output root override")
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="run a grid sweep")
    p.add_argument("config", type=Path, help="sweep config (TOML)")
    p.add_argument("--root", type=Path, help="output root override")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("plotdata", help="write plot-ready CSV tables")
    p.add_argument("path", type=Path, help="run or sweep directory, or metrics.jsonl")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_plotdata)

    p = sub.add_parser("serve", help="serve the read-only API")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv: t.Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    verbose = args.verbose or config.development
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING)
    try:
        return args.func(args)
    except RandPruneError as err:
        print(f"randprune: {err}", file=sys.stderr)
        return err.exit_code
    except Exception:
        logger.exception("unexpected failure")
        return EXIT_FAILED
