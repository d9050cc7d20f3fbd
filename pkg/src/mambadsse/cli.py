"""Command-line interface: simulate, train, eval, ablate, bench.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import experiments as ex
from .config import ConfigError, RunConfig, load_config
from .dataset import Normalizer, input_dim, load_dataset, make_windows, save_dataset
from .model import ModelConfig, build_model
from .optim import load_checkpoint, save_checkpoint
from .rng import MASK64, stream
from .training import (
    evaluate,
    mean_predictor,
    persistence_predictor,
    train,
    write_per_bus_csv,
    write_predictions_csv,
)

log = logging.getLogger("mambadsse")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _seed(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"invalid seed {text!r}") from exc
    if not 0 <= v <= MASK64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mambadsse", description="Learned state estimation for synthetic radial feeders.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out_required=True):
        sp.add_argument("--config", type=Path, help="JSON run configuration (strict)")
        sp.add_argument("--seed", type=_seed, default=0, help="unsigned 64-bit seed (default 0)")
        sp.add_argument("--out", type=Path, required=out_required, help="output directory")

    sp = sub.add_parser("simulate", help="generate a feeder, simulate it, write a dataset directory")
    common(sp)

    sp = sub.add_parser("train", help="train one model; writes checkpoint.ckpt and loss.csv")
    common(sp)
    sp.add_argument("--variant", choices=["dsse", "mixer"], help="overrides model.variant")
    sp.add_argument("--data", type=Path, help="dataset directory from 'simulate' (default: simulate from config)")

    sp = sub.add_parser("eval", help="score a checkpoint; writes metrics.json, per_bus.csv, predictions.csv")
    sp.add_argument("--checkpoint", type=Path, required=True)
    sp.add_argument("--data", type=Path, help="dataset directory (default: the one recorded at training time)")
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--stride", type=int, default=1, help="score every k-th test window")

    sp = sub.add_parser("ablate", help="run an experiment sweep; writes results.csv and summary.csv")
    sp.add_argument("kind", choices=[k for k in ex.KINDS])
    common(sp)

    sp = sub.add_parser("bench", help="time single-window inference; writes results.csv and summary.csv")
    common(sp)
    return p


def _config(args) -> RunConfig:
    if args.config is None:
        return RunConfig()
    if not args.config.is_file():
        raise UsageError(f"config file not found: {args.config}")
    return load_config(args.config)


def cmd_simulate(args) -> None:
    cfg = _config(args)
    data = ex.prepare_data(cfg.feeder, args.seed)
    meta = {"seed": args.seed, "feeder": cfg.to_dict()["feeder"]}
    save_dataset(args.out, data.case, data.series, data.frames, data.split, meta, cfg.feeder.csv_export)


def _load_data(path: Path) -> ex.Data:
    case, series, frames, split, _ = load_dataset(path)
    return ex.Data(case, series, frames, split)


def cmd_train(args) -> None:
    cfg = _config(args)
    if args.variant:
        cfg.model = replace(cfg.model, variant=args.variant)
    if args.data:
        data = _load_data(args.data)
        data_ref = str(args.data.resolve())
    else:
        data = ex.prepare_data(cfg.feeder, args.seed)
        data_ref = None
    norm = Normalizer.fit(data.series, data.frames, data.split)
    windows = make_windows(data.series, data.frames, norm, data.split.train, cfg.model.window)
    mcfg = cfg.model.build(data.n_buses, input_dim(len(data.frames.observed)), cfg.train.lambda_rec)
    model = build_model(mcfg, stream(args.seed, "init"))
    tcfg = replace(cfg.train, seed=args.seed)
    result = train(model, windows, tcfg, norm=norm)
    args.out.mkdir(parents=True, exist_ok=True)
    result.write_csv(args.out / "loss.csv")
    meta = {
        "seed": args.seed,
        "config": cfg.to_dict(),
        "model": asdict(mcfg),
        "normalizer": norm.to_dict(),
        "data": data_ref,
        "n_parameters": model.num_parameters(),
    }
    save_checkpoint(args.out / "checkpoint.ckpt", model.named_parameters(), meta, result.optimizer.state)


def cmd_eval(args) -> None:
    if args.stride < 1:
        raise UsageError("--stride must be >= 1")
    params, meta, _ = load_checkpoint(args.checkpoint)
    cfg = RunConfig.from_dict(meta["config"])
    mcfg = ModelConfig(**meta["model"])
    if args.data:
        data = _load_data(args.data)
    elif meta.get("data"):
        data = _load_data(Path(meta["data"]))
    else:
        data = ex.prepare_data(cfg.feeder, int(meta["seed"]))
    norm = Normalizer.from_dict(meta["normalizer"])
    model = build_model(mcfg, np.random.default_rng(0))
    model.load_arrays(params)
    ws = make_windows(data.series, data.frames, norm, data.split.test, mcfg.window)
    report, true, pred = evaluate(model, ws, norm, args.stride)
    summary = report.to_dict()
    summary["variant"] = mcfg.variant
    summary["mean_predictor_vm_mae"] = mean_predictor(ws, norm, args.stride).vm_mae
    summary["persistence_vm_mae"] = persistence_predictor(ws, data.frames, norm, data.n_buses, args.stride).vm_mae
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "metrics.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    write_per_bus_csv(report, args.out / "per_bus.csv")
    steps = ws.offset + np.arange(ws.window - 1, ws.inputs.shape[0], args.stride)
    write_predictions_csv(args.out / "predictions.csv", true, pred, steps, data.series.resolution_minutes)


def cmd_ablate(args, kind: str | None = None) -> None:
    cfg = _config(args)
    cfg.experiment = ex.with_seed_offset(cfg.experiment, args.seed)
    rows = ex.run_experiment(kind or args.kind, cfg, args.out)
    failed = sum(r["status"] != "ok" for r in rows)
    if failed:
        log.warning("%d of %d cells failed; see results.csv", failed, len(rows))


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "bench": lambda a: cmd_ablate(a, "bench"),
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"mambadsse: error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"mambadsse: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"mambadsse: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
