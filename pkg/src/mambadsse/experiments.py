"""Experiment runners: data preparation, single cells, and the ablation sweeps.

Every sweep writes a tidy ``results.csv`` (one row per variant x cell x seed)
and a ``summary.csv`` with mean and standard deviation across seeds. A cell
that raises is recorded with ``status=failed`` and its error message.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import feeder
from .config import ExperimentConfig, FeederConfig, RunConfig
from .dataset import Normalizer, Split, WindowSet, input_dim, make_windows
from .model import build_model
from .rng import stream
from .training import (
    MetricsReport,
    TrainConfig,
    evaluate,
    mean_predictor,
    persistence_predictor,
    train,
)

log = logging.getLogger(__name__)

KINDS = ("scalability", "sampling", "seqlen", "pv_fraction", "bench")
VARIANTS = ("dsse", "mixer")
METRIC_FIELDS = ("mae", "rmse", "vm_mae", "vm_rmse", "va_mae", "va_rmse")


@dataclass
class Data:
    case: feeder.FeederCase
    series: feeder.GroundTruthSeries
    frames: feeder.MeasurementFrames
    split: Split

    @property
    def n_buses(self) -> int:
        return self.case.n_buses


def prepare_data(fc: FeederConfig, seed: int) -> Data:
    """Generate a feeder, simulate it, and sense it, all from the seed's streams."""
    case = feeder.generate_case(fc.n_buses, fc.pv_fraction, rng=stream(seed, "data", 0))
    series = feeder.simulate(case, fc.days, fc.resolution_minutes, rng=stream(seed, "data", 1))
    frames = feeder.observe(series, fc.observability, sigma_v_range=tuple(fc.sigma_v_range), sigma_pq=fc.sigma_pq,
                            sigma_i=fc.sigma_i, rng=stream(seed, "noise", 0))
    return Data(case, series, frames, Split.by_fraction(series.n_steps, fc.train_fraction))


@dataclass
class Trained:
    model: object
    norm: Normalizer
    train_windows: WindowSet
    test_windows: WindowSet
    curve: list


def fit(cfg: RunConfig, data: Data, seed: int, variant: str, window: int | None = None) -> Trained:
    """Normalize, window, build, and train one model on ``data``."""
    window = window or cfg.model.window
    norm = Normalizer.fit(data.series, data.frames, data.split)
    train_ws = make_windows(data.series, data.frames, norm, data.split.train, window)
    test_ws = make_windows(data.series, data.frames, norm, data.split.test, window)
    mcfg = replace(cfg.model, window=window).build(data.n_buses, input_dim(len(data.frames.observed)),
                                                  cfg.train.lambda_rec, variant)
    model = build_model(mcfg, stream(seed, "init"))
    result = train(model, train_ws, replace(cfg.train, seed=seed), norm=norm)
    return Trained(model, norm, train_ws, test_ws, result.curve)


def _row(kind: str, cell: str, seed: int, variant: str, **extra) -> dict:
    return {"kind": kind, "cell": cell, "seed": seed, "variant": variant, "status": "ok", "error": "", **extra}


def _metrics_fields(report: MetricsReport | None, prefix: str = "") -> dict:
    if report is None:
        return {prefix + k: float("nan") for k in METRIC_FIELDS}
    return {prefix + k: getattr(report, k) for k in METRIC_FIELDS}


def _failed(row: dict, exc: Exception, metric_keys) -> dict:
    log.warning("cell %s seed %s variant %s failed: %s", row["cell"], row["seed"], row["variant"], exc)
    row.update({k: float("nan") for k in metric_keys})
    row["status"] = "failed"
    row["error"] = f"{type(exc).__name__}: {exc}"
    return row


def standard_cell(cfg: RunConfig, kind: str, cell: str, fc: FeederConfig, seed: int,
                   window: int | None = None, first_end: int | None = None) -> list[dict]:
    """Both variants on one dataset: test metrics plus mean/persistence references."""
    rows = []
    try:
        data = prepare_data(fc, seed)
    except Exception as exc:  # noqa: BLE001
        return [_failed(_row(kind, cell, seed, v, n_buses=fc.n_buses), exc, METRIC_FIELDS) for v in VARIANTS]
    stride = cfg.experiment.eval_stride
    for variant in VARIANTS:
        row = _row(kind, cell, seed, variant, n_buses=fc.n_buses, window=window or cfg.model.window)
        try:
            tr = fit(cfg, data, seed, variant, window)
            report, _, _ = evaluate(tr.model, tr.test_windows, tr.norm, stride, first_end)
            row.update(_metrics_fields(report))
            row["mean_vm_mae"] = mean_predictor(tr.test_windows, tr.norm, stride, first_end).vm_mae
            row["persistence_vm_mae"] = persistence_predictor(tr.test_windows, data.frames, tr.norm, data.n_buses,
                                                              stride, first_end).vm_mae
            row["final_loss"] = tr.curve[-1]["loss"]
        except Exception as exc:  # noqa: BLE001
            _failed(row, exc, (*METRIC_FIELDS, "mean_vm_mae", "persistence_vm_mae", "final_loss"))
        rows.append(row)
    return rows


def run_scalability(cfg: RunConfig) -> list[dict]:
    rows = []
    for n in cfg.experiment.sizes:
        fc = replace(cfg.feeder, n_buses=n)
        for seed in cfg.experiment.seeds:
            rows += standard_cell(cfg, "scalability", f"n_buses={n}", fc, seed)
    return rows


def run_pv_fraction(cfg: RunConfig) -> list[dict]:
    rows = []
    for pv in cfg.experiment.pv_fractions:
        fc = replace(cfg.feeder, pv_fraction=pv)
        for seed in cfg.experiment.seeds:
            for r in standard_cell(cfg, "pv_fraction", f"pv_fraction={pv}", fc, seed):
                r["pv_fraction"] = pv
                rows.append(r)
    return rows


def run_seqlen(cfg: RunConfig) -> list[dict]:
    """Every window length is scored on the same final steps (those reachable by the longest window)."""
    rows = []
    longest = max(cfg.experiment.windows)
    for seed in cfg.experiment.seeds:
        for L in cfg.experiment.windows:
            rows += standard_cell(cfg, "seqlen", f"window={L}", cfg.feeder, seed, window=L, first_end=longest - 1)
    return rows


def decimated_test(data: Data, norm: Normalizer, factor: int, window: int) -> tuple[WindowSet, feeder.MeasurementFrames]:
    """Test windows after stride decimation of the whole series by ``factor``."""
    series = feeder.resample(data.series, factor)
    frames = feeder.resample(data.frames, factor)
    split = data.split.scaled(factor)
    hi = min(split.test[1], series.n_steps)
    return make_windows(series, frames, norm, (split.test[0], hi), window), frames


def run_sampling(cfg: RunConfig) -> list[dict]:
    """Train at the base resolution, then score on decimated test streams."""
    rows = []
    fc = replace(cfg.feeder, resolution_minutes=cfg.experiment.base_resolution)
    factors = cfg.experiment.factors
    stride = cfg.experiment.eval_stride
    for seed in cfg.experiment.seeds:
        try:
            data = prepare_data(fc, seed)
        except Exception as exc:  # noqa: BLE001
            rows += [_failed(_row("sampling", f"factor={f}", seed, v, factor=f), exc, METRIC_FIELDS)
                     for v in VARIANTS for f in factors]
            continue
        for variant in VARIANTS:
            try:
                tr = fit(cfg, data, seed, variant)
            except Exception as exc:  # noqa: BLE001
                rows += [_failed(_row("sampling", f"factor={f}", seed, variant, factor=f), exc, METRIC_FIELDS)
                         for f in factors]
                continue
            for f in factors:
                row = _row("sampling", f"factor={f}", seed, variant, factor=f,
                           resolution_minutes=fc.resolution_minutes * f)
                try:
                    ws, _ = decimated_test(data, tr.norm, f, tr.test_windows.window)
                    # keep the number of scored windows comparable across factors
                    report, _, _ = evaluate(tr.model, ws, tr.norm, max(1, stride // f))
                    row.update(_metrics_fields(report))
                except Exception as exc:  # noqa: BLE001
                    _failed(row, exc, METRIC_FIELDS)
                rows.append(row)
    return rows


def inference_times(model, d_in: int, window: int, repeats: int, rng: np.random.Generator) -> np.ndarray:
    """Wall-clock seconds of one single-window forward pass, ``repeats`` times."""
    x = rng.normal(size=(1, window, d_in))
    times = np.empty(repeats)
    with ag.no_grad():
        model(x)  # warm-up
        for i in range(repeats):
            t0 = time.perf_counter()
            model(x)
            times[i] = time.perf_counter() - t0
    return times


def run_bench(cfg: RunConfig) -> list[dict]:
    rows = []
    seed = cfg.experiment.seeds[0]
    fc = cfg.feeder
    k = int(round(fc.observability * fc.n_buses))
    d_in = input_dim(max(k, 1))
    for variant in VARIANTS:
        for L in cfg.experiment.bench_windows:
            row = _row("bench", f"window={L}", seed, variant, n_buses=fc.n_buses, window=L,
                       repeats=cfg.experiment.bench_repeats)
            try:
                mcfg = replace(cfg.model, window=L).build(fc.n_buses, d_in, cfg.train.lambda_rec, variant)
                model = build_model(mcfg, stream(seed, "init"))
                t = inference_times(model, d_in, L, cfg.experiment.bench_repeats, stream(seed, "noise", 7))
                row.update(median_s=float(np.median(t)), p25_s=float(np.percentile(t, 25)),
                           p75_s=float(np.percentile(t, 75)), n_parameters=model.num_parameters())
            except Exception as exc:  # noqa: BLE001
                _failed(row, exc, ("median_s", "p25_s", "p75_s"))
            rows.append(row)
    return rows


RUNNERS = {
    "scalability": run_scalability,
    "sampling": run_sampling,
    "seqlen": run_seqlen,
    "pv_fraction": run_pv_fraction,
    "bench": run_bench,
}

# columns holding wall-clock measurements (not reproducible run to run)
WALL_CLOCK = ("median_s", "p25_s", "p75_s")


def summarize(rows: list[dict]) -> list[dict]:
    """Mean and (population) standard deviation across seeds per kind x cell x variant."""
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault((r["kind"], r["cell"], r["variant"]), []).append(r)
    numeric = [k for k in _columns(rows) if k not in ("kind", "cell", "seed", "variant", "status", "error")
               and all(isinstance(r.get(k), (int, float)) for r in rows if r.get(k) is not None)]
    out = []
    for (kind, cell, variant), members in groups.items():
        ok = [m for m in members if m["status"] == "ok"]
        row = {"kind": kind, "cell": cell, "variant": variant, "n_ok": len(ok), "n_failed": len(members) - len(ok)}
        for key in numeric:
            vals = np.array([m[key] for m in ok if key in m], dtype=np.float64)
            row[f"{key}_mean"] = float(vals.mean()) if vals.size else float("nan")
            row[f"{key}_std"] = float(vals.std()) if vals.size else float("nan")
        out.append(row)
    return out


def _columns(rows: list[dict]) -> list[str]:
    cols: list[str] = []
    for r in rows:
        for k in r:
            if k not in cols:
                cols.append(k)
    return cols


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else str(v)


def write_rows(rows: list[dict], path) -> None:
    cols = _columns(rows)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(cols)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in cols])


def run_experiment(kind: str, cfg: RunConfig, out_dir=None) -> list[dict]:
    """Run one sweep; with ``out_dir`` also write ``results.csv`` and ``summary.csv``."""
    if kind not in RUNNERS:
        raise ValueError(f"unknown experiment kind {kind!r}; expected one of {KINDS}")
    rows = RUNNERS[kind](cfg)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_rows(rows, out / "results.csv")
        write_rows(summarize(rows), out / "summary.csv")
    return rows


def with_seed_offset(exp: ExperimentConfig, base_seed: int) -> ExperimentConfig:
    return replace(exp, seeds=[base_seed + s for s in exp.seeds])
