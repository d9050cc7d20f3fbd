"""Training loop, learning-rate schedule, metrics, and reference predictors."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .dataset import Normalizer, WindowSet
from .feeder import MeasurementFrames
from .model import WindowSample
from .optim import Adam
from .rng import stream

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-2
    batch_size: int = 64
    warmup_fraction: float = 0.08
    total_steps: int = 5000
    seed: int = 0
    lambda_rec: float = 0.5
    val_every: int = 100
    val_windows: int = 256
    val_fraction: float = 0.1
    eval_stride: int = 1

    def __post_init__(self):
        if not 0.0 < self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must lie in (0, 1)")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.total_steps < 1 or self.batch_size < 1:
            raise ValueError("total_steps and batch_size must be positive")


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warm-up to ``cfg.lr`` over the warm-up fraction, then cosine decay to 0."""
    total = cfg.total_steps
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    warm = cfg.warmup_fraction * total
    if step < warm:
        return cfg.lr * step / warm
    progress = (step - warm) / max(total - warm, 1e-12)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))


@dataclass
class TrainResult:
    curve: list[dict] = field(default_factory=list)
    steps: int = 0
    optimizer: Adam | None = None

    def loss_at(self, step: int) -> float:
        return next(r["loss"] for r in self.curve if r["step"] == step)

    def write_csv(self, path) -> None:
        cols = ["step", "lr", "loss", "val_mae"]
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(cols)
            for r in self.curve:
                w.writerow([r["step"], repr(r["lr"]), repr(r["loss"]), "" if r.get("val_mae") is None else repr(r["val_mae"])])


def split_validation(ws: WindowSet, fraction: float) -> tuple[WindowSet, WindowSet | None]:
    """Carve the tail of a training segment into a held-out validation segment."""
    T = ws.inputs.shape[0]
    n_val = int(round(T * fraction))
    if fraction <= 0 or n_val < ws.window or T - n_val < ws.window:
        return ws, None
    cut = T - n_val
    head = WindowSet(ws.inputs[:cut], ws.targets[:cut], ws.states[:cut], ws.window, ws.offset)
    tail = WindowSet(ws.inputs[cut:], ws.targets[cut:], ws.states[cut:], ws.window, ws.offset + cut)
    return head, tail


def train(model, windows: WindowSet, cfg: TrainConfig, norm: Normalizer | None = None, validate: bool = True) -> TrainResult:
    """Mini-batch Adam with warm-up + cosine schedule; returns the loss curve."""
    train_ws, val_ws = split_validation(windows, cfg.val_fraction) if validate else (windows, None)
    params = model.named_parameters()
    opt = Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = stream(cfg.seed, "shuffle")
    n_win = train_ws.n_windows
    order = rng.permutation(n_win)
    cursor = 0
    result = TrainResult()
    val_starts = None
    if val_ws is not None and norm is not None:
        ends = val_ws.ends()
        pick = np.linspace(0, len(ends) - 1, min(cfg.val_windows, len(ends))).round().astype(int)
        val_starts = ends[pick] - val_ws.window + 1
    for step in range(1, cfg.total_steps + 1):
        if cursor + cfg.batch_size > n_win:
            order = rng.permutation(n_win)
            cursor = 0
        starts = order[cursor:cursor + cfg.batch_size]
        cursor += cfg.batch_size
        x, y = train_ws.batch(starts)
        opt.zero_grad()
        try:
            loss = model.loss(WindowSample(x, y))
        except ag.NonFiniteError as exc:
            raise TrainingError(f"non-finite value at step {step}: {exc}; config={json.dumps(asdict(cfg))}") from exc
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingError(f"non-finite loss at step {step}; config={json.dumps(asdict(cfg))}")
        ag.backward(loss)
        lr = lr_at(step, cfg)
        opt.step(lr)
        row = {"step": step, "lr": lr, "loss": value, "val_mae": None}
        if val_starts is not None and (step % cfg.val_every == 0 or step == cfg.total_steps):
            pred = predict_windows(model, val_ws, val_starts)
            true = val_ws.states[val_starts + val_ws.window - 1]
            row["val_mae"] = float(np.abs(norm.to_physical(pred) - true).mean())
            log.info("step %d loss %.5f val_mae %.3e", step, value, row["val_mae"])
        result.curve.append(row)
    result.steps = cfg.total_steps
    result.optimizer = opt
    return result


def predict_windows(model, ws: WindowSet, starts: np.ndarray, batch: int = 256) -> np.ndarray:
    """Normalized final-step predictions for windows starting at ``starts``."""
    out = []
    with ag.no_grad():
        for i in range(0, len(starts), batch):
            x, _ = ws.batch(starts[i:i + batch])
            out.append(model(x).prediction.data)
    return np.concatenate(out, axis=0) if out else np.zeros((0, ws.targets.shape[1]))


# ---------------------------------------------------------------------------
# metrics


@dataclass
class MetricsReport:
    mae: float
    rmse: float
    vm_mae: float
    vm_rmse: float
    va_mae: float
    va_rmse: float
    n: int
    per_bus: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("per_bus")
        return d


def metrics(true: np.ndarray, pred: np.ndarray) -> MetricsReport:
    """MAE and root-mean-square error over state vectors laid out [vm(n), va(n)]."""
    true = np.atleast_2d(true)
    pred = np.atleast_2d(pred)
    if true.size == 0:
        raise ValueError("metrics: empty evaluation set")
    if true.shape != pred.shape:
        raise ValueError(f"metrics: shape mismatch {true.shape} vs {pred.shape}")
    err = pred - true
    n = true.shape[1] // 2
    mae = lambda e: float(np.abs(e).mean())  # noqa: E731
    rmse = lambda e: float(np.sqrt((e * e).mean()))  # noqa: E731
    per_bus = []
    for qi, qname in enumerate(("vm", "va")):
        for b in range(n):
            e = np.abs(err[:, qi * n + b])
            q1, med, q3 = np.percentile(e, [25, 50, 75])
            per_bus.append({"bus": b, "quantity": qname, "mae": float(e.mean()), "median": float(med),
                            "q1": float(q1), "q3": float(q3), "max": float(e.max())})
    return MetricsReport(mae(err), rmse(err), mae(err[:, :n]), rmse(err[:, :n]), mae(err[:, n:]), rmse(err[:, n:]),
                         int(true.shape[0]), per_bus)


def evaluation_starts(ws: WindowSet, stride: int = 1, first_end: int | None = None) -> np.ndarray:
    """Window starts for every ``stride``-th final step, from ``first_end`` (segment index) on."""
    lo = ws.window - 1 if first_end is None else max(ws.window - 1, int(first_end))
    return np.arange(lo, ws.inputs.shape[0], stride) - ws.window + 1


def evaluate(model, ws: WindowSet, norm: Normalizer, stride: int = 1,
             first_end: int | None = None) -> tuple[MetricsReport, np.ndarray, np.ndarray]:
    """Metrics on final-step predictions of every ``stride``-th window; also returns (true, pred)."""
    starts = evaluation_starts(ws, stride, first_end)
    if len(starts) == 0:
        raise ValueError("evaluate: empty test set")
    pred = norm.to_physical(predict_windows(model, ws, starts))
    true = ws.states[starts + ws.window - 1]
    return metrics(true, pred), true, pred


def mean_predictor(ws: WindowSet, norm: Normalizer, stride: int = 1, first_end: int | None = None) -> MetricsReport:
    """Training-mean state at every bus."""
    starts = evaluation_starts(ws, stride, first_end)
    true = ws.states[starts + ws.window - 1]
    return metrics(true, np.broadcast_to(norm.out_mean, true.shape))


def persistence_predictor(ws: WindowSet, frames: MeasurementFrames, norm: Normalizer, n_buses: int,
                          stride: int = 1, first_end: int | None = None) -> MetricsReport:
    """Last observed frame as-is: sensed buses keep their latest noisy reading, the rest the training mean."""
    starts = evaluation_starts(ws, stride, first_end)
    last = ws.offset + starts + ws.window - 1
    pred = np.tile(norm.out_mean, (len(starts), 1))
    obs = frames.observed
    pred[:, obs] = frames.vm[last]
    pred[:, n_buses + obs] = frames.va[last]
    true = ws.states[starts + ws.window - 1]
    return metrics(true, pred)


def write_per_bus_csv(report: MetricsReport, path) -> None:
    cols = ["bus", "quantity", "mae", "median", "q1", "q3", "max"]
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=cols)
        w.writeheader()
        for row in report.per_bus:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def write_predictions_csv(path, true: np.ndarray, pred: np.ndarray, steps: np.ndarray, resolution_minutes: int) -> None:
    n = true.shape[1] // 2
    with open(Path(path), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["timestamp_min", "bus", "vm_true", "vm_pred", "va_true", "va_pred"])
        for row, step in enumerate(steps):
            for b in range(n):
                w.writerow([int(step) * resolution_minutes, b, repr(float(true[row, b])), repr(float(pred[row, b])),
                            repr(float(true[row, n + b])), repr(float(pred[row, n + b]))])
