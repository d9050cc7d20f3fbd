"""Model-ready windows, normalization, and the on-disk dataset format.

Encoder input per step: for every observed bus (ascending index) the five
normalized readings ``[vm, va, p, q, i]``, zero-filled when the frame is
missing, followed by one availability flag per observed bus.

Targets per step: all bus magnitudes then all bus angles, centered per channel
and scaled by a pooled standard deviation per quantity (magnitude, angle).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .feeder import FeederCase, GroundTruthSeries, MeasurementFrames

QUANTITIES = ("vm", "va", "p", "q", "i")
_STD_FLOOR = 1e-6


@dataclass
class Split:
    train: tuple[int, int]
    test: tuple[int, int]

    @classmethod
    def by_fraction(cls, n_steps: int, train_fraction: float = 2 / 3) -> "Split":
        cut = int(round(n_steps * train_fraction))
        return cls((0, cut), (cut, n_steps))

    def scaled(self, factor: int) -> "Split":
        """Split boundaries after stride decimation by ``factor``."""
        up = lambda i: -(-i // factor)  # noqa: E731
        return Split((up(self.train[0]), up(self.train[1])), (up(self.test[0]), up(self.test[1])))


@dataclass
class Normalizer:
    in_mean: np.ndarray      # (5k,)
    in_std: np.ndarray
    out_mean: np.ndarray     # (2n,)
    out_scale: np.ndarray    # (2n,)

    @classmethod
    def fit(cls, series: GroundTruthSeries, frames: MeasurementFrames, split: Split) -> "Normalizer":
        lo, hi = split.train
        vals = frames.values()[lo:hi]
        in_mean = vals.mean(axis=0)
        in_std = np.maximum(vals.std(axis=0), _STD_FLOOR)
        states = series.state_matrix()[lo:hi]
        out_mean = states.mean(axis=0)
        n = series.voltage.shape[1]
        dev = states - out_mean
        scale = np.empty(2 * n)
        scale[:n] = max(np.sqrt((dev[:, :n] ** 2).mean()), _STD_FLOOR)
        scale[n:] = max(np.sqrt((dev[:, n:] ** 2).mean()), _STD_FLOOR)
        return cls(in_mean, in_std, out_mean, scale)

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("in_mean", "in_std", "out_mean", "out_scale")}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(*(np.asarray(d[k], dtype=np.float64) for k in ("in_mean", "in_std", "out_mean", "out_scale")))

    def targets(self, states: np.ndarray) -> np.ndarray:
        return (states - self.out_mean) / self.out_scale

    def to_physical(self, y: np.ndarray) -> np.ndarray:
        return y * self.out_scale + self.out_mean


def input_dim(n_observed: int) -> int:
    return 6 * n_observed


def build_inputs(frames: MeasurementFrames, norm: Normalizer) -> np.ndarray:
    """(T, 6k) encoder inputs: normalized readings then per-bus availability flags."""
    k = len(frames.observed)
    vals = (frames.values() - norm.in_mean) / norm.in_std
    present = np.ones(frames.n_steps) if frames.present is None else frames.present.astype(np.float64)
    vals = vals * present[:, None]
    flags = np.repeat(present[:, None], k, axis=1)
    return np.concatenate([vals, flags], axis=1)


@dataclass
class WindowSet:
    """All length-L windows inside one contiguous segment of a series."""

    inputs: np.ndarray       # (T_seg, d_in)
    targets: np.ndarray      # (T_seg, 2n) normalized
    states: np.ndarray       # (T_seg, 2n) physical
    window: int
    offset: int = 0          # absolute step index of row 0

    @property
    def n_windows(self) -> int:
        return max(self.inputs.shape[0] - self.window + 1, 0)

    def ends(self, stride: int = 1) -> np.ndarray:
        """Absolute-in-segment index of each window's final step."""
        return np.arange(self.window - 1, self.inputs.shape[0], stride)

    def batch(self, starts: np.ndarray):
        idx = np.asarray(starts)[:, None] + np.arange(self.window)[None, :]
        return self.inputs[idx], self.targets[idx]


def make_windows(series: GroundTruthSeries, frames: MeasurementFrames, norm: Normalizer,
                 segment: tuple[int, int], window: int) -> WindowSet:
    lo, hi = segment
    inputs = build_inputs(frames, norm)[lo:hi]
    states = series.state_matrix()[lo:hi]
    ws = WindowSet(inputs, norm.targets(states), states, window, lo)
    if ws.n_windows < 1:
        raise ValueError(f"segment {segment} shorter than window {window}")
    return ws


# ---------------------------------------------------------------------------
# on-disk format


def truth_channels(n: int) -> list[str]:
    return [f"{q}[{b}]" for q in ("vm", "va", "p", "q", "i") for b in range(n)]


def measurement_channels(observed) -> list[str]:
    return [f"{q}[{int(b)}]" for b in observed for q in QUANTITIES]


def save_dataset(out_dir, case: FeederCase, series: GroundTruthSeries, frames: MeasurementFrames,
                 split: Split, meta: dict | None = None, csv_export: bool = False) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = case.n_buses
    truth = np.concatenate([series.vm, series.va, series.p_inj, series.q_inj, series.line_current], axis=1)
    meas = frames.values()
    manifest = {
        "format": "mambadsse-dataset/1",
        "case": case.to_dict(),
        "resolution_minutes": series.resolution_minutes,
        "n_steps": series.n_steps,
        "split": {"train": list(split.train), "test": list(split.test)},
        "observed": [int(b) for b in frames.observed],
        "noise": {
            "sigma_v": frames.sigma_v.tolist(),
            "sigma_va_rad": (frames.sigma_v * np.pi / 2).tolist(),
            "sigma_pq": frames.sigma_pq,
            "sigma_i": frames.sigma_i,
        },
        "truth": {"file": "truth.bin", "dtype": "<f8", "shape": list(truth.shape), "channels": truth_channels(n)},
        "measurements": {"file": "measurements.bin", "dtype": "<f8", "shape": list(meas.shape),
                         "channels": measurement_channels(frames.observed)},
        "meta": meta or {},
    }
    (out / "truth.bin").write_bytes(np.ascontiguousarray(truth, dtype="<f8").tobytes())
    (out / "measurements.bin").write_bytes(np.ascontiguousarray(meas, dtype="<f8").tobytes())
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    if csv_export:
        with open(out / "truth.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", *truth_channels(n)])
            for t, row in enumerate(truth):
                w.writerow([t, *(repr(float(v)) for v in row)])
    return out


def load_dataset(path):
    """Inverse of :func:`save_dataset`: (case, series, frames, split, manifest)."""
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    case = FeederCase.from_dict(manifest["case"])
    n = case.n_buses
    truth = np.frombuffer((path / "truth.bin").read_bytes(), dtype="<f8").reshape(manifest["truth"]["shape"])
    vm, va, p, q, i = (truth[:, j * n:(j + 1) * n].astype(np.float64) for j in range(5))
    series = GroundTruthSeries(vm * np.exp(1j * va), p, q, i, int(manifest["resolution_minutes"]))
    meas = np.frombuffer((path / "measurements.bin").read_bytes(), dtype="<f8").reshape(manifest["measurements"]["shape"])
    k = len(manifest["observed"])
    grouped = meas.reshape(meas.shape[0], k, 5).astype(np.float64)
    noise = manifest["noise"]
    frames = MeasurementFrames(np.asarray(manifest["observed"], dtype=np.int64), *(grouped[:, :, j] for j in range(5)),
                               np.asarray(noise["sigma_v"]), float(noise["sigma_pq"]), float(noise["sigma_i"]),
                               series.resolution_minutes)
    split = Split(tuple(manifest["split"]["train"]), tuple(manifest["split"]["test"]))
    return case, series, frames, split, manifest
