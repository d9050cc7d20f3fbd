"""Adam with decoupled weight decay, and the single-file parameter checkpoint format."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .autograd import ShapeError, Tensor

CHECKPOINT_MAGIC = b"MDSSECK1"


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float | None = None,
) -> tuple[Mapping[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update, in place on ``params``.

    Weight decay is decoupled: ``p <- p - lr*wd*p`` happens before the moment
    update and does not enter the moment estimates.
    """
    lr = state.lr if lr is None else float(lr)
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    for name, p in params.items():
        if grads[name].shape != p.shape:
            raise ShapeError(f"adam: grad shape {grads[name].shape} != param {name} shape {p.shape}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        if state.weight_decay and lr:
            p -= lr * state.weight_decay * p
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if lr:
            p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


class Adam:
    """Optimizer over named leaf tensors; reads ``.grad`` (missing grad = zero)."""

    def __init__(self, params: Mapping[str, Tensor], lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        if lr < 0:
            raise ValueError("lr must be >= 0")
        self.params = dict(params)
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps, weight_decay=weight_decay)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        arrays = {k: p.data for k, p in self.params.items()}
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in self.params.items()}
        adam_step(arrays, grads, self.state, lr)


# ---------------------------------------------------------------------------
# checkpoint: [magic][u64 LE header length][JSON header][LE float64 payload]


def save_checkpoint(path, params: Mapping[str, Tensor | np.ndarray], meta: dict | None = None,
                    adam: AdamState | None = None) -> None:
    arrays: list[tuple[str, np.ndarray]] = [
        (k, p.data if isinstance(p, Tensor) else np.asarray(p, dtype=np.float64)) for k, p in params.items()
    ]
    header: dict = {"params": [], "meta": meta or {}}
    if adam is not None:
        header["adam"] = {
            "lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps,
            "weight_decay": adam.weight_decay, "step": adam.step,
        }
        for k in adam.m:
            arrays.append((f"adam.m/{k}", adam.m[k]))
            arrays.append((f"adam.v/{k}", adam.v[k]))
    offset = 0
    for name, a in arrays:
        header["params"].append({"name": name, "shape": list(a.shape), "offset": offset})
        offset += a.size
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for _, a in arrays:
            f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict, AdamState | None]:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen])
    payload = np.frombuffer(raw[16 + hlen:], dtype="<f8")
    params: dict[str, np.ndarray] = {}
    for entry in header["params"]:
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        params[entry["name"]] = payload[entry["offset"]:entry["offset"] + n].reshape(entry["shape"]).astype(np.float64)
    adam = None
    if "adam" in header:
        h = header["adam"]
        adam = AdamState(lr=h["lr"], beta1=h["beta1"], beta2=h["beta2"], eps=h["eps"],
                         weight_decay=h["weight_decay"], step=h["step"])
        for k in list(params):
            if k.startswith("adam.m/"):
                adam.m[k[7:]] = params.pop(k)
            elif k.startswith("adam.v/"):
                adam.v[k[7:]] = params.pop(k)
    return params, header["meta"], adam
