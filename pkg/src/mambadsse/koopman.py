"""Learned lifting into an approximately linear observable space and its decoder."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import ShapeError, Tensor
from .nn import MLP, Module


@dataclass
class LiftConfig:
    d_in: int
    expansion: float = 1.5
    hidden: list[int] = field(default_factory=lambda: [64, 64])
    d_lift_override: int | None = None

    def __post_init__(self):
        if self.d_in < 1:
            raise ValueError("d_in must be positive")
        if self.d_lift_override is None and not 1.5 <= self.expansion <= 2.0:
            raise ValueError(f"expansion factor {self.expansion} outside [1.5, 2.0]")
        if self.d_lift < self.d_in:
            raise ValueError(f"lifted dim {self.d_lift} smaller than input dim {self.d_in}")

    @property
    def d_lift(self) -> int:
        if self.d_lift_override is not None:
            return int(self.d_lift_override)
        return math.ceil(self.expansion * self.d_in - 1e-9)


class Encoder(Module):
    """Frame-wise lift of (zero-filled values, masks) to a d_lift vector."""

    def __init__(self, cfg: LiftConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.net = MLP(cfg.d_in, list(cfg.hidden), cfg.d_lift, rng)

    def __call__(self, frames: Tensor) -> Tensor:
        frames = ag.as_tensor(frames)
        if frames.shape[-1] != self.cfg.d_in:
            raise ShapeError(f"lift: expected input dim {self.cfg.d_in}, got {frames.shape[-1]}")
        return self.net(frames)


class Decoder(Module):
    """Maps a (mean, diagonal variance) pair, or a plain latent, to the bus state vector."""

    def __init__(self, d_latent: int, d_state: int, hidden: list[int], rng: np.random.Generator, with_variance: bool = True):
        self.with_variance = with_variance
        self.d_latent = d_latent
        self.net = MLP(2 * d_latent if with_variance else d_latent, list(hidden), d_state, rng)

    def __call__(self, mean: Tensor, var: Tensor | None = None) -> Tensor:
        mean = ag.as_tensor(mean)
        if not self.with_variance:
            return self.net(mean)
        if var is None:
            var = Tensor(np.zeros(mean.shape))
        var = ag.as_tensor(var)
        if var.shape != mean.shape:
            raise ShapeError(f"reconstruct: mean {mean.shape} vs variance {var.shape}")
        if np.any(var.data < 0):
            raise ValueError("reconstruct: negative variance entry")
        return self.net(ag.concat([mean, var], axis=-1))


def koopman_loss(
    predicted_next: Tensor | None,
    target_next,
    reconstructed: Tensor | None,
    reconstruction_target,
    lambda_pred: float = 1.0,
    lambda_rec: float = 0.5,
) -> Tensor:
    """Weighted one-step prediction MSE plus autoencoder reconstruction MSE, both in state space."""
    total = Tensor(0.0)
    if predicted_next is not None and lambda_pred:
        total = total + lambda_pred * ag.mse(predicted_next, target_next)
    if reconstructed is not None and lambda_rec:
        total = total + lambda_rec * ag.mse(reconstructed, reconstruction_target)
    return total
