"""Selective-SSM backbone that emits per-step diagonal filter matrices."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import ShapeError, Tensor
from .nn import Linear, Module, param
from .ssm import init_a_raw, init_delta_bias, inverse_softplus, realize_dynamics, selective_scan_zoh

Q_FLOOR = 1e-6
# keeps delta*|a| >= 2e-6, so generated transitions stay below 1 - 1e-6
TRANSITION_DELTA_FLOOR = 0.02
# softplus underflows to 0 below about -745; the scan needs delta > 0
SCAN_DELTA_FLOOR = 1e-9
# exp(-700) ~ 1e-304 is still positive; exp below about -745 underflows to 0
LOG_TRANSITION_FLOOR = -700.0


def _floor(x: Tensor, lo: float) -> Tensor:
    """max(x, lo) with the gradient masked where the floor is active."""
    keep = x.data > lo
    return ag.record("floor", np.where(keep, x.data, lo), (x,), lambda g: (g * keep,))


@dataclass
class EngineConfig:
    n_blocks: int = 2
    d_model: int = 256
    n_state: int = 16
    sigma_q_per_window: bool = False

    def __post_init__(self):
        if self.d_model <= 0 or self.n_blocks < 1 or self.n_state < 1:
            raise ValueError(f"invalid engine config {self}")


@dataclass
class GeneratedMatrices:
    """Diagonals, each (B, L, d_lift): transition in (0, 1), control, process noise > 0."""

    a: Tensor
    b: Tensor
    q: Tensor


class MambaBlock(Module):
    """Projection, selective scan with input-dependent B/C/delta, SiLU gate, projection, residual.

    No local depthwise convolution before the scan.
    """

    def __init__(self, d_model: int, n_state: int, rng: np.random.Generator, zero_out: bool = False):
        self.d_model, self.n_state = d_model, n_state
        self.in_proj = Linear(d_model, 2 * d_model, rng)
        self.delta_proj = Linear(d_model, d_model, rng, scale=0.1 / np.sqrt(d_model))
        self.delta_proj.bias.data[:] = init_delta_bias(d_model, rng)
        self.b_proj = Linear(d_model, n_state, rng, bias=False)
        self.c_proj = Linear(d_model, n_state, rng, bias=False)
        self.a_raw = param(init_a_raw(d_model, n_state))
        self.d_skip = param(np.ones(d_model))
        self.out_proj = Linear(d_model, d_model, rng, scale=0.0 if zero_out else 0.5 / np.sqrt(d_model))

    def __call__(self, u: Tensor) -> Tensor:
        if u.ndim != 3 or u.shape[-1] != self.d_model:
            raise ShapeError(f"mamba_block: expected (B, L, {self.d_model}), got {u.shape}")
        bsz, L, dm = u.shape
        h = self.in_proj(u)
        stream = ag.silu(h[..., :dm])
        gate = h[..., dm:]
        delta = ag.softplus(self.delta_proj(stream)) + SCAN_DELTA_FLOOR
        a = realize_dynamics(self.a_raw)
        y = selective_scan_zoh(stream, delta, a, self.b_proj(stream), self.c_proj(stream), self.d_skip)
        return u + self.out_proj(y * ag.silu(gate))


class Backbone(Module):
    """Input projection from the lifted space followed by stacked Mamba blocks."""

    def __init__(self, d_in: int, cfg: EngineConfig, rng: np.random.Generator, zero_out: bool = False):
        self.cfg = cfg
        self.in_proj = Linear(d_in, cfg.d_model, rng)
        self.blocks = [MambaBlock(cfg.d_model, cfg.n_state, rng, zero_out) for _ in range(cfg.n_blocks)]

    def __call__(self, x: Tensor) -> Tensor:
        h = self.in_proj(x)
        for block in self.blocks:
            h = block(h)
        return h


class MatrixEngine(Module):
    """Causal map from lifted history (B, L, d_lift) to per-step diagonal A_t, B_t, Sigma^Q_t."""

    def __init__(self, d_lift: int, cfg: EngineConfig, rng: np.random.Generator, zero_out: bool = False):
        self.cfg = cfg
        self.d_lift = d_lift
        self.backbone = Backbone(d_lift, cfg, rng, zero_out)
        dm = cfg.d_model
        small = 0.1 / np.sqrt(dm)
        self.a_head = Linear(dm, d_lift, rng, scale=small)
        self.dt_head = Linear(dm, d_lift, rng, scale=small)
        self.dt_head.bias.data[:] = init_delta_bias(d_lift, rng, 1e-3, 1e-1)
        self.b_head = Linear(dm, d_lift, rng, scale=small)
        self.q_head = Linear(dm, d_lift, rng, scale=small)
        self.q_head.bias.data[:] = inverse_softplus(0.1)

    def __call__(self, lifted: Tensor) -> GeneratedMatrices:
        lifted = ag.as_tensor(lifted)
        if lifted.ndim != 3 or lifted.shape[1] < 1:
            raise ValueError(f"engine_forward: need a non-empty (B, L, d_lift) history, got {lifted.shape}")
        if lifted.shape[-1] != self.d_lift:
            raise ShapeError(f"engine_forward: expected d_lift {self.d_lift}, got {lifted.shape[-1]}")
        h = self.backbone(lifted)
        a = realize_dynamics(self.a_head(h))
        delta = ag.softplus(self.dt_head(h)) + TRANSITION_DELTA_FLOOR
        trans = ag.exp(_floor(delta * a, LOG_TRANSITION_FLOOR))
        q_raw = self.q_head(h)
        if self.cfg.sigma_q_per_window:
            q_raw = ag.broadcast(q_raw[:, :1], q_raw.shape)
        q = ag.softplus(q_raw) + Q_FLOOR
        return GeneratedMatrices(trans, self.b_head(h), q)
