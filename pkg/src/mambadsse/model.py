"""End-to-end estimator (lift -> matrix engine -> filter -> decoder) and its mixer dual."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import ShapeError, Tensor
from .engine import Backbone, EngineConfig, MatrixEngine
from .kalman import FilterTrace, MeasurementNoise, filter_sequence
from .koopman import Decoder, Encoder, LiftConfig, koopman_loss
from .nn import Module

VARIANTS = ("mamba_dsse", "mamba_mixer")


@dataclass
class ModelConfig:
    variant: str = "mamba_dsse"
    n_buses: int = 12
    d_in: int = 6
    expansion: float = 1.5
    d_lift: int | None = None
    encoder_hidden: list[int] = field(default_factory=lambda: [64, 64])
    decoder_hidden: list[int] = field(default_factory=lambda: [64, 64])
    engine: EngineConfig = field(default_factory=EngineConfig)
    window: int = 24
    lambda_pred: float = 1.0
    lambda_rec: float = 0.5
    equalize_params: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if isinstance(self.engine, dict):
            self.engine = EngineConfig(**self.engine)

    @property
    def lift(self) -> LiftConfig:
        return LiftConfig(self.d_in, self.expansion, list(self.encoder_hidden), self.d_lift)

    @property
    def d_state(self) -> int:
        return 2 * self.n_buses


@dataclass
class WindowSample:
    """A batch of windows: inputs (B, L, d_in) and full-state targets (B, L, 2n)."""

    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        if self.inputs.ndim == 2:
            self.inputs = self.inputs[None]
            self.targets = self.targets[None]
        if self.inputs.shape[:2] != self.targets.shape[:2]:
            raise ShapeError(f"window inputs {self.inputs.shape} vs targets {self.targets.shape}")


@dataclass
class Forward:
    prediction: Tensor
    lifted: Tensor
    trace: FilterTrace | None = None
    latent: Tensor | None = None


class MambaDSSE(Module):
    variant = "mamba_dsse"

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, zero_out: bool = False):
        self.cfg = cfg
        lift = cfg.lift
        self.encoder = Encoder(lift, rng)
        self.engine = MatrixEngine(lift.d_lift, cfg.engine, rng, zero_out)
        self.noise = MeasurementNoise(lift.d_lift)
        self.decoder = Decoder(lift.d_lift, cfg.d_state, list(cfg.decoder_hidden), rng, with_variance=True)

    def forward(self, inputs) -> Forward:
        x = _check_inputs(self.cfg, inputs)
        lifted = self.encoder(x)
        mats = self.engine(lifted)
        trace = filter_sequence(lifted, mats.a, mats.b, mats.q, self.noise())
        pred = self.decoder(trace.post_mean[:, -1], trace.post_var[:, -1])
        return Forward(pred, lifted, trace=trace)

    __call__ = forward

    def loss(self, sample: WindowSample, fwd: Forward | None = None) -> Tensor:
        fwd = fwd or self.forward(sample.inputs)
        y = sample.targets
        final = ag.mse(fwd.prediction, y[:, -1])
        tr = fwd.trace
        pred_next = None
        if y.shape[1] > 1:
            pred_next = self.decoder(tr.prior_mean[:, 1:], tr.prior_var[:, 1:])
        recon = self.decoder(fwd.lifted)
        return final + koopman_loss(pred_next, y[:, 1:], recon, y, self.cfg.lambda_pred, self.cfg.lambda_rec)


class MambaMixer(Module):
    """Sequence-to-point dual: same lift and Mamba stack, direct latent-to-state decoder."""

    variant = "mamba_mixer"

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, zero_out: bool = False, decoder_hidden=None):
        self.cfg = cfg
        lift = cfg.lift
        self.encoder = Encoder(lift, rng)
        self.backbone = Backbone(lift.d_lift, cfg.engine, rng, zero_out)
        hidden = list(decoder_hidden or cfg.decoder_hidden)
        self.decoder = Decoder(cfg.engine.d_model, cfg.d_state, hidden, rng, with_variance=False)

    def forward(self, inputs) -> Forward:
        x = _check_inputs(self.cfg, inputs)
        lifted = self.encoder(x)
        h = self.backbone(lifted)
        pred = self.decoder(h[:, -1])
        return Forward(pred, lifted, latent=h)

    __call__ = forward

    def loss(self, sample: WindowSample, fwd: Forward | None = None) -> Tensor:
        fwd = fwd or self.forward(sample.inputs)
        y = sample.targets
        final = ag.mse(fwd.prediction, y[:, -1])
        recon = self.decoder(self.backbone.in_proj(fwd.lifted))
        return final + koopman_loss(None, None, recon, y, 0.0, self.cfg.lambda_rec)


def _check_inputs(cfg: ModelConfig, inputs) -> Tensor:
    x = ag.as_tensor(inputs)
    if x.ndim == 2:
        x = x.reshape((1,) + x.shape)
    if x.ndim != 3 or x.shape[-1] != cfg.d_in:
        raise ShapeError(f"model expects (B, L, {cfg.d_in}) inputs, got {x.shape}")
    return x


def _mixer_hidden_for(cfg: ModelConfig, target: int, base: int) -> list[int]:
    """Equal-width two-layer mixer decoder whose total count lands nearest ``target``."""
    dm, ds = cfg.engine.d_model, cfg.d_state
    need = target - base
    # h*dm + h + h*h + h + h*ds + ds = need
    b_ = dm + ds + 2
    h = (-b_ + math.sqrt(b_ * b_ + 4 * max(need - ds, 0))) / 2
    h = max(1, int(round(h)))
    depth = len(cfg.decoder_hidden)
    if depth != 2:
        return [h] * max(depth, 1)
    return [h, h]


def build_model(cfg: ModelConfig, rng: np.random.Generator, zero_out: bool = False):
    """Instantiate the configured variant.

    The mixer's decoder is widened so that both variants carry (nearly) the same
    number of parameters; the probe DSSE model uses a separate generator so the
    mixer's own initialization does not depend on it.
    """
    if cfg.variant == "mamba_dsse":
        return MambaDSSE(cfg, rng, zero_out)
    if not cfg.equalize_params:
        return MambaMixer(cfg, rng, zero_out)
    probe_rng = np.random.default_rng(0)
    target = MambaDSSE(cfg, probe_rng).num_parameters()
    skeleton = MambaMixer(cfg, probe_rng, decoder_hidden=[1, 1])
    base = skeleton.num_parameters() - skeleton.decoder.num_parameters()
    return MambaMixer(cfg, rng, zero_out, decoder_hidden=_mixer_hidden_for(cfg, target, base))
