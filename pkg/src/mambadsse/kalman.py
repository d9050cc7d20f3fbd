"""Diagonal linear-Gaussian filter in the lifted space.

All covariances are diagonal and the observation model is the identity, so
predict and update are elementwise; the gain is a plain division.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import ShapeError, Tensor
from .nn import Module, param
from .ssm import inverse_softplus

NOISE_FLOOR = 1e-6


@dataclass
class GaussianBelief:
    mean: Tensor
    var: Tensor


@dataclass
class FilterTrace:
    """Stacked (B, L, d) priors and posteriors of one filtered window."""

    prior_mean: Tensor
    prior_var: Tensor
    post_mean: Tensor
    post_var: Tensor


class MeasurementNoise(Module):
    """Learned time-invariant diagonal measurement noise ``R = softplus(raw) + floor``."""

    def __init__(self, dim: int, init: float = 1.0):
        self.raw_r = param(np.full(dim, inverse_softplus(init - NOISE_FLOOR)))

    def __call__(self) -> Tensor:
        return ag.softplus(self.raw_r) + NOISE_FLOOR


def _check(op: str, *tensors: Tensor) -> None:
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise ShapeError(f"{op}: dimension mismatch {[x.shape for x in tensors]}")


def predict(belief: GaussianBelief, a: Tensor, b: Tensor, q: Tensor, control: Tensor) -> GaussianBelief:
    """Prior ``mean = a*mean + b*control``, ``var = a^2*var + q`` (all elementwise)."""
    a, b, q, control = (ag.as_tensor(t) for t in (a, b, q, control))
    _check("predict", belief.mean, belief.var, a, b, q, control)
    mean = a * belief.mean + b * control
    var = ag.square(a) * belief.var + q
    return GaussianBelief(mean, var)


def update(prior: GaussianBelief, obs: Tensor, r: Tensor, present=None) -> GaussianBelief:
    """Posterior under identity observation with diagonal noise ``r``.

    ``present`` (broadcastable 0/1 array) zeroes the gain where a frame is
    missing, which leaves the prior untouched there.
    """
    obs = ag.as_tensor(obs)
    _check("update", prior.mean, prior.var, obs)
    denom = prior.var + r
    if np.any(denom.data <= 0):
        raise ValueError("update: non-positive innovation variance")
    gain = prior.var / denom
    if present is not None:
        gain = gain * np.asarray(present, dtype=np.float64)
    mean = prior.mean + gain * (obs - prior.mean)
    var = (1.0 - gain) * prior.var
    return GaussianBelief(mean, var)


def filter_sequence(
    obs: Tensor,
    a: Tensor,
    b: Tensor,
    q: Tensor,
    r: Tensor,
    init: GaussianBelief | None = None,
    present: np.ndarray | None = None,
) -> FilterTrace:
    """Alternate predict/update over a window.

    ``obs``, ``a``, ``b``, ``q`` are (B, L, d); ``r`` is (d,). Step t predicts
    with ``a[t], b[t], q[t]`` and control ``obs[t-1]`` (zero at t = 0), then
    updates with ``obs[t]``. The default initial belief is mean 0, variance 1.
    ``present`` is an optional (B, L) frame-availability mask.

    The whole recursion is one tape node with a hand-written reverse sweep; it
    computes exactly what chaining :func:`predict` and :func:`update` would.
    """
    obs, a, b, q, r = (ag.as_tensor(t) for t in (obs, a, b, q, r))
    _check("filter_sequence", obs, a, b, q)
    if r.shape != obs.shape[-1:]:
        raise ShapeError(f"filter_sequence: R shape {r.shape} vs state dim {obs.shape[-1]}")
    bsz, L, d = obs.shape
    if init is None:
        init = GaussianBelief(Tensor(np.zeros((bsz, d))), Tensor(np.ones((bsz, d))))
    m0, v0 = ag.as_tensor(init.mean), ag.as_tensor(init.var)
    m0d = np.broadcast_to(m0.data, (bsz, d))
    v0d = np.broadcast_to(v0.data, (bsz, d))
    pres = np.ones((bsz, L, 1)) if present is None else np.asarray(present, dtype=np.float64).reshape(bsz, L, 1)

    x, ad, bd, qd, rd = obs.data, a.data, b.data, q.data, r.data
    u = np.concatenate([np.zeros((bsz, 1, d)), x[:, :-1]], axis=1)
    out = np.empty((4, bsz, L, d))
    mp, vp, mt, vt = out
    gain = np.empty((bsz, L, d))
    m, v = m0d, v0d
    for t in range(L):
        mp[:, t] = ad[:, t] * m + bd[:, t] * u[:, t]
        vp[:, t] = ad[:, t] ** 2 * v + qd[:, t]
        denom = vp[:, t] + rd
        if np.any(denom <= 0):
            raise ValueError("filter_sequence: non-positive innovation variance")
        gain[:, t] = vp[:, t] / denom * pres[:, t]
        m = mt[:, t] = mp[:, t] + gain[:, t] * (x[:, t] - mp[:, t])
        v = vt[:, t] = (1.0 - gain[:, t]) * vp[:, t]

    def backward(g):
        g_mp, g_vp, g_mt, g_vt = g
        gx = np.zeros_like(x)
        ga = np.empty_like(ad)
        gb = np.empty_like(bd)
        gq = np.empty_like(qd)
        gr = np.zeros_like(rd)
        gm = np.zeros((bsz, d))
        gv = np.zeros((bsz, d))
        for t in range(L - 1, -1, -1):
            gm = gm + g_mt[:, t]
            gv = gv + g_vt[:, t]
            k, vpt = gain[:, t], vp[:, t]
            inv = pres[:, t] / (vpt + rd) ** 2
            gk = gm * (x[:, t] - mp[:, t]) - gv * vpt
            gx[:, t] += gm * k
            gmp = gm * (1.0 - k) + g_mp[:, t]
            gvp = gv * (1.0 - k) + g_vp[:, t] + gk * rd * inv
            gr -= (gk * vpt * inv).sum(axis=0)
            m_prev = mt[:, t - 1] if t > 0 else m0d
            v_prev = vt[:, t - 1] if t > 0 else v0d
            ga[:, t] = gmp * m_prev + 2.0 * gvp * ad[:, t] * v_prev
            gb[:, t] = gmp * u[:, t]
            gq[:, t] = gvp
            if t > 0:
                gx[:, t - 1] += gmp * bd[:, t]
            gm = gmp * ad[:, t]
            gv = gvp * ad[:, t] ** 2
        return gx, ga, gb, gq, gr, ag.unbroadcast(gm, m0.shape), ag.unbroadcast(gv, v0.shape)

    node = ag.record("kalman-filter", out, (obs, a, b, q, r, m0, v0), backward)
    return FilterTrace(node[0], node[1], node[2], node[3])
