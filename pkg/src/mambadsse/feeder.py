"""Synthetic single-phase radial feeders, quasi-static time series, and noisy sensing.

Bus 0 is the substation (slack, fixed at 1.0 angle 0). Every other bus ``b``
hangs off ``parent[b] < b`` through a series impedance ``r[b] + j x[b]``, so
index order is already a root-to-leaf topological order.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.signal import lfilter

log = logging.getLogger(__name__)

RESOLUTIONS = (1, 2, 5, 15)
AR_PHI = 0.9
AR_SIGMA = 0.05
CLOUD_MEAN = 0.85
SIGMA_PQ = 0.05
SIGMA_I = 0.05
SIGMA_V_RANGE = (0.01, 0.03)


class PowerFlowError(RuntimeError):
    pass


@dataclass
class FeederCase:
    n_buses: int
    parent: np.ndarray          # (n,), parent[0] = -1
    r: np.ndarray               # (n,), series resistance of the line feeding each bus (0 at root)
    x: np.ndarray               # (n,), series reactance
    base_p: np.ndarray          # (n,) base active load, p.u.
    q_ratio: np.ndarray         # (n,) reactive/active load ratio
    shape_params: np.ndarray    # (n, 5): level, morning hour, evening hour, morning weight, evening weight
    pv_capacity: np.ndarray     # (n,) p.u., zero without PV
    pv_fraction: float
    seed: int

    @property
    def z(self) -> np.ndarray:
        return self.r + 1j * self.x

    @property
    def children(self) -> list[list[int]]:
        ch: list[list[int]] = [[] for _ in range(self.n_buses)]
        for b in range(1, self.n_buses):
            ch[int(self.parent[b])].append(b)
        return ch

    def to_dict(self) -> dict:
        return {
            "n_buses": self.n_buses,
            "parent": self.parent.tolist(),
            "r": self.r.tolist(),
            "x": self.x.tolist(),
            "base_p": self.base_p.tolist(),
            "q_ratio": self.q_ratio.tolist(),
            "shape_params": self.shape_params.tolist(),
            "pv_capacity": self.pv_capacity.tolist(),
            "pv_fraction": self.pv_fraction,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeederCase":
        arr = lambda k, dt=np.float64: np.asarray(d[k], dtype=dt)  # noqa: E731
        return cls(int(d["n_buses"]), arr("parent", np.int64), arr("r"), arr("x"), arr("base_p"),
                   arr("q_ratio"), arr("shape_params"), arr("pv_capacity"), float(d["pv_fraction"]), int(d["seed"]))


@dataclass
class GroundTruthSeries:
    voltage: np.ndarray          # (T, n) complex phasors
    p_inj: np.ndarray            # (T, n) net active injection (generation positive)
    q_inj: np.ndarray            # (T, n)
    line_current: np.ndarray     # (T, n) |current| into each bus; entry 0 is the feeder-head current
    resolution_minutes: int
    residual: np.ndarray | None = None   # (T,) final sweep mismatch per step

    @property
    def n_steps(self) -> int:
        return self.voltage.shape[0]

    @property
    def vm(self) -> np.ndarray:
        return np.abs(self.voltage)

    @property
    def va(self) -> np.ndarray:
        return np.angle(self.voltage)

    def state_matrix(self) -> np.ndarray:
        """(T, 2n): magnitudes of all buses, then angles of all buses."""
        return np.concatenate([self.vm, self.va], axis=1)


@dataclass
class MeasurementFrames:
    """Noisy sensor readings at a fixed set of observed buses, one row per step."""

    observed: np.ndarray         # (k,) sorted bus indices
    vm: np.ndarray               # (T, k)
    va: np.ndarray
    p: np.ndarray
    q: np.ndarray
    i: np.ndarray
    sigma_v: np.ndarray          # (k,)
    sigma_pq: float
    sigma_i: float
    resolution_minutes: int
    present: np.ndarray | None = None   # (T,) frame availability; None = all present

    @property
    def n_steps(self) -> int:
        return self.vm.shape[0]

    def mask(self, n_buses: int) -> np.ndarray:
        m = np.zeros(n_buses, dtype=bool)
        m[self.observed] = True
        return m

    def values(self) -> np.ndarray:
        """(T, 5k) with per-bus channel groups [vm, va, p, q, i]."""
        stacked = np.stack([self.vm, self.va, self.p, self.q, self.i], axis=2)
        return stacked.reshape(self.n_steps, -1)


# ---------------------------------------------------------------------------
# case generation


def generate_case(n_buses: int, pv_fraction: float = 0.25, seed: int = 0, rng: np.random.Generator | None = None) -> FeederCase:
    """Random radial feeder: each bus b >= 1 attaches to a uniformly chosen earlier bus."""
    if n_buses < 2:
        raise ValueError(f"n_buses must be >= 2, got {n_buses}")
    if not 0.0 <= pv_fraction <= 1.0:
        raise ValueError(f"pv_fraction must lie in [0, 1], got {pv_fraction}")
    if rng is None:
        from .rng import stream
        rng = stream(seed, "data")
    n = n_buses
    parent = np.full(n, -1, dtype=np.int64)
    for b in range(1, n):
        parent[b] = rng.integers(0, b)
    r = np.zeros(n)
    x = np.zeros(n)
    r[1:] = rng.uniform(0.005, 0.03, n - 1)
    x[1:] = rng.uniform(0.01, 0.05, n - 1)
    base_p = np.zeros(n)
    base_p[1:] = rng.uniform(0.01, 0.05, n - 1)
    q_ratio = np.zeros(n)
    q_ratio[1:] = rng.uniform(0.2, 0.5, n - 1)
    shape = np.column_stack([
        rng.uniform(0.3, 0.5, n),
        rng.uniform(6.5, 9.0, n),
        rng.uniform(17.5, 20.5, n),
        rng.uniform(0.2, 0.4, n),
        rng.uniform(0.4, 0.6, n),
    ])
    pv = np.zeros(n)
    n_pv = int(round(pv_fraction * (n - 1)))
    if n_pv:
        sites = rng.choice(np.arange(1, n), size=n_pv, replace=False)
        pv[sites] = rng.uniform(0.02, 0.08, n_pv)
    return FeederCase(n, parent, r, x, base_p, q_ratio, shape, pv, float(pv_fraction), int(seed))


def check_tree(case: FeederCase) -> None:
    n = case.n_buses
    if case.parent[0] != -1:
        raise ValueError("bus 0 must be the root")
    lines = [(int(case.parent[b]), b) for b in range(1, n)]
    if len(lines) != n - 1:
        raise ValueError("tree must have n-1 lines")
    seen = {0}
    for b in range(1, n):
        p = int(case.parent[b])
        if p not in seen or p >= b:
            raise ValueError(f"bus {b} not reachable from the root")
        seen.add(b)
    if np.any(case.r[1:] <= 0):
        raise ValueError("line resistance must be positive")


# ---------------------------------------------------------------------------
# profiles


def _circ_gauss(h: np.ndarray, center, width: float) -> np.ndarray:
    d = (h - center + 12.0) % 24.0 - 12.0
    return np.exp(-0.5 * (d / width) ** 2)


def daily_shape(hours: np.ndarray, params: np.ndarray) -> np.ndarray:
    """Double-peak daily load multiplier, (T, n)."""
    h = hours[:, None]
    level, hm, he, wm, we = (params[:, i] for i in range(5))
    return level + wm * _circ_gauss(h, hm, 1.5) + we * _circ_gauss(h, he, 2.0)


def clear_sky(hours: np.ndarray) -> np.ndarray:
    """Raised cosine between 06:00 and 18:00, zero at night."""
    out = 0.5 * (1.0 + np.cos(2.0 * np.pi * (hours - 12.0) / 12.0))
    return np.where((hours > 6.0) & (hours < 18.0), out, 0.0)


def _ar1(rng: np.random.Generator, n_steps: int, width: int, phi=AR_PHI, sigma=AR_SIGMA) -> np.ndarray:
    eps = rng.normal(0.0, sigma, size=(n_steps, width))
    x0 = rng.normal(0.0, sigma / np.sqrt(1.0 - phi * phi), size=width)
    out, _ = lfilter([1.0], [1.0, -phi], eps, axis=0, zi=(phi * x0)[None, :])
    return out


def load_profiles(case: FeederCase, n_steps: int, resolution: int, rng: np.random.Generator):
    """Per-step complex load ``S = P + jQ`` and PV output, each (T, n)."""
    hours = (np.arange(n_steps) * resolution / 60.0) % 24.0
    mult = np.clip(1.0 + _ar1(rng, n_steps, case.n_buses), 0.0, None)
    p_load = case.base_p * daily_shape(hours, case.shape_params) * mult
    q_load = p_load * case.q_ratio
    cloud = np.clip(CLOUD_MEAN + _ar1(rng, n_steps, 1)[:, 0], 0.0, 1.0)
    pv = case.pv_capacity[None, :] * (clear_sky(hours) * cloud)[:, None]
    return p_load, q_load, pv, hours


# ---------------------------------------------------------------------------
# power flow


def sweep_power_flow(case: FeederCase, s_load: np.ndarray, tol: float = 1e-10, max_iter: int = 200):
    """Backward/forward sweep for constant-power loads ``s_load`` (T, n), vectorized over T.

    Returns (V, branch current into each bus, final per-step mismatch).
    """
    s_load = np.atleast_2d(np.asarray(s_load, dtype=np.complex128))
    T, n = s_load.shape
    parent = case.parent
    z = case.z
    V = np.ones((T, n), dtype=np.complex128)
    mismatch = np.full(T, np.inf)
    for _ in range(max_iter):
        i_load = np.conj(s_load / V)
        i_branch = i_load.copy()
        for b in range(n - 1, 0, -1):
            i_branch[:, parent[b]] += i_branch[:, b]
        V_new = np.empty_like(V)
        V_new[:, 0] = 1.0
        for b in range(1, n):
            V_new[:, b] = V_new[:, parent[b]] - z[b] * i_branch[:, b]
        mismatch = np.abs(V_new * np.conj(i_load) - s_load)[:, 1:].max(axis=1) if n > 1 else np.zeros(T)
        V = V_new
        if mismatch.max() < tol:
            break
    else:
        bad = int(np.argmax(mismatch >= tol))
        raise PowerFlowError(f"sweep did not converge in {max_iter} iterations at step {bad} "
                             f"(mismatch {mismatch[bad]:.3e})")
    i_load = np.conj(s_load / V)
    i_branch = i_load.copy()
    for b in range(n - 1, 0, -1):
        i_branch[:, parent[b]] += i_branch[:, b]
    return V, i_branch, mismatch


def admittance_matrix(case: FeederCase) -> np.ndarray:
    n = case.n_buses
    Y = np.zeros((n, n), dtype=np.complex128)
    for b in range(1, n):
        p = int(case.parent[b])
        y = 1.0 / case.z[b]
        Y[b, b] += y
        Y[p, p] += y
        Y[b, p] -= y
        Y[p, b] -= y
    return Y


def power_residual(case: FeederCase, V: np.ndarray, s_load: np.ndarray) -> np.ndarray:
    """Max per-step bus power mismatch ``|V conj(Y V) + S_load|`` over non-slack buses."""
    Y = admittance_matrix(case)
    V = np.atleast_2d(V)
    s_inj = V * np.conj(V @ Y.T)
    return np.abs(s_inj + np.atleast_2d(s_load))[:, 1:].max(axis=1)


def simulate(case: FeederCase, days: float = 30, resolution_minutes: int = 15, seed: int = 0,
             rng: np.random.Generator | None = None) -> GroundTruthSeries:
    """Quasi-static time series: profiles per step, one power-flow solve per step."""
    if resolution_minutes not in RESOLUTIONS:
        raise ValueError(f"resolution must be one of {RESOLUTIONS} minutes, got {resolution_minutes}")
    if rng is None:
        from .rng import stream
        rng = stream(seed, "data", 1)
    n_steps = int(round(days * 1440 / resolution_minutes))
    if n_steps < 1:
        raise ValueError("simulation needs at least one step")
    p_load, q_load, pv, _ = load_profiles(case, n_steps, resolution_minutes, rng)
    s_load = (p_load - pv) + 1j * q_load
    s_load[:, 0] = 0.0
    V, i_branch, mismatch = sweep_power_flow(case, s_load)
    s_root = V[:, 0] * np.conj(i_branch[:, 0])
    s_inj = -s_load
    s_inj[:, 0] = s_root
    return GroundTruthSeries(V, s_inj.real.copy(), s_inj.imag.copy(), np.abs(i_branch), resolution_minutes, mismatch)


def simulate_loads(case: FeederCase, s_load: np.ndarray) -> GroundTruthSeries:
    """Solve explicit per-step loads (T, n); bus 0 entries are ignored."""
    s_load = np.atleast_2d(np.asarray(s_load, dtype=np.complex128)).copy()
    s_load[:, 0] = 0.0
    V, i_branch, mismatch = sweep_power_flow(case, s_load)
    s_inj = -s_load
    s_inj[:, 0] = V[:, 0] * np.conj(i_branch[:, 0])
    return GroundTruthSeries(V, s_inj.real.copy(), s_inj.imag.copy(), np.abs(i_branch), 0, mismatch)


# ---------------------------------------------------------------------------
# sensing


def observe(series: GroundTruthSeries, observability: float = 0.10, noise_seed: int = 0,
            sigma_v_range=SIGMA_V_RANGE, sigma_pq: float = SIGMA_PQ, sigma_i: float = SIGMA_I,
            rng: np.random.Generator | None = None) -> MeasurementFrames:
    """Pick a fixed random sensor set and corrupt its readings with zero-mean Gaussian noise.

    Magnitudes, injections, and currents get multiplicative noise; angles get
    additive noise with standard deviation ``sigma_v * pi / 2`` radians.
    """
    if not 0.0 < observability <= 1.0:
        raise ValueError(f"observability must lie in (0, 1], got {observability}")
    n = series.voltage.shape[1]
    k = int(round(observability * n))
    if k < 1:
        raise ValueError(f"observability {observability} leaves no observed bus among {n}")
    if rng is None:
        from .rng import stream
        rng = stream(noise_seed, "noise")
    observed = np.sort(rng.choice(n, size=k, replace=False))
    sigma_v = rng.uniform(sigma_v_range[0], sigma_v_range[1], size=k)
    T = series.n_steps
    e = lambda: rng.normal(size=(T, k))  # noqa: E731
    vm = series.vm[:, observed] * (1.0 + sigma_v * e())
    va = series.va[:, observed] + sigma_v * (np.pi / 2) * e()
    p = series.p_inj[:, observed] * (1.0 + sigma_pq * e())
    q = series.q_inj[:, observed] * (1.0 + sigma_pq * e())
    i = series.line_current[:, observed] * (1.0 + sigma_i * e())
    return MeasurementFrames(observed, vm, va, p, q, i, sigma_v, float(sigma_pq), float(sigma_i),
                             series.resolution_minutes)


def resample(obj, factor: int):
    """Stride-decimate a series or frame set by ``factor`` (every k-th step, remainder dropped)."""
    factor = int(factor)
    if factor < 1:
        raise ValueError("decimation factor must be >= 1")
    if factor == 1:
        return obj
    n_keep = obj.n_steps // factor
    idx = np.arange(n_keep) * factor
    if isinstance(obj, GroundTruthSeries):
        return replace(obj, voltage=obj.voltage[idx], p_inj=obj.p_inj[idx], q_inj=obj.q_inj[idx],
                       line_current=obj.line_current[idx], resolution_minutes=obj.resolution_minutes * factor,
                       residual=None if obj.residual is None else obj.residual[idx])
    if isinstance(obj, MeasurementFrames):
        return replace(obj, vm=obj.vm[idx], va=obj.va[idx], p=obj.p[idx], q=obj.q[idx], i=obj.i[idx],
                       resolution_minutes=obj.resolution_minutes * factor,
                       present=None if obj.present is None else obj.present[idx])
    raise TypeError(f"cannot resample {type(obj).__name__}")
