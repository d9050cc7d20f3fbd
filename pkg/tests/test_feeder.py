import itertools

import numpy as np
import pytest

from mambadsse import feeder
from mambadsse.feeder import FeederCase, PowerFlowError
from oracles import newton_raphson


def small_case(parent, rng) -> FeederCase:
    n = len(parent)
    r, x = np.zeros(n), np.zeros(n)
    r[1:] = rng.uniform(0.005, 0.03, n - 1)
    x[1:] = rng.uniform(0.01, 0.05, n - 1)
    z = np.zeros(n)
    return FeederCase(n, np.asarray(parent), r, x, z, z, np.zeros((n, 5)), z, 0.0, 0)


def all_recursive_trees(n):
    """Every parent array in which bus b attaches to some earlier bus."""
    for choice in itertools.product(*[range(b) for b in range(1, n)]):
        yield [-1, *choice]


def test_generated_cases_are_trees():
    for n in (2, 3, 12, 40, 120):
        for seed in range(5):
            case = feeder.generate_case(n, seed=seed)
            feeder.check_tree(case)
            assert np.all(case.r[1:] > 0) and int(np.sum(case.parent >= 0)) == n - 1


def test_generate_case_examples():
    case = feeder.generate_case(12, seed=3)
    assert len(case.children[0]) >= 1 and sum(len(c) for c in case.children) == 11
    assert not feeder.generate_case(12, pv_fraction=0.0, seed=3).pv_capacity.any()
    assert np.count_nonzero(feeder.generate_case(41, pv_fraction=0.25, seed=1).pv_capacity) == 10
    a, b = feeder.generate_case(12, seed=5), feeder.generate_case(12, seed=5)
    assert a.to_dict() == b.to_dict()
    assert FeederCase.from_dict(a.to_dict()).to_dict() == a.to_dict()
    with pytest.raises(ValueError):
        feeder.generate_case(1)


def test_check_tree_rejects_bad_topology():
    case = feeder.generate_case(5, seed=0)
    case.parent[3] = 4
    with pytest.raises(ValueError):
        feeder.check_tree(case)


def test_zero_load_flat_voltage():
    case = feeder.generate_case(8, seed=0)
    series = feeder.simulate_loads(case, np.zeros((3, 8)))
    assert np.all(series.voltage == 1.0)


def test_two_bus_against_newton_raphson():
    case = small_case([-1, 0], np.random.default_rng(0))
    case.r[1], case.x[1] = 0.01, 0.02
    s = np.array([0.0, 0.5 + 0.1j])
    v = feeder.simulate_loads(case, s[None]).voltage[0]
    ref = newton_raphson(case.parent, case.z, s)
    assert np.max(np.abs(v - ref)) < 1e-8


def test_sweep_matches_newton_raphson_on_all_small_topologies():
    rng = np.random.default_rng(1)
    worst, count = 0.0, 0
    for n in range(2, 7):
        for parent in all_recursive_trees(n):
            case = small_case(parent, rng)
            for _ in range(3):
                s = np.zeros(n, dtype=complex)
                s[1:] = rng.uniform(-0.05, 0.15, n - 1) + 1j * rng.uniform(0.0, 0.06, n - 1)
                v = feeder.simulate_loads(case, s[None]).voltage[0]
                worst = max(worst, float(np.max(np.abs(v - newton_raphson(case.parent, case.z, s)))))
                count += 1
    assert count == 3 * (1 + 2 + 6 + 24 + 120)
    assert worst < 1e-8


@pytest.mark.parametrize("n_buses", [12, 40])
def test_simulated_series_balances_power(n_buses):
    case = feeder.generate_case(n_buses, seed=2)
    series = feeder.simulate(case, days=3, resolution_minutes=15, seed=2)
    assert series.n_steps == 288
    assert np.all(series.voltage[:, 0] == 1.0)
    s_load = -(series.p_inj + 1j * series.q_inj)
    assert feeder.power_residual(case, series.voltage, s_load).max() < 1e-8


def test_no_pv_at_night_and_daily_autocorrelation():
    case = feeder.generate_case(12, pv_fraction=0.5, seed=4)
    p_load, _, pv, hours = feeder.load_profiles(case, 96 * 10, 15, np.random.default_rng(4))
    night = (hours <= 6.0) | (hours >= 18.0)
    assert np.all(pv[night] == 0.0) and pv[~night].max() > 0
    total = p_load.sum(axis=1)
    d = total - total.mean()
    assert np.dot(d[:-96], d[96:]) / np.dot(d, d) * len(d) / (len(d) - 96) > 0.8


def test_simulate_rejects_bad_resolution():
    with pytest.raises(ValueError):
        feeder.simulate(feeder.generate_case(4, seed=0), days=1, resolution_minutes=3)


def test_non_convergence_names_the_step():
    case = small_case([-1, 0], np.random.default_rng(0))
    s = np.array([[0.0, 0.01], [0.0, 50.0 + 10j]])
    with pytest.raises(PowerFlowError, match="step 1"):
        feeder.simulate_loads(case, s)


def test_observe_counts_and_noise_statistics():
    series = feeder.simulate(feeder.generate_case(40, seed=0), days=1, resolution_minutes=15, seed=0)
    frames = feeder.observe(series, 0.10, noise_seed=0)
    assert len(frames.observed) == 4
    assert np.all((frames.sigma_v >= 0.01) & (frames.sigma_v <= 0.03))
    with pytest.raises(ValueError):
        feeder.observe(series, 0.01)
    with pytest.raises(ValueError):
        feeder.observe(series, 0.0)


def test_observe_noise_matches_configured_sigma():
    case = feeder.generate_case(12, seed=1)
    series = feeder.simulate(case, days=105, resolution_minutes=15, seed=1)  # 10,080 steps x 11 loaded buses
    frames = feeder.observe(series, 1.0, noise_seed=1)
    rel = frames.vm / series.vm[:, frames.observed] - 1.0
    np.testing.assert_allclose(rel.std(axis=0), frames.sigma_v, rtol=0.05)
    pooled = (frames.p / series.p_inj[:, frames.observed] - 1.0)[:, 1:].ravel()[:100_000]
    assert pooled.size == 100_000
    assert abs(pooled.std() / frames.sigma_pq - 1.0) < 0.05
    assert abs(pooled.mean()) < 0.05 * frames.sigma_pq


def test_observe_full_and_noiseless_is_identity():
    series = feeder.simulate(feeder.generate_case(6, seed=0), days=1, resolution_minutes=15, seed=0)
    fr = feeder.observe(series, 1.0, sigma_v_range=(0.0, 0.0), sigma_pq=0.0, sigma_i=0.0)
    np.testing.assert_array_equal(fr.vm, series.vm)
    np.testing.assert_array_equal(fr.va, series.va)
    np.testing.assert_array_equal(fr.p, series.p_inj)
    np.testing.assert_array_equal(fr.i, series.line_current)


def test_mask_is_fixed_and_deterministic():
    series = feeder.simulate(feeder.generate_case(20, seed=0), days=1, resolution_minutes=15, seed=0)
    a, b = feeder.observe(series, 0.2, noise_seed=3), feeder.observe(series, 0.2, noise_seed=3)
    np.testing.assert_array_equal(a.observed, b.observed)
    assert a.vm.tobytes() == b.vm.tobytes()
    assert a.mask(20).sum() == 4


def test_resample_examples():
    series = feeder.simulate(feeder.generate_case(5, seed=0), days=1, resolution_minutes=1, seed=0)
    half = feeder.resample(series, 2)
    assert half.n_steps == 720 and half.resolution_minutes == 2
    np.testing.assert_array_equal(half.voltage, series.voltage[::2])
    assert feeder.resample(series, 1) is series
    odd = feeder.resample(series, 7)
    assert odd.n_steps == 1440 // 7
    frames = feeder.observe(series, 0.4)
    coarse = feeder.resample(frames, 15)
    np.testing.assert_array_equal(coarse.vm, frames.vm[::15])
    assert coarse.resolution_minutes == 15
    with pytest.raises(ValueError):
        feeder.resample(series, 0)
