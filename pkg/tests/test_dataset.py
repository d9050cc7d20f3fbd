from dataclasses import replace

import numpy as np
import pytest

from mambadsse import dataset as ds
from mambadsse import feeder


@pytest.fixture(scope="module")
def small():
    case = feeder.generate_case(10, seed=0)
    series = feeder.simulate(case, days=3, resolution_minutes=15, seed=0)
    frames = feeder.observe(series, 0.2, noise_seed=0)
    return case, series, frames, ds.Split.by_fraction(series.n_steps)


def test_split_fraction_and_scaling():
    sp = ds.Split.by_fraction(300)
    assert sp.train == (0, 200) and sp.test == (200, 300)
    assert ds.Split.by_fraction(43200).scaled(15) == ds.Split((0, 1920), (1920, 2880))


def test_normalizer_uses_training_segment_only(small):
    _, series, frames, sp = small
    norm = ds.Normalizer.fit(series, frames, sp)
    y = norm.targets(series.state_matrix()[: sp.train[1]])
    np.testing.assert_allclose(y.mean(axis=0), 0.0, atol=1e-10)
    np.testing.assert_allclose(norm.to_physical(norm.targets(series.state_matrix())), series.state_matrix(), atol=1e-14)
    again = ds.Normalizer.from_dict(norm.to_dict())
    assert all(np.array_equal(getattr(norm, k), getattr(again, k)) for k in ("in_mean", "in_std", "out_mean", "out_scale"))


def test_windows_and_inputs(small):
    _, series, frames, sp = small
    norm = ds.Normalizer.fit(series, frames, sp)
    ws = ds.make_windows(series, frames, norm, sp.test, 8)
    assert ws.inputs.shape == (sp.test[1] - sp.test[0], ds.input_dim(2))
    assert ws.n_windows == ws.inputs.shape[0] - 7
    x, y = ws.batch(np.array([0, 5]))
    assert x.shape == (2, 8, 12) and y.shape == (2, 8, 20)
    np.testing.assert_array_equal(x[1, 0], ws.inputs[5])
    assert np.all(ws.inputs[:, 10:] == 1.0)
    with pytest.raises(ValueError):
        ds.make_windows(series, frames, norm, (0, 4), 8)


def test_missing_frames_are_zeroed_and_flagged(small):
    _, series, frames, sp = small
    norm = ds.Normalizer.fit(series, frames, sp)
    present = np.ones(frames.n_steps, dtype=bool)
    present[3] = False
    x = ds.build_inputs(replace(frames, present=present), norm)
    assert np.all(x[3] == 0.0) and np.all(x[4, 10:] == 1.0)


def test_save_load_round_trip(small, tmp_path):
    case, series, frames, sp = small
    ds.save_dataset(tmp_path, case, series, frames, sp, meta={"seed": 0}, csv_export=True)
    case2, series2, frames2, sp2, manifest = ds.load_dataset(tmp_path)
    assert case2.to_dict() == case.to_dict() and sp2 == sp
    np.testing.assert_allclose(series2.vm, series.vm, rtol=0, atol=1e-15)
    np.testing.assert_allclose(series2.va, series.va, rtol=0, atol=1e-15)
    np.testing.assert_array_equal(frames2.values(), frames.values())
    np.testing.assert_array_equal(frames2.observed, frames.observed)
    assert manifest["meta"] == {"seed": 0}
    header = (tmp_path / "truth.csv").read_text().splitlines()[0].split(",")
    assert header[:3] == ["step", "vm[0]", "vm[1]"]
