import csv
import json

import numpy as np
import pytest

from mambadsse import cli
from mambadsse import experiments as ex
from mambadsse.config import ConfigError, RunConfig, load_config

TINY = {
    "feeder": {"n_buses": 6, "days": 2.0, "observability": 0.34},
    "model": {"encoder_hidden": [8, 8], "decoder_hidden": [8, 8], "n_blocks": 1, "d_model": 8, "n_state": 2,
              "window": 6},
    "train": {"total_steps": 6, "batch_size": 8, "val_every": 3},
    "experiment": {"seeds": [0], "sizes": [6], "windows": [4, 8], "factors": [1, 2], "pv_fractions": [0.0],
                   "base_resolution": 15, "bench_windows": [8, 16], "bench_repeats": 3, "eval_stride": 4},
}


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path


def write(tmp_path, raw, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(raw) if not isinstance(raw, str) else raw)
    return path


def test_defaults_round_trip():
    cfg = RunConfig()
    assert cfg.train.lr == 1e-3 and cfg.train.weight_decay == 1e-2 and cfg.train.batch_size == 64
    assert cfg.feeder.observability == 0.10 and cfg.experiment.seeds == [0, 1, 2]
    assert RunConfig.from_dict(cfg.to_dict()).to_dict() == cfg.to_dict()


def test_strict_parsing(tmp_path):
    for bad in ({"feedr": {}}, {"train": {"learning_rate": 1e-3}}, {"train": {"total_steps": "10"}},
                {"train": {"total_steps": 1.5}}, {"feeder": {"csv_export": 1}}, {"model": {"variant": "lstm"}},
                {"train": {"warmup_fraction": 1.5}}, {"feeder": []}, [1, 2], "{not json"):
        with pytest.raises(ConfigError):
            load_config(write(tmp_path, bad))
    cfg = load_config(write(tmp_path, {"train": {"lr": 1}, "model": {"d_lift": 12}}))
    assert cfg.train.lr == 1.0 and isinstance(cfg.train.lr, float) and cfg.model.d_lift == 12


def test_exit_codes(tmp_path, tiny_config, capsys):
    assert cli.main(["simulate", "--out", str(tmp_path / "d"), "--config", str(tiny_config)]) == 0
    assert cli.main(["simulate"]) == 1
    assert cli.main(["frobnicate"]) == 1
    assert cli.main(["simulate", "--out", str(tmp_path / "x"), "--seed", "-3"]) == 1
    assert cli.main(["simulate", "--out", str(tmp_path / "x"), "--config", str(tmp_path / "missing.json")]) == 1
    assert cli.main(["simulate", "--out", str(tmp_path / "x"), "--config", str(write(tmp_path, {"bogus": 1}))]) == 1
    assert cli.main(["eval", "--checkpoint", str(tmp_path / "nope.ckpt"), "--out", str(tmp_path / "e")]) == 2
    assert "error" in capsys.readouterr().err


def file_bytes(directory, skip=()):
    return {p.name: p.read_bytes() for p in sorted(directory.iterdir()) if p.name not in skip}


def test_simulate_train_eval_bit_identical(tmp_path, tiny_config):
    outputs = []
    for run in ("a", "b"):
        root = tmp_path / run
        cfg = ["--config", str(tiny_config), "--seed", "5"]
        assert cli.main(["simulate", *cfg, "--out", str(root / "data")]) == 0
        assert cli.main(["train", *cfg, "--out", str(root / "train"), "--data", str(root / "data")]) == 0
        assert cli.main(["eval", "--checkpoint", str(root / "train" / "checkpoint.ckpt"), "--data", str(root / "data"),
                         "--out", str(root / "eval"), "--stride", "3"]) == 0
        outputs.append({d: file_bytes(root / d) for d in ("data", "train", "eval")})
    a, b = outputs
    # the checkpoint records the dataset path, which differs between the two runs
    ckpt_a = a["train"].pop("checkpoint.ckpt")
    ckpt_b = b["train"].pop("checkpoint.ckpt")
    assert ckpt_a.replace(str(tmp_path / "a").encode(), b"") == ckpt_b.replace(str(tmp_path / "b").encode(), b"")
    assert a == b
    metrics = json.loads(a["eval"]["metrics.json"])
    assert metrics["rmse"] >= metrics["mae"] > 0 and metrics["variant"] == "mamba_dsse"
    assert set(a["eval"]) == {"metrics.json", "per_bus.csv", "predictions.csv"}
    header = a["train"]["loss.csv"].decode().splitlines()[0]
    assert header == "step,lr,loss,val_mae"


def test_train_without_data_and_mixer_variant(tmp_path, tiny_config):
    for run in ("a", "b"):
        assert cli.main(["train", "--config", str(tiny_config), "--variant", "mixer", "--out", str(tmp_path / run)]) == 0
    assert file_bytes(tmp_path / "a") == file_bytes(tmp_path / "b")
    assert cli.main(["eval", "--checkpoint", str(tmp_path / "a" / "checkpoint.ckpt"), "--out", str(tmp_path / "e")]) == 0
    assert json.loads((tmp_path / "e" / "metrics.json").read_text())["variant"] == "mamba_mixer"


@pytest.mark.parametrize("kind", ["scalability", "seqlen", "sampling", "pv_fraction", "bench"])
def test_ablations_bit_identical(tmp_path, tiny_config, kind):
    tables = []
    for run in ("a", "b"):
        argv = ["bench"] if kind == "bench" else ["ablate", kind]
        assert cli.main([*argv, "--config", str(tiny_config), "--out", str(tmp_path / run)]) == 0
        rows = list(csv.DictReader(open(tmp_path / run / "results.csv")))
        summary = list(csv.DictReader(open(tmp_path / run / "summary.csv")))
        strip = lambda rs: [{k: v for k, v in r.items() if not k.startswith(ex.WALL_CLOCK)} for r in rs]  # noqa: E731
        tables.append((strip(rows), strip(summary)))
        assert all(r["status"] == "ok" for r in rows), [r["error"] for r in rows]
    assert tables[0] == tables[1]
    rows = tables[0][0]
    expected = {"scalability": 2, "seqlen": 4, "sampling": 4, "pv_fraction": 2, "bench": 4}[kind]
    assert len(rows) == expected and {r["variant"] for r in rows} == {"dsse", "mixer"}


def test_bench_reports_timings(tmp_path, tiny_config):
    assert cli.main(["bench", "--config", str(tiny_config), "--out", str(tmp_path)]) == 0
    rows = list(csv.DictReader(open(tmp_path / "results.csv")))
    for r in rows:
        assert 0 < float(r["p25_s"]) <= float(r["median_s"]) <= float(r["p75_s"])


def test_seed_offset_shifts_every_seed(tmp_path, tiny_config):
    assert cli.main(["ablate", "pv_fraction", "--config", str(tiny_config), "--seed", "7", "--out", str(tmp_path)]) == 0
    assert {r["seed"] for r in csv.DictReader(open(tmp_path / "results.csv"))} == {"7"}


def test_failed_cells_are_recorded(tmp_path):
    cfg = RunConfig.from_dict({**TINY, "feeder": {**TINY["feeder"], "observability": 0.01}})
    rows = ex.run_experiment("scalability", cfg, tmp_path)
    assert len(rows) == 2 and all(r["status"] == "failed" and "observability" in r["error"] for r in rows)
    summary = list(csv.DictReader(open(tmp_path / "summary.csv")))
    assert all(s["n_failed"] == "1" and s["n_ok"] == "0" for s in summary)
    assert np.isnan(rows[0]["mae"])


def test_experiment_row_contracts():
    cfg = RunConfig.from_dict({**TINY, "experiment": {**TINY["experiment"], "seeds": [0, 1, 2], "sizes": [12, 40, 120],
                                                      "factors": [1, 2, 5, 15], "base_resolution": 1}})
    rows = ex.run_experiment("scalability", cfg)
    assert len(rows) == 18 and all(r["status"] == "ok" for r in rows)
    assert {(r["n_buses"], r["variant"]) for r in rows} == {(n, v) for n in (12, 40, 120) for v in ex.VARIANTS}
    cfg.experiment.seeds = [0]
    rows = ex.run_experiment("sampling", cfg)
    assert sorted({r["resolution_minutes"] for r in rows}) == [1, 2, 5, 15]
    defaults = RunConfig().experiment
    assert defaults.bench_windows == [96, 192, 288, 672] and defaults.bench_repeats >= 100
