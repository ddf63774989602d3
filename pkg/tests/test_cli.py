import csv
import shutil
import subprocess
import sys

import numpy as np
import pytest

from hals import cli
from hals.config import read_kv, write_kv
from hals.rangeimg import SensorModel, load_range_image, sensor_to_dict
from hals.synthscan import read_velodyne_bin

SMALL = SensorModel(height=8, width=32, f_up=2.0, f_down=24.8, max_range=80.0, min_range=1.0)


@pytest.fixture
def sensor_file(tmp_path):
    path = tmp_path / "small.cfg"
    write_kv(path, sensor_to_dict(SMALL))
    return path


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_usage_errors_exit_one(capsys):
    assert run() == 1
    with pytest.raises(SystemExit) as e:
        run("gen-data", "--scenes", "many")
    assert e.value.code == 1
    with pytest.raises(SystemExit) as e:
        run("no-such-command")
    assert e.value.code == 1
    assert run("gen-data") == 1  # --out missing
    assert run("train", "--out", "x") == 1  # no data directory
    assert run("train", "--set", "nonsense=1", "--print-config") == 1


def test_gen_data_is_deterministic(tmp_path, sensor_file):
    assert run("gen-data", "--scenes", 3, "--seed", 5, "--sensor", sensor_file, "--out", tmp_path / "a") == 0
    assert run("gen-data", "--scenes", 3, "--seed", 5, "--sensor", sensor_file, "--out", tmp_path / "b") == 0
    names = sorted(p.name for p in (tmp_path / "a").glob("*.hals"))
    assert names == ["scan_00000.hals", "scan_00001.hals", "scan_00002.hals"]
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()
    man = read_kv(tmp_path / "a" / "manifest.cfg")
    assert man["command"] == "gen-data" and man["seed"] == "5"
    assert load_range_image(tmp_path / "a" / names[0]).shape == (8, 32)


def test_gen_data_zero_scenes(tmp_path):
    assert run("gen-data", "--scenes", 0, "--out", tmp_path / "e") == 0
    assert not list((tmp_path / "e").glob("*.hals"))
    assert (tmp_path / "e" / "sensor.cfg").exists() and (tmp_path / "e" / "manifest.cfg").exists()
    assert run("gen-data", "--scenes", -1, "--out", tmp_path / "e") == 1


def test_print_config(capsys, tmp_path):
    assert run("gen-data", "--scenes", 7, "--print-config") == 0
    assert "scenes=7" in capsys.readouterr().out
    assert run("train", "--set", "lr=0.01", "--set", "rate=2", "--print-config") == 0
    out = capsys.readouterr().out
    assert "lr=0.01" in out and "rate=2" in out
    assert not list(tmp_path.iterdir())


def test_stats(tmp_path, sensor_file):
    run("gen-data", "--scenes", 4, "--sensor", sensor_file, "--out", tmp_path / "d")
    assert run("stats", "--data", tmp_path / "d", "--out", tmp_path / "s.csv") == 0
    rows = [r for r in csv.reader((tmp_path / "s.csv").read_text().splitlines()) if r and not r[0].startswith("#")]
    assert len(rows) == 1 + 8
    assert (tmp_path / "s.manifest.cfg").exists()
    assert run("stats", "--data", tmp_path / "missing", "--out", tmp_path / "x.csv") == 2


def test_train_upsample_eval_pipeline(tmp_path, sensor_file):
    data, ck = tmp_path / "data", tmp_path / "ck"
    assert run("gen-data", "--scenes", 4, "--sensor", sensor_file, "--out", data) == 0
    cfg = tmp_path / "train.cfg"
    write_kv(cfg, {"rate": 2, "batch_size": 2, "epochs": 2, "features": 8, "blocks": 2, "split": 1,
                   "vnl_k": 20, "lr": 1e-3})
    assert run("train", "--config", cfg, "--data", data, "--out", ck) == 0
    for f in ("params.halp", "optim.halp", "checkpoint.cfg", "loss.csv", "manifest.cfg"):
        assert (ck / f).exists()
    assert run("train", "--config", cfg, "--set", "epochs=3", "--data", data, "--out", ck, "--resume") == 0
    assert len((ck / "loss.csv").read_text().splitlines()) == 1 + 6

    # LR input: every second row of a GT scan, stored as its own file
    from hals.rangeimg import downsample_rows, save_range_image
    gt = load_range_image(data / "scan_00000.hals")
    save_range_image(tmp_path / "lo.hals", downsample_rows(gt, 2))
    pred = tmp_path / "pred"
    assert run("upsample", "--ckpt", ck, "--in", tmp_path / "lo.hals", "--out", pred / "scan_00000.hals") == 0
    assert load_range_image(pred / "scan_00000.hals").shape == (8, 32)
    assert read_velodyne_bin(pred / "scan_00000.bin").shape[1] == 3
    assert run("upsample", "--ckpt", ck, "--in", tmp_path / "lo.hals", "--rate", 4, "--out", pred / "x") == 2
    assert run("upsample", "--ckpt", ck, "--in", data / "scan_00001.hals", "--out", pred / "y") == 2

    assert run("eval", "--pred", pred, "--gt", data, "--out", tmp_path / "m.csv") == 0
    body = (tmp_path / "m.csv").read_text().splitlines()
    assert body[0].startswith("#") and body[-1].startswith("MEAN")


def test_eval_identity_and_threads(tmp_path, sensor_file, monkeypatch):
    data = tmp_path / "d"
    run("gen-data", "--scenes", 3, "--sensor", sensor_file, "--out", data)
    assert run("eval", "--pred", data, "--gt", data, "--out", tmp_path / "a.csv") == 0
    mean = read_kv(tmp_path / "a.manifest.cfg")
    assert float(mean["config.mean.emd"]) == 0.0 and float(mean["config.mean.iou"]) == 1.0
    monkeypatch.setenv("HALS_THREADS", "2")
    assert cli.worker_count() == 2
    assert run("eval", "--pred", data, "--gt", data, "--out", tmp_path / "b.csv") == 0
    a = (tmp_path / "a.csv").read_text().splitlines()
    b = (tmp_path / "b.csv").read_text().splitlines()
    assert a == b
    monkeypatch.setenv("HALS_THREADS", "zero")
    with pytest.raises(cli.UsageError):
        cli.worker_count()


def test_gradcheck_ops(capsys):
    assert run("gradcheck", "--level", "ops", "--seeds", 2) == 0
    out = capsys.readouterr().out
    assert "ok   conv2d" in out and "FAIL" not in out
    assert run("gradcheck", "--level", "ops", "--seeds", 1, "--tol", 1e-30) == 3


def test_console_script(tmp_path):
    exe = shutil.which("hals")
    cmd = [exe] if exe else [sys.executable, "-m", "hals.cli"]
    res = subprocess.run(cmd + ["--version"], capture_output=True, text=True)
    assert res.returncode == 0 and "0.1.0" in res.stdout
