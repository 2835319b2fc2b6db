import csv
import json

import numpy as np
import pytest

from mvbiin.cli import main
from mvbiin.model import read_checkpoint

TINY = {"epochs": 3, "view_hidden": [8, 6], "head_hidden": [8], "d_B": 3, "batch_size": 32,
        "gamma": 2.0, "s": 2, "seed": 1}


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--out", str(out), "--views", "3", "--classes", "3", "--samples", "240",
                 "--noise-views", "1", "--dims", "4,4,4", "--seed", "0"]) == 0
    return out


def write_config(path, **over):
    path.write_text(json.dumps({**TINY, **over}))
    return str(path)


@pytest.fixture(scope="module")
def trained(tmp_path_factory, data_dir):
    root = tmp_path_factory.mktemp("run")
    cfg = write_config(root / "cfg.json")
    assert main(["train", "--data", str(data_dir), "--config", cfg, "--out", str(root / "out")]) == 0
    return root


def test_synth_writes_manifest(data_dir):
    manifest = json.loads((data_dir / "manifest.json").read_text())
    assert [v["dim"] for v in manifest["views"]] == [4, 4, 4]
    assert manifest["num_classes"] == 3


def test_train_writes_all_outputs(trained):
    out = trained / "out"
    for name in ("model.ckpt", "metrics.jsonl", "alpha.csv", "alpha_history.csv", "resolved_config.json"):
        assert (out / name).stat().st_size > 0
    lines = (out / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 3 and all("wall_time" not in line for line in lines)
    resolved = json.loads((out / "resolved_config.json").read_text())
    assert resolved["lr"] == 1e-3 and resolved["beta1"] == 0.5  # defaults filled in


def test_rerun_is_byte_identical(trained, data_dir, tmp_path):
    # the echoed config alone reproduces the run
    resolved = str(trained / "out" / "resolved_config.json")
    assert main(["train", "--config", resolved, "--out", str(tmp_path / "again")]) == 0
    for name in ("alpha.csv", "metrics.jsonl", "alpha_history.csv"):
        assert (tmp_path / "again" / name).read_bytes() == (trained / "out" / name).read_bytes()


def test_gamma_one_is_config_error(data_dir, tmp_path, capsys):
    cfg = write_config(tmp_path / "bad.json", gamma=1.0)
    assert main(["train", "--data", str(data_dir), "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert "gamma" in capsys.readouterr().err


def test_unknown_key_rejected(data_dir, tmp_path):
    cfg = write_config(tmp_path / "bad.json", learning_rate=0.1)
    assert main(["train", "--data", str(data_dir), "--config", cfg, "--out", str(tmp_path / "o")]) == 2


def test_missing_data_is_data_error(tmp_path):
    cfg = write_config(tmp_path / "c.json")
    assert main(["train", "--data", str(tmp_path / "nope"), "--config", cfg, "--out", str(tmp_path / "o")]) == 3


def test_eval_reproduces_best_val(trained, data_dir, capsys):
    out = trained / "out"
    capsys.readouterr()
    assert main(["eval", "--model", str(out / "model.ckpt"), "--data", str(data_dir), "--split", "val"]) == 0
    res = json.loads(capsys.readouterr().out)
    history = [json.loads(line) for line in (out / "metrics.jsonl").read_text().splitlines()]
    best = history[read_checkpoint(out / "model.ckpt")[0]["extra"]["best_epoch"] - 1]
    assert res["top1"] == best["val_top1"] and res["top5"] == best["val_top5"]
    assert res["alpha"] == best["alpha"] and len(res["per_view_losses"]) == 3


@pytest.mark.parametrize("split", ["train", "val", "test"])
def test_eval_all_splits(trained, data_dir, split, capsys):
    assert main(["eval", "--model", str(trained / "out" / "model.ckpt"), "--data", str(data_dir),
                 "--split", split]) == 0
    assert 0.0 <= json.loads(capsys.readouterr().out)["top1"] <= 1.0


def test_eval_wrong_view_count(trained, tmp_path, capsys):
    other = tmp_path / "two"
    assert main(["synth", "--out", str(other), "--views", "2", "--classes", "3", "--samples", "60",
                 "--dims", "4,4"]) == 0
    code = main(["eval", "--model", str(trained / "out" / "model.ckpt"), "--data", str(other)])
    assert code == 3
    err = capsys.readouterr().err
    assert "M=3" in err and "2" in err


def test_gradcheck_passes(capsys):
    assert main(["gradcheck", "--seed", "3"]) == 0
    assert json.loads(capsys.readouterr().out)["pass"] is True


def test_sweep_rows_and_best(data_dir, tmp_path):
    (tmp_path / "grid.json").write_text(json.dumps({"gamma": [2, 5], "s": [1, 2, 3]}))
    cfg = write_config(tmp_path / "c.json", epochs=2)
    assert main(["sweep", "--data", str(data_dir), "--grid", str(tmp_path / "grid.json"), "--config", cfg,
                 "--out", str(tmp_path / "sw")]) == 0
    rows = list(csv.DictReader((tmp_path / "sw" / "sweep.csv").open()))
    assert len(rows) == 6
    flagged = [r for r in rows if r["best"] == "1"]
    assert len(flagged) == 1
    assert all(float(flagged[0]["val_top1"]) >= float(r["val_top1"]) for r in rows)


@pytest.mark.parametrize("method", ["cca", "mvda", "concat"])
def test_baseline_prints_json(data_dir, method, capsys):
    assert main(["baseline", "--method", method, "--data", str(data_dir), "--epochs", "5"]) == 0
    res = json.loads(capsys.readouterr().out)
    assert res["method"] == method
    if method == "cca":
        assert all(0 <= r <= 1 for r in res["correlations"])
    else:
        assert 0 <= res["test_top1"] <= 1


def test_synth_product_and_csv(tmp_path):
    assert main(["synth", "--out", str(tmp_path / "p"), "--kind", "product", "--samples", "100",
                 "--format", "csv"]) == 0
    manifest = json.loads((tmp_path / "p" / "manifest.json").read_text())
    assert len(manifest["views"]) == 2 and manifest["views"][0]["format"] == "csv"
    assert np.loadtxt(tmp_path / "p" / manifest["views"][0]["file"], delimiter=",").shape == (100, 6)
