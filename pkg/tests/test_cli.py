import json

import pytest

from ttcomp.bank import load_bank
from ttcomp.cli import main
from ttcomp.forecaster import Forecaster
from ttcomp.ingest import load_csv


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "spec.json").write_text(json.dumps({"C": 3, "weeks": 3, "seed": 2}))
    (d / "train.json").write_text(json.dumps({"max_epochs": 1, "d_model": 8, "n_heads": 2, "hidden": 8, "R": 2}))
    assert main(["generate", "--config", str(d / "spec.json"), "--out-dir", str(d)]) == 0
    return d


def test_generate_writes_csv(workspace, capsys):
    f = load_csv(workspace / "synthetic.csv")
    assert (f.T, f.C) == (3 * 2016, 3)


def test_bank_build_and_inspect(workspace, capsys):
    out = workspace / "bank.cpbk"
    assert main(["build-bank", "--input", str(workspace / "synthetic.csv"), "--split", "--out", str(out)]) == 0
    bank = load_bank(out)
    assert bank.C == 3
    assert main(["inspect-bank", "--bank", str(out), "--slot", "360"]) == 0
    assert "slot 360" in capsys.readouterr().out
    assert main(["inspect-bank", "--bank", str(out), "--slot", "5000"]) == 1


def test_train_and_evaluate(workspace, capsys):
    d = str(workspace)
    common = ["--input", str(workspace / "synthetic.csv"), "--config", str(workspace / "train.json"), "--out-dir", d]
    assert main(["train", *common]) == 0
    assert main(["train", *common, "--control"]) == 0
    assert Forecaster.load(workspace / "control.cpfm").cfg.compensate is False
    assert (workspace / "model_loss.csv").read_text().startswith("epoch,train_mae,val_mae")
    rc = main(["evaluate", "--input", str(workspace / "synthetic.csv"), "--checkpoint", str(workspace / "model.cpfm"), "--control", str(workspace / "control.cpfm"), "--out-dir", d])
    assert rc == 0
    report = json.loads((workspace / "report.json").read_text())
    assert set(report["horizons"]) == {"3", "6", "12"}
    assert report["zero_buckets"][0]["loss_gap"] is not None
    assert "zero-count bucket" in capsys.readouterr().out


def test_extremeness_outputs(workspace):
    assert main(["extremeness", "--input", str(workspace / "synthetic.csv"), "--out-dir", str(workspace)]) == 0
    lines = (workspace / "extremeness.csv").read_text().splitlines()
    assert lines[0] == "origin_t,zero_count,entropy,bucket_zero,bucket_entropy"
    assert len(lines) == 1 + 3 * 2016 - 11
    assert len((workspace / "ppmcc.csv").read_text().splitlines()) == 3 * 2016


def test_bench(tmp_path, capsys):
    assert main(["bench", "--C", "4", "--R", "2", "--L", "4", "8", "--repetitions", "2", "--out-dir", str(tmp_path)]) == 0
    rows = json.loads((tmp_path / "bench.json").read_text())
    assert {r["variant"] for r in rows} == {"temporal", "spatio-temporal", "spatial", "spatial_step"}


def test_validation_errors_exit_1(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("timestamp,a\n2012-03-05 00:00:00,abc\n")
    assert main(["extremeness", "--input", str(bad), "--out-dir", str(tmp_path)]) == 1
    assert "row 2" in capsys.readouterr().err
    assert main(["inspect-bank", "--bank", str(tmp_path / "missing.cpbk"), "--slot", "0"]) == 1
    (tmp_path / "cfg.json").write_text('{"bogus": 1}')
    assert main(["generate", "--config", str(tmp_path / "cfg.json"), "--out-dir", str(tmp_path)]) == 1
    assert main(["no-such-command"]) == 1


def test_divergence_exit_2(workspace, tmp_path):
    (tmp_path / "boom.json").write_text(json.dumps({"max_epochs": 1, "lr": 1e308, "grad_clip": 1e308, "d_model": 8, "n_heads": 2}))
    with pytest.warns(RuntimeWarning):
        rc = main(["train", "--input", str(workspace / "synthetic.csv"), "--config", str(tmp_path / "boom.json"), "--out-dir", str(tmp_path)])
    assert rc == 2
