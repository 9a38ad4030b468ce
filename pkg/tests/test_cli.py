import csv
import json

import pytest

from yldcvt import cli
from yldcvt import data as D


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "d.yldh"
    assert cli.main(["synth", "--out", str(path), "--n", "190", "--seed", "4"]) == 0
    return path


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    argv = ["train", "--data", str(dataset), "--model", "tiny", "--test-year", "2021", "--test-year", "2020",
            "--runs", "2", "--epochs", "1", "--out-dir", str(out)]
    assert cli.main(argv) == 0
    return out


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_synth_writes_readable_dataset(dataset, capsys):
    ds = D.read_dataset(dataset)
    assert len(ds) == 190 and ds.grid_shape == (11, 32, 34)


def test_synth_options(tmp_path, capsys):
    gen = tmp_path / "gen.json"
    gen.write_text(D.GeneratorParams(sigma_noise=0.0).to_json())
    path = tmp_path / "s.yldh"
    assert cli.main(["synth", "--out", str(path), "--n", "12", "--years", "2010-2012", "--generator", str(gen)]) == 0
    ds = D.read_dataset(path)
    assert set(ds.years.tolist()) == {2010, 2011, 2012}
    assert "mean" in capsys.readouterr().out


def test_synth_zero_samples_is_usage_error(tmp_path):
    assert cli.main(["synth", "--out", str(tmp_path / "x.yldh"), "--n", "0"]) == 2
    assert not (tmp_path / "x.yldh").exists()


@pytest.mark.parametrize("years", ["2020-2010", "abc"])
def test_synth_bad_year_range_exits_2(tmp_path, years):
    with pytest.raises(SystemExit) as info:
        cli.main(["synth", "--out", str(tmp_path / "x.yldh"), "--n", "5", "--years", years])
    assert info.value.code == 2


def test_synth_unwritable_path_exits_1(tmp_path):
    assert cli.main(["synth", "--out", str(tmp_path / "missing" / "x.yldh"), "--n", "3"]) == 1


def test_train_outputs(trained):
    for name in ("report.csv", "report.md", "runs.csv", "manifest.json"):
        assert (trained / name).exists()
    rows = read_csv(trained / "report.csv")
    assert [r["year"] for r in rows] == ["2021", "2020", "AVG"]
    runs = read_csv(trained / "runs.csv")
    assert len(runs) == 4
    manifest = json.loads((trained / "manifest.json").read_text())
    assert manifest["preset"] == "tiny" and manifest["test_years"] == [2021, 2020]
    assert manifest["train_config"]["epochs"] == 1 and len(manifest["seeds"]) == 4
    assert len(manifest["dataset"]["sha256"]) == 64
    ckpts = sorted(p.name for p in (trained / "checkpoints").glob("*.yldh"))
    assert ckpts == ["ckpt_2020_run0.yldh", "ckpt_2020_run1.yldh", "ckpt_2021_run0.yldh", "ckpt_2021_run1.yldh"]


def test_eval_reproduces_training_metrics(trained, dataset, tmp_path):
    out = tmp_path / "e.csv"
    ckpt = trained / "checkpoints" / "ckpt_2021_run1.yldh"
    assert cli.main(["eval", "--checkpoint", str(ckpt), "--data", str(dataset), "--test-year", "2021", "--out", str(out)]) == 0
    row = read_csv(out)[0]
    run = next(r for r in read_csv(trained / "runs.csv") if r["year"] == "2021" and r["run"] == "1")
    assert (row["mse"], row["rmse"], row["r2"]) == (run["mse"], run["rmse"], run["r2"])


def test_eval_shape_mismatch_is_clear_error(trained, dataset, capsys):
    ckpt = trained / "checkpoints" / "ckpt_2021_run0.yldh"
    code = cli.main(["eval", "--checkpoint", str(ckpt), "--data", str(dataset), "--test-year", "2021", "--in-year"])
    assert code == 1
    assert "(11, 32, 19)" in capsys.readouterr().err


def test_eval_missing_year_and_metadata(trained, dataset, tmp_path, capsys):
    ckpt = trained / "checkpoints" / "ckpt_2021_run0.yldh"
    assert cli.main(["eval", "--checkpoint", str(ckpt), "--data", str(dataset), "--test-year", "1999"]) == 1
    assert "available years" in capsys.readouterr().err
    lone = tmp_path / "lone.yldh"
    lone.write_bytes(ckpt.read_bytes())
    assert cli.main(["eval", "--checkpoint", str(lone), "--data", str(dataset), "--test-year", "2021"]) == 1


def test_train_requires_data_and_year(tmp_path):
    assert cli.main(["train", "--out-dir", str(tmp_path)]) == 2


def test_train_unknown_year(dataset, tmp_path, capsys):
    argv = ["train", "--data", str(dataset), "--test-year", "1990", "--runs", "1", "--epochs", "1", "--out-dir", str(tmp_path)]
    assert cli.main(argv) == 1
    assert "available years" in capsys.readouterr().err


def test_manifest_rejects_changed_dataset(trained, tmp_path, capsys):
    other = tmp_path / "other.yldh"
    D.write_dataset(D.generate_synthetic(40, seed=9), other)
    argv = ["train", "--manifest", str(trained / "manifest.json"), "--data", str(other), "--out-dir", str(tmp_path / "o")]
    assert cli.main(argv) == 1
    assert "digest" in capsys.readouterr().err


def test_gradcheck_subset_passes_and_corruption_fails(capsys, monkeypatch):
    monkeypatch.setenv("YLDCVT_THREADS", "1")
    assert cli.main(["gradcheck", "--model", "tiny", "--only", "head."]) == 0
    assert "PASS" in capsys.readouterr().out
    assert cli.main(["gradcheck", "--model", "tiny", "--only", "head.", "--corrupt-grad", "2"]) == 1
    out = capsys.readouterr().out
    assert "FAIL" in out and "head." in out
    assert cli.main(["gradcheck", "--only", "nothing."]) == 2
