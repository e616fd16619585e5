import csv
import dataclasses
import json

import pytest

from sdeep import data as D
from sdeep.cli import EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, RunConfig, main

SMALL_MODEL = ["--conv-widths", "8,6,4", "--kernel-lens", "3,3,3", "--head-widths", "16", "--d-a", "8"]


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = dataclasses.replace(D.default_synth_spec(), objects_per_class=20, pixels_per_object=3)
    spec_path = root / "spec.json"
    spec_path.write_text(json.dumps(spec.to_dict()))
    out = root / "tiny.csv"
    assert main(["synth", "--spec", str(spec_path), "--out", str(out), "--seed", "1"]) == EXIT_OK
    return root, out


@pytest.fixture(scope="module")
def trained(corpus):
    root, data = corpus
    run = root / "run"
    argv = ["train", "--data", str(data), "--out-dir", str(run), "--max-epochs", "25",
            "--learning-rate", "0.01", "--dropout-rate", "0", *SMALL_MODEL]
    assert main(argv) == EXIT_OK
    return root, data, run


def test_synth_writes_sidecar_and_is_deterministic(corpus, tmp_path):
    root, out = corpus
    meta = D.read_sidecar(D.sidecar_path(out))
    assert meta["designated_class"] == 1 and meta["relevance"]["1"] == [0]
    again = tmp_path / "again.csv"
    assert main(["synth", "--spec", str(root / "spec.json"), "--out", str(again), "--seed", "1"]) == EXIT_OK
    assert again.read_bytes() == out.read_bytes()


def test_synth_default_spec(tmp_path):
    out = tmp_path / "d.csv"
    assert main(["synth", "--out", str(out)]) == EXIT_OK
    ds = D.load_sits_csv(out)
    assert len(ds) == 8000 and ds.num_timesteps == 21 and ds.num_channels == 6
    assert sorted(set(ds.label.tolist())) == [0, 1, 2, 3]


def test_synth_bad_spec_names_field(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    spec = D.default_synth_spec().to_dict()
    spec["cloud_rate"] = 1.5
    bad.write_text(json.dumps(spec))
    assert main(["synth", "--spec", str(bad), "--out", str(tmp_path / "x.csv")]) == EXIT_CONFIG
    assert "cloud_rate" in capsys.readouterr().err


def test_train_outputs_and_snapshot_rerun(trained, tmp_path):
    root, data, run = trained
    for name in ("checkpoint.sdc", "history.csv", "config.json"):
        assert (run / name).exists()
    snap = json.loads((run / "config.json").read_text())
    assert RunConfig.from_dict(snap).max_epochs == 25
    rerun = tmp_path / "rerun"
    assert main(["train", "--config", str(run / "config.json"), "--out-dir", str(rerun)]) == EXIT_OK
    assert (rerun / "checkpoint.sdc").read_bytes() == (run / "checkpoint.sdc").read_bytes()
    assert (rerun / "history.csv").read_bytes() == (run / "history.csv").read_bytes()


def test_eval_memorised_training_split(trained, capsys):
    _, data, run = trained
    assert main(["eval", "--data", str(data), "--out-dir", str(run), "--split", "train"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "accuracy 1.0000" in out
    rows = list(csv.reader(open(run / "metrics_train.csv")))
    assert rows[0] == ["class", "precision", "recall", "support_fraction"] and rows[-1][0] == "mean"


def test_explain_writes_report(trained):
    _, data, run = trained
    argv = ["explain", "--data", str(data), "--out-dir", str(run), "--report-format", "json",
            "--normalization", "class"]
    assert main(argv) == EXIT_OK
    rep = json.loads((run / "attention_all.json").read_text())
    assert rep["normalization"] == "class" and rep["channel_names"][0] == "B2"


def test_eval_dimension_mismatch(trained, tmp_path):
    _, data, run = trained
    ds = D.load_sits_csv(data)
    short = ds.with_series(ds.series[:, :10], ds.mask[:, :10])
    path = tmp_path / "short.csv"
    D.write_sits_csv(short, path)
    assert main(["eval", "--data", str(path), "--checkpoint", str(run / "checkpoint.sdc")]) == EXIT_CONFIG


def test_train_lambda_without_aux_head(corpus, tmp_path, capsys):
    _, data = corpus
    argv = ["train", "--data", str(data), "--out-dir", str(tmp_path), "--attention-mode", "none",
            "--lambda-aux", "0.5", *SMALL_MODEL]
    assert main(argv) == EXIT_CONFIG
    assert "auxiliary head" in capsys.readouterr().err


def test_explain_attention_free_checkpoint(corpus, tmp_path):
    _, data = corpus
    argv = ["train", "--data", str(data), "--out-dir", str(tmp_path), "--attention-mode", "none",
            "--max-epochs", "1", *SMALL_MODEL]
    assert main(argv) == EXIT_OK
    assert main(["explain", "--data", str(data), "--out-dir", str(tmp_path)]) == EXIT_CONFIG


def test_train_divergence_exit_code(corpus, tmp_path):
    _, data = corpus
    argv = ["train", "--data", str(data), "--out-dir", str(tmp_path), "--learning-rate", "1e308",
            "--max-epochs", "2", *SMALL_MODEL]
    assert main(argv) == EXIT_NUMERIC


def test_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"max_epochs": 3, "epochs": 3}))
    assert main(["params", "--config", str(cfg)]) == EXIT_CONFIG
    assert "epochs" in capsys.readouterr().err


def test_flags_override_config_file(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"arch": "Sdeep-A-Multi-i"}))
    assert main(["params", "--config", str(cfg), "--arch", "Sdeep-B-Multi-ii"]) == EXIT_OK
    assert capsys.readouterr().out.startswith("Sdeep-B-Multi-ii")


def test_unknown_flag_is_usage_error():
    assert main(["train", "--no-such-flag", "1"]) == EXIT_CONFIG


def test_params_grid_ordering(capsys):
    assert main(["params", "--all-configs", "true"]) == EXIT_OK
    counts = {}
    for line in capsys.readouterr().out.splitlines():
        name, n = line.split()
        counts[name] = int(n.replace(",", ""))
    assert counts["Sdeep-B-Multi-ii"] < counts["Sdeep-C-Multi-ii"] < counts["Sdeep-A-Multi-i"]
    assert len(counts) == 5


def test_arch_preset_resolution():
    cfg = RunConfig(arch="Sdeep-B-Multi-ii").model_config()
    assert (cfg.extraction, cfg.attention_mode, cfg.strategy) == ("B", "multi", "ii")


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--gradcheck-seeds", "1"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "channel_attention" in out and "max relative error" in out
