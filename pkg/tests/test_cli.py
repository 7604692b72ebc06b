import argparse
import csv
import json
import subprocess
import sys

import pytest

from biseq import cli
from biseq.errors import ConfigurationError, NumericError

FAST = ["--rnn_size", "8", "--embed_dim", "8", "--max_epochs", "3", "--patience", "3", "--quiet"]


@pytest.fixture
def synth(tmp_path):
    path = tmp_path / "synth.tsv"
    assert cli.run(["synth", "--n", "200", "--groups", "5", "--seed", "0", "--out", str(path)]) == 0
    return path


def test_enumerate_prints_19(capsys):
    assert cli.run(["enumerate"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 19 and len(set(lines)) == 19
    assert all(line.startswith("combination=") for line in lines)


def test_synth_file(synth):
    lines = synth.read_text().splitlines()
    assert len(lines) == 200 and all(len(line.split("\t")) == 4 for line in lines)


def test_eval_prints_metrics(tmp_path, capsys):
    scores = tmp_path / "s.tsv"
    scores.write_text("0.9\t1\n0.8\t0\n0.4\t1\n0.3\t0\n")
    assert cli.run(["eval", "--scores", str(scores), "--k", "2", "--out", str(tmp_path / "m.json")]) == 0
    out = dict(line.split("\t") for line in capsys.readouterr().out.splitlines())
    assert out["auc"] == "0.7500" and out["avgp"] == "0.8333" and out["p@2"] == "0.5000"
    assert json.loads((tmp_path / "m.json").read_text())["overall"]["auc"] == 0.75


def test_eval_grouped_adds_macro(tmp_path, capsys):
    scores = tmp_path / "s.tsv"
    scores.write_text("0.9\t1\ta\n0.1\t0\ta\n0.2\t1\tb\n0.7\t0\tb\n")
    assert cli.run(["eval", "--scores", str(scores)]) == 0
    out = dict(line.split("\t") for line in capsys.readouterr().out.splitlines())
    assert out["macro_auc"] == "0.5000"


def test_missing_file_exits_1(tmp_path, capsys):
    assert cli.run(["eval", "--scores", str(tmp_path / "none.tsv")]) == 1
    assert "error" in capsys.readouterr().err


def test_unknown_flag_exits_1():
    with pytest.raises(SystemExit) as info:
        cli.run(["train", "--dropout", "0.5"])
    assert info.value.code == 1


def test_missing_required_exits_1():
    with pytest.raises(SystemExit) as info:
        cli.run(["train", "--out", "x"])
    assert info.value.code == 1


def test_invalid_spec_exits_1(synth, tmp_path):
    code = cli.run(["train", "--data", str(synth), "--out", str(tmp_path / "o"), "--combination",
                    "conditional_input", "--context", "cbow", *FAST])
    assert code == 1


def test_numeric_failure_exits_2(synth, tmp_path, monkeypatch):
    def boom(*a, **kw):
        raise NumericError("loss is nan")

    monkeypatch.setattr(cli, "train_model", boom)
    assert cli.run(["train", "--data", str(synth), "--out", str(tmp_path / "o"), *FAST]) == 2


def _subparsers(parser):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices
    return {}


def test_every_flag_documented():
    for name, sub in _subparsers(cli.build_parser()).items():
        for action in sub._actions:
            if isinstance(action, argparse._HelpAction):
                continue
            assert action.help, f"{name} {action.option_strings} has no help"


def test_help_lists_every_flag():
    for name, sub in _subparsers(cli.build_parser()).items():
        text = sub.format_help()
        for action in sub._actions:
            for opt in action.option_strings:
                assert opt in text, f"{name}: {opt} missing from --help"


def test_config_file_and_precedence(tmp_path):
    conf = tmp_path / "c.conf"
    conf.write_text("# model\nrnn_size=12\nlr=0.01\nbatch_size=16\n")
    args = cli.build_parser().parse_args(["train", "--data", "d", "--out", "o", "--config", str(conf),
                                          "--spec", "rnn_size=20 cell=lstm", "--rnn_size", "24"])
    spec, config = cli._resolve(args)
    assert spec.rnn_size == 24 and spec.cell == "lstm" and spec.learning_rate == 0.01
    assert config.batch_size == 16


def test_config_unknown_key(tmp_path):
    conf = tmp_path / "c.conf"
    conf.write_text("dropout=0.5\n")
    with pytest.raises(ConfigurationError, match="line 1"):
        cli.read_config(conf)


def test_train_outputs_and_reproducible(synth, tmp_path):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert cli.run(["train", "--data", str(synth), "--out", str(out), "--seed", "3", *FAST]) == 0
        outs.append(out)
    for f in ("results.csv", "scores.tsv", "history.jsonl", "manifest.json"):
        assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes(), f
    row = next(csv.DictReader(open(outs[0] / "results.csv")))
    assert row["seed"] == "3" and "test_auc" in row
    manifest = json.loads((outs[0] / "manifest.json").read_text())
    assert not set(manifest["splits"]["train"]) & set(manifest["splits"]["test"])


def test_scores_feed_eval(synth, tmp_path, capsys):
    out = tmp_path / "t"
    assert cli.run(["train", "--data", str(synth), "--out", str(out), *FAST]) == 0
    assert cli.run(["eval", "--scores", str(out / "scores.tsv")]) == 0
    assert "auc\t" in capsys.readouterr().out


def test_from_results_replays_winner(synth, tmp_path):
    grid = tmp_path / "g.json"
    grid.write_text(json.dumps({"cell": ["gru"], "rnn_size": [8], "learning_rate": [0.01]}))
    gout = tmp_path / "grid"
    assert cli.run(["grid", "--data", str(synth), "--out", str(gout), "--grid", str(grid), *FAST]) == 0
    args = cli.build_parser().parse_args(["train", "--data", "d", "--out", "o",
                                          "--from_results", str(gout / "results.csv")])
    spec, _ = cli._resolve(args)
    assert spec.rnn_size == 8 and spec.learning_rate == 0.01


def test_synth_then_lomo(synth, tmp_path):
    out = tmp_path / "lomo"
    assert cli.run(["lomo", "--data", str(synth), "--out", str(out), *FAST]) == 0
    rows = list(csv.reader(open(out / "results.csv")))
    assert [r[0] for r in rows[1:]] == ["g0", "g1", "g2", "g3", "g4", "macro"]
    manifest = json.loads((out / "manifest.json").read_text())
    assert len(manifest["folds"]) == 5


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "biseq.cli", "enumerate"], capture_output=True, text=True)
    assert proc.returncode == 0 and len(proc.stdout.splitlines()) == 19
    proc = subprocess.run([sys.executable, "-m", "biseq.cli", "bogus"], capture_output=True, text=True)
    assert proc.returncode == 1
