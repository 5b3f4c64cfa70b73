import json
import subprocess
import sys

import pytest

from rhco.cli import build_parser, main
from rhco.pipeline import TrainingConfig


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Dataset, attention table and positive graphs built once through the CLI."""
    d = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(d / "data"), "--targets", "120", "--aux", "30", "--seed", "7"]) == 0
    assert main(["pretrain", "--data", str(d / "data"), "--out", str(d / "att.tsv"), "--epochs", "5"]) == 0
    assert main(["build-pos", "--data", str(d / "data"), "--attention", str(d / "att.tsv"),
                 "--out", str(d / "pos.tsv"), "--tpos", "5"]) == 0
    return d


SMALL = ["--d", "8", "--d-rel", "4", "--heads", "2", "--batch-size", "32", "--steps", "5"]


def test_stage_chain_prints_metrics(workdir, capsys):
    d = workdir
    code, out, _ = run(capsys, "train", "--data", d / "data", "--positives", d / "pos.tsv", "--out", d / "m.ckpt",
                       "--log", d / "log.jsonl", "--epochs", "2", *SMALL)
    assert code == 0 and json.loads(out)["checkpoint"] == str(d / "m.ckpt")
    assert len((d / "log.jsonl").read_text().splitlines()) == 2
    code, out, _ = run(capsys, "eval", "--data", d / "data", "--positives", d / "pos.tsv",
                       "--checkpoint", d / "m.ckpt", "--predictions", d / "pred.tsv")
    metrics = json.loads(out)
    assert code == 0 and metrics["split"] == "test" and 0 <= metrics["accuracy"] <= 1
    assert len((d / "pred.tsv").read_text().splitlines()) == 120
    code, out, _ = run(capsys, "export-emb", "--data", d / "data", "--positives", d / "pos.tsv",
                       "--checkpoint", d / "m.ckpt", "--out", d / "emb.tsv")
    assert code == 0 and json.loads(out) == {"rows": 120, "dim": 8}


def test_zero_epochs_then_eval(workdir, capsys):
    d = workdir
    assert run(capsys, "train", "--data", d / "data", "--positives", d / "pos.tsv", "--out", d / "z.ckpt",
               "--epochs", "0", *SMALL)[0] == 0
    code, out, _ = run(capsys, "eval", "--data", d / "data", "--positives", d / "pos.tsv", "--checkpoint",
                       d / "z.ckpt", "--split", "valid")
    assert code == 0 and json.loads(out)["split"] == "valid"


def test_build_pos_is_byte_identical(workdir):
    d = workdir
    main(["build-pos", "--data", str(d / "data"), "--attention", str(d / "att.tsv"), "--out", str(d / "again.tsv"),
          "--tpos", "5"])
    assert (d / "again.tsv").read_bytes() == (d / "pos.tsv").read_bytes()


def test_pretrain_is_byte_identical(workdir):
    d = workdir
    main(["pretrain", "--data", str(d / "data"), "--out", str(d / "att2.tsv"), "--epochs", "5"])
    assert (d / "att2.tsv").read_bytes() == (d / "att.tsv").read_bytes()


TRAIN = ["train", "--data", "x", "--positives", "y", "--out", "z"]


@pytest.mark.parametrize("argv", [[], ["fly"], ["train", "--data", "x"], TRAIN + ["--bogus", "1"],
                                  TRAIN + ["--mode", "both"]])
def test_usage_errors_exit_1(argv, capsys):
    code, _, err = run(capsys, *argv)
    assert code == 1 and err.startswith("error:")


def test_contract_violation_exits_1(workdir, capsys):
    d = workdir
    code, _, _ = run(capsys, "train", "--data", d / "data", "--positives", d / "pos.tsv", "--out", d / "x.ckpt",
                     "--tau", "0")
    assert code == 1


def test_data_errors_exit_2(workdir, tmp_path, capsys):
    d = workdir
    assert run(capsys, "pretrain", "--data", tmp_path / "missing", "--out", tmp_path / "a.tsv")[0] == 2
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"nope")
    code, _, err = run(capsys, "eval", "--data", d / "data", "--positives", d / "pos.tsv", "--checkpoint", bad)
    assert code == 2 and "data error" in err
    att = tmp_path / "att.tsv"
    lines = (d / "att.tsv").read_text().splitlines()
    lines[0] = "\t".join(lines[0].split("\t")[:3] + ["1.5"])
    att.write_text("\n".join(lines) + "\n")
    code, _, err = run(capsys, "build-pos", "--data", d / "data", "--attention", att, "--out", tmp_path / "p.tsv")
    assert code == 2 and "data error" in err


def test_divergence_exits_3(workdir, capsys):
    d = workdir
    with pytest.warns(RuntimeWarning):
        code, _, err = run(capsys, "train", "--data", d / "data", "--positives", d / "pos.tsv", "--out",
                           d / "nan.ckpt", "--epochs", "3", "--lr", "1e250", *SMALL)
    assert code == 3 and err.startswith("numeric failure")


def test_help_defaults_match_config():
    sub = build_parser()._subparsers._group_actions[0].choices["train"]
    defaults = {a.dest: a.default for a in sub._actions}
    for name, value in TrainingConfig().__dict__.items():
        assert defaults[name] == value, name


def test_bench_command(tmp_path, capsys):
    code, out, _ = run(capsys, "bench", "--start", "200", "--doublings", "1", "--repeats", "1",
                       "--csv", tmp_path / "b.csv")
    res = json.loads(out)
    assert code == 0 and [r["size"] for r in res["rows"]] == [200, 400]
    assert len((tmp_path / "b.csv").read_text().splitlines()) == 3


def test_console_entry_point():
    out = subprocess.run([sys.executable, "-m", "rhco.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "build-pos" in out.stdout
