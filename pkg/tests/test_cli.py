import json
import subprocess
import sys

import pytest

from vlkit import cli


def _run(tmp_path, *argv, name="out"):
    out = tmp_path / name
    code = cli.main([*argv, "--out", str(out), "--no-timestamps"])
    return code, out


def test_unknown_command(capsys):
    assert cli.main(["frobnicate"]) == 2
    assert "unknown command 'frobnicate'" in capsys.readouterr().err
    assert cli.main([]) == 2


def test_bad_config_key_names_it(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("trials = 3\nbogus_key = 1\n")
    code, _ = _run(tmp_path, "niah", "--config", str(cfg))
    assert code == 2
    assert "bogus_key" in capsys.readouterr().err


def test_bad_override_value(tmp_path, capsys):
    code, _ = _run(tmp_path, "niah", "--trials", "many")
    assert code == 2 and "trials" in capsys.readouterr().err


def test_negative_seed_rejected(tmp_path):
    with pytest.raises(SystemExit) as e:
        _run(tmp_path, "niah", "--seed", "-1")
    assert e.value.code == 2


def test_missing_config_file(tmp_path):
    with pytest.raises(SystemExit):
        _run(tmp_path, "niah", "--config", str(tmp_path / "nope.cfg"))


def test_niah_oracle_writes_outputs(tmp_path):
    code, out = _run(tmp_path, "niah", "--trials", "5")
    assert code == 0
    for f in ("config.json", "metrics.jsonl", "summary.txt", "niah_report.jsonl", "niah_table.txt"):
        assert (out / f).exists()
    cfg = json.loads((out / "config.json").read_text())
    assert cfg["trials"] == 5 and cfg["command"] == "niah"
    rows = [json.loads(l) for l in (out / "niah_report.jsonl").read_text().splitlines()]
    assert [r["recall"] for r in rows] == [1.0] * 6
    assert "overall: PASS" in (out / "summary.txt").read_text().splitlines()


def test_niah_unknown_model(tmp_path, capsys):
    code, _ = _run(tmp_path, "niah", "--model", "psychic", "--trials", "1")
    assert code == 2 and "'model'" in capsys.readouterr().err


def test_metrics_byte_identical_without_timestamps(tmp_path):
    a = _run(tmp_path, "pipe-verify", "--n-examples", "500", "--checkpoint-step", "123", "--n-checks", "3",
             "--mix-draws", "20000", name="a")
    b = _run(tmp_path, "pipe-verify", "--n-examples", "500", "--checkpoint-step", "123", "--n-checks", "3",
             "--mix-draws", "20000", name="b")
    assert a[0] == b[0] == 0
    assert (a[1] / "metrics.jsonl").read_bytes() == (b[1] / "metrics.jsonl").read_bytes()
    assert (a[1] / "summary.txt").read_bytes() == (b[1] / "summary.txt").read_bytes()


def test_pipe_verify_rejects_bad_step(tmp_path, capsys):
    code, _ = _run(tmp_path, "pipe-verify", "--n-examples", "50", "--checkpoint-step", "51", "--n-checks", "1")
    assert code == 2 and "checkpoint_step" in capsys.readouterr().err


def test_rl_small(tmp_path):
    code, out = _run(tmp_path, "rl", "--n-seeds", "2", "--iterations", "20")
    assert code == 0
    assert len((out / "metrics.jsonl").read_text().splitlines()) == 21  # initial point plus one per iteration


def test_console_script_help():
    r = subprocess.run([sys.executable, "-m", "vlkit.cli", "niah", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "--trials" in r.stdout
