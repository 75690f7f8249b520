import csv
import json

import numpy as np
import pytest

from dass.cli import main
from dass.features import write_wav
from dass.models.checkpoint import load_arrays


def run(argv, capsys):
    code = main(argv)
    out, err = capsys.readouterr()
    return code, out, err


def summary(out):
    return json.loads(out.strip().splitlines()[-1])


def test_unknown_subcommand_is_usage_error(capsys):
    code, _, _ = run(["fly"], capsys)
    assert code == 2
    code, _, _ = run(["bench", "--no-such-flag", "1"], capsys)
    assert code == 2


def test_missing_config_names_path(tmp_path, capsys):
    missing = tmp_path / "nope.json"
    code, _, err = run(["bench", "--config", str(missing), "--run-dir", str(tmp_path / "r")], capsys)
    assert code == 2
    msg = json.loads(err.strip().splitlines()[-1])
    assert msg["path"] == str(missing) and str(missing) in msg["message"]


def test_bad_config_contents(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"bogus": 1}))
    assert run(["bench", "--config", str(cfg), "--run-dir", str(tmp_path / "r")], capsys)[0] == 2
    cfg.write_text(json.dumps({"config_version": 99}))
    assert run(["bench", "--config", str(cfg), "--run-dir", str(tmp_path / "r")], capsys)[0] == 2


def test_runtime_failure_exit_1(tmp_path, capsys):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"garbage")
    code, _, err = run(["eval", "--checkpoint", str(bad), "--data", str(tmp_path),
                        "--run-dir", str(tmp_path / "r")], capsys)
    assert code == 1 and json.loads(err.strip().splitlines()[-1])["status"] == "error"


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["gen-data", "--train-clips", "48", "--eval-clips", "24", "--seed", "3",
                 "--run-dir", str(out)]) == 0
    return out


def test_gen_data_outputs(data_dir):
    assert (data_dir / "train.arr").is_file() and (data_dir / "eval.arr").is_file()
    snap = json.loads((data_dir / "config.json").read_text())
    assert snap["train_clips"] == 48 and snap["config_version"] == 1


def test_train_deterministic_and_eval(data_dir, tmp_path, capsys):
    hashes = []
    for i in range(2):
        code, out, _ = run(["train", "--data", str(data_dir), "--preset", "tiny", "--seed", "7", "--epochs", "1",
                            "--run-dir", str(tmp_path / f"t{i}")], capsys)
        assert code == 0
        hashes.append(summary(out)["checkpoint_sha256"])
    assert hashes[0] == hashes[1]
    log = (tmp_path / "t0" / "metrics.jsonl").read_text().splitlines()
    assert set(json.loads(log[0])) == {"epoch", "lr", "train_loss", "eval_mAP"}
    code, out, _ = run(["eval", "--checkpoint", str(tmp_path / "t0" / "model.ckpt"), "--data", str(data_dir),
                        "--run-dir", str(tmp_path / "e")], capsys)
    assert code == 0 and 0 < summary(out)["mAP"] <= 1


def test_config_snapshot_reproduces(data_dir, tmp_path, capsys):
    code, out, _ = run(["train", "--data", str(data_dir), "--seed", "2", "--epochs", "1", "--lr", "0.002",
                        "--run-dir", str(tmp_path / "a")], capsys)
    assert code == 0
    first = summary(out)["checkpoint_sha256"]
    code, out, _ = run(["train", "--config", str(tmp_path / "a" / "config.json"),
                        "--run-dir", str(tmp_path / "b")], capsys)
    assert code == 0 and summary(out)["checkpoint_sha256"] == first
    assert json.loads((tmp_path / "a" / "config.json").read_text()) == \
        json.loads((tmp_path / "b" / "config.json").read_text())


def test_derived_run_dir_from_env(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("DASS_RUN_ROOT", str(tmp_path / "root"))
    wav = tmp_path / "x.wav"
    write_wav(wav, np.sin(np.arange(16000) * 0.1) * 0.3, 16000)
    code, out, _ = run(["features", "--wav", str(wav)], capsys)
    assert code == 0
    run_dir = summary(out)["run_dir"]
    assert run_dir.startswith(str(tmp_path / "root" / "features-"))
    arrays, header = load_arrays(summary(out)["output"])
    assert arrays["fbank"].shape == (98, 128) and header["kind"] == "features"
    assert run(["features", "--wav", str(tmp_path / "missing.wav"), "--run-dir", str(tmp_path / "f")],
               capsys)[0] == 2


def test_niah_nine_conditions(data_dir, tmp_path, capsys):
    code, out, _ = run(["niah", "--data", str(data_dir), "--clips", "8", "--lengths", "10,30,50",
                        "--positions", "0,0.5,1", "--filler", "zeropad", "--run-dir", str(tmp_path / "n")],
                       capsys)
    assert code == 0 and summary(out)["conditions"] == 9
    with open(tmp_path / "n" / "niah.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 9 and {r["status"] for r in rows} == {"ok"}
    assert (tmp_path / "n" / "plots" / "drop_vs_position.csv").is_file()


def test_bench_requires_range(tmp_path, capsys):
    code, _, _ = run(["bench", "--tokens", "256,512,1024", "--run-dir", str(tmp_path / "b")], capsys)
    assert code == 2
    code, out, _ = run(["bench", "--tokens", "64,128,256,512", "--run-dir", str(tmp_path / "b")], capsys)
    assert code == 0
    assert set(summary(out)["slopes"]) == {"dass", "attention"}
    assert (tmp_path / "b" / "bench.csv").is_file()
