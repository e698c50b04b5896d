import csv
import json

import pytest

from blindfl.cli import main
from blindfl.runtime.federation import METRIC_COLUMNS

BASE = "schema_version: 1\nclients: 4\nselected: 4\nsamples: 240\nrounds: 2\nepochs: 1\nhidden: [8]\n"


def write(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text)
    return path


def rows(path):
    with open(path) as f:
        return list(csv.reader(f))


def test_run_writes_metrics_and_summary(tmp_path, capsys):
    cfg = write(tmp_path, "b.yaml", BASE + "fhe: ckks\nsegmentation: on\n")
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o"), "--deterministic"]) == 0
    table = rows(tmp_path / "o" / "metrics.csv")
    assert tuple(table[0]) == METRIC_COLUMNS and len(table) == 3
    assert all(r[2:5] == ["0.000"] * 3 for r in table[1:])
    summary = json.loads((tmp_path / "o" / "summary.json").read_text())
    assert summary["run_type"] == "blindfl" and summary["rounds"] == 2
    assert summary["total_bytes_up"] > 0


def test_identical_seed_gives_identical_files(tmp_path):
    cfg = write(tmp_path, "s.yaml", BASE + "fhe: off\n")
    for out in ("a", "b"):
        assert main(["run", "--config", str(cfg), "--out", str(tmp_path / out), "--deterministic", "--seed", "7"]) == 0
    for name in ("metrics.csv", "summary.json", "config.yaml"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_malformed_config_exits_2_without_outputs(tmp_path, capsys):
    cfg = write(tmp_path, "bad.yaml", BASE + "fhe: off\nepochz: 3\n")
    out = tmp_path / "never"
    assert main(["run", "--config", str(cfg), "--out", str(out)]) == 2
    assert not out.exists()
    err = capsys.readouterr().err
    assert "epochz" in err and "line 9" in err
    assert main(["run", "--config", str(tmp_path / "missing.yaml"), "--out", str(out)]) == 2


def test_attack_sweep(tmp_path):
    cfg = write(tmp_path, "a.yaml", "schema_version: 1\nwidths: [64, 16, 12, 10]\ntrials: 15\nseed: 4\n")
    assert main(["attack", "--config", str(cfg), "--out", str(tmp_path / "x")]) == 0
    assert main(["attack", "--config", str(cfg), "--out", str(tmp_path / "y")]) == 0
    table = rows(tmp_path / "x" / "attack.csv")
    assert table[0] == ["n", "N", "trials", "mean_S_prime", "psnr_mean", "ssim_mean", "recovery_success_rate"]
    assert [r[0] for r in table[1:]] == ["1", "2", "3"] and all(r[2] == "15" for r in table[1:])
    assert (tmp_path / "x" / "attack.csv").read_bytes() == (tmp_path / "y" / "attack.csv").read_bytes()
    zero = write(tmp_path, "z.yaml", "schema_version: 1\ntrials: 0\n")
    assert main(["attack", "--config", str(zero), "--out", str(tmp_path / "z")]) == 2


def test_four_run_types_and_report(tmp_path, capsys):
    kinds = {"standard": "fhe: off\nsegmentation: off\n", "fhe": "fhe: oracle\nsegmentation: off\n",
             "cms": "fhe: off\nsegmentation: on\n", "blindfl": "fhe: oracle\nsegmentation: on\n"}
    paths = []
    for name, extra in kinds.items():
        cfg = write(tmp_path, f"{name}.yaml", BASE + extra)
        assert main(["run", "--config", str(cfg), "--out", str(tmp_path / name), "--deterministic"]) == 0
        assert json.loads((tmp_path / name / "summary.json").read_text())["run_type"] == name
        paths.append(str(tmp_path / name / "metrics.csv"))
    capsys.readouterr()
    assert main(["report", *paths]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 5 and [ln.split()[0] for ln in lines[1:]] == list(kinds)
    assert main(["report", paths[0]]) == 0
    assert len(capsys.readouterr().out.strip().splitlines()) == 2
    odd = write(tmp_path, "odd.csv", "round,accuracy\n1,0.5\n")
    assert main(["report", paths[0], str(odd)]) == 2
    ragged = write(tmp_path, "ragged.csv", ",".join(METRIC_COLUMNS) + "\n1,0.5\n")
    assert main(["report", str(ragged)]) == 2


def test_keys(tmp_path, capsys):
    cfg = write(tmp_path, "k.yaml", BASE + "fhe: ckks\n")
    assert main(["keys", "--config", str(cfg), "--out", str(tmp_path / "k")]) == 0
    assert len(capsys.readouterr().out.strip()) == 32
    assert (tmp_path / "k" / "public.key").stat().st_size > 0
    off = write(tmp_path, "off.yaml", BASE + "fhe: off\n")
    assert main(["keys", "--config", str(off), "--out", str(tmp_path / "k2")]) == 2


def test_usage_errors_exit_2():
    with pytest.raises(SystemExit) as info:
        main([])
    assert info.value.code == 2
