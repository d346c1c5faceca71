import csv
import io
import subprocess
import sys

import pytest

from msvil.cli import BENCH_HEADER, bench_point, loglog_slope, main


def run(capsys, *argv):
    try:
        code = main(list(argv))
    except SystemExit as e:  # argparse usage errors
        code = e.code
    out = capsys.readouterr()
    return code, out.out, out.err


def test_check_passes_and_is_deterministic(capsys):
    code, out, _ = run(capsys, "check", "--mechanism", "vil", "full", "--grid-max", "4")
    assert code == 0
    assert "PASS" in out and "FAIL" not in out
    assert run(capsys, "check", "--mechanism", "vil", "full", "--grid-max", "4")[1] == out


def test_usage_errors_exit_2(capsys):
    assert run(capsys, "check", "--mechanism", "nosuch")[0] == 2
    code, _, err = run(capsys, "flops", "--config", "ViL-Huge")
    assert code == 2 and "ViL-Tiny" in err
    assert run(capsys, "flops", "--config", "ViL-Small", "--resolution", "100")[0] == 2
    assert run(capsys, "bench", "--mechanism", "vil", "--repeats", "2")[0] == 2
    assert run(capsys, "config")[0] == 2


def test_flops_output_and_csv(capsys, tmp_path):
    path = tmp_path / "f.csv"
    code, out, _ = run(capsys, "flops", "--config", "Small-1-2-8-1", "--csv", str(path))
    assert code == 0
    total = float(out.strip().splitlines()[-1].split()[-1])
    assert abs(total - 4.86) / 4.86 < 0.10
    rows = list(csv.DictReader(path.open()))
    assert sum(int(r["flops"]) for r in rows) == pytest.approx(total * 1e9, rel=1e-3)
    code, out, _ = run(capsys, "flops", "--config", "ViL-Small", "--attention", "sra32")
    assert code == 0 and "total" in out


def test_params_csv_to_stdout(capsys):
    code, out, _ = run(capsys, "params", "--config", "DeiT-Tiny/16", "--csv", "-")
    assert code == 0
    header = next(line for line in out.splitlines() if line.startswith("config,"))
    assert header == "config,stage,component,params"
    assert "5.6" in out.splitlines()[0] or "5.7" in out.splitlines()[0]


def test_forward_hash_is_deterministic(capsys, tmp_path):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text("name = tiny\nnum_classes = 5\nstage = n=1 p=4 h=1 d=16 window=3\n"
                   "stage = n=1 p=2 h=2 d=32 window=3\n")
    w = tmp_path / "w.vilw"
    code, out, _ = run(capsys, "forward", "--config", str(cfg), "--resolution", "32",
                       "--save-weights", str(w))
    assert code == 0
    assert "features: 4x4x32" in out and "logits: 5" in out
    assert "logit min/mean/max: 0 0 0" in out
    again = run(capsys, "forward", "--config", str(cfg), "--resolution", "32", "--seed", "0",
                "--weights", str(w))[1]
    assert again == out
    other = run(capsys, "forward", "--config", str(cfg), "--resolution", "32", "--seed", "1")[1]
    assert other.splitlines()[-1] != out.splitlines()[-1]
    w.write_bytes(b"junk")
    assert run(capsys, "forward", "--config", str(cfg), "--resolution", "32",
               "--weights", str(w))[0] == 2


def test_config_round_trip_through_cli(capsys, tmp_path):
    out_path = tmp_path / "s.cfg"
    assert run(capsys, "config", "--config", "ViL-Small", "--windows", "vil-384",
               "--out", str(out_path))[0] == 0
    assert "window=25" in out_path.read_text()
    code, out, _ = run(capsys, "params", "--config", str(out_path))
    assert code == 0
    assert "ViL-Tiny" in run(capsys, "config", "--list")[1]


def test_bench_csv(capsys, tmp_path):
    path = tmp_path / "b.csv"
    code, out, _ = run(capsys, "bench", "--mechanism", "vil,full,performer", "--resolutions", "8,12",
                       "--d", "16", "--csv", str(path))
    assert code == 0 and "slope vil/chunk" in out
    rows = list(csv.DictReader(path.open()))
    assert list(rows[0]) == BENCH_HEADER
    assert [r["impl"] for r in rows] == ["chunk", "chunk", "dense", "dense", "native", "native"]
    assert all(int(r["repeats"]) >= 3 and int(r["median_ns"]) > 0 for r in rows)


def test_bench_point_and_slope():
    recs = [bench_point("vil", "dense", n, d=8, window=3, backward=True) for n in (4, 6)]
    assert recs[0].attn_pairs < recs[1].attn_pairs
    assert isinstance(loglog_slope(recs), float)
    with pytest.raises(ValueError):
        bench_point("vil", "chunk", 4, repeats=1)


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "msvil", "config", "--list"], capture_output=True,
                       text=True, check=False)
    assert r.returncode == 0 and "DeiT-Small/16" in r.stdout
