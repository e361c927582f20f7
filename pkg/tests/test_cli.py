import subprocess
import sys

import pytest

from colflow.cli import build_parser, main
from colflow.csvio import CsvOptions, read_csv


def run_main(argv, capsys):
    code = main(argv)
    cap = capsys.readouterr()
    return code, cap.out, cap.err


# ---------------------------------------------------------------- parsing

def test_unknown_subcommand_is_usage_error(capsys):
    assert main(["frobnicate"]) == 2


def test_missing_subcommand_is_usage_error(capsys):
    assert main([]) == 2


def test_bad_flag_value_is_usage_error(capsys):
    assert main(["bench-join", "--rows", "not-a-number"]) == 2


def test_help_exits_cleanly(capsys):
    assert main(["--help"]) == 0


def test_parser_has_all_subcommands():
    ap = build_parser()
    text = ap.format_help()
    for name in ("gen-data", "pipeline", "bench-join", "bench-sort",
                 "selftest"):
        assert name in text


# ---------------------------------------------------------------- gen-data

def test_gen_data_writes_readable_csvs(tmp_path, capsys):
    prefix = str(tmp_path / "d")
    code, out, err = run_main(
        ["gen-data", "--prefix", prefix, "--rows", "50", "--seed", "3"],
        capsys)
    assert code == 0
    for name in ("response", "drug_feat_a", "drug_feat_b", "rna"):
        path = tmp_path / f"d_{name}.csv"
        assert path.exists()
        with open(path) as f:
            t = read_csv(f, CsvOptions())
        assert t.nrows > 0
        assert f"wrote {t.nrows} rows" in err
    with open(tmp_path / "d_response.csv") as f:
        resp = read_csv(f, CsvOptions())
    assert resp.nrows == 50
    names = [n for n, _ in resp.schema.fields]
    assert "drug_id" in names and "growth" in names


def test_gen_data_deterministic(tmp_path, capsys):
    p1, p2 = str(tmp_path / "a"), str(tmp_path / "b")
    run_main(["gen-data", "--prefix", p1, "--rows", "30"], capsys)
    run_main(["gen-data", "--prefix", p2, "--rows", "30"], capsys)
    a = (tmp_path / "a_response.csv").read_text()
    b = (tmp_path / "b_response.csv").read_text()
    assert a == b


# ---------------------------------------------------------------- pipeline

def test_pipeline_threads_metrics_csv(tmp_path, capsys):
    out_file = tmp_path / "metrics.csv"
    code, out, err = run_main(
        ["pipeline", "--local-threads", "2", "--rows", "300",
         "--epochs", "3", "--out", str(out_file)],
        capsys)
    assert code == 0
    lines = out_file.read_text().strip().split("\n")
    assert lines[0] == "stage,rank,rows_in,rows_out,seconds"
    ranks = {int(line.split(",")[1]) for line in lines[1:]}
    assert ranks == {0, 1}
    # per-epoch loss report on stderr
    assert "epoch,global_mse" in err
    assert err.count("\n") >= 4


# ---------------------------------------------------------------- bench

@pytest.mark.parametrize("cmd", ["bench-join", "bench-sort"])
def test_bench_csv_shape(cmd, capsys):
    code, out, err = run_main(
        [cmd, "--local-threads", "2", "--rows", "2000", "--repeat", "2"],
        capsys)
    assert code == 0
    lines = out.strip().split("\n")
    assert lines[0] == "op,world,rows,uniqueness,repeat,seconds"
    assert len(lines) == 3  # one line per repeat, rank 0 only
    for line in lines[1:]:
        op, world, rows, uniq, rep, secs = line.split(",")
        assert op == cmd.split("-")[1]
        assert int(world) == 2
        assert int(rows) == 2000
        assert float(secs) >= 0.0
    assert "median" in err


# ---------------------------------------------------------------- selftest

def test_selftest_passes(capsys):
    code, out, err = run_main(["selftest", "--seed", "12"], capsys)
    assert code == 0
    for world in (1, 2, 4):
        assert f"selftest world={world}: ok" in err


# ---------------------------------------------------------------- tcp launch

def _free_ports(n):
    import socket

    socks, ports = [], []
    for _ in range(n):
        s = socket.socket()
        s.bind(("127.0.0.1", 0))
        socks.append(s)
        ports.append(s.getsockname()[1])
    for s in socks:
        s.close()
    return ports


def test_launch_mode_tcp_bench(tmp_path):
    ports = _free_ports(2)
    hostfile = tmp_path / "hosts"
    hostfile.write_text(
        "".join(f"{r} 127.0.0.1:{p}\n" for r, p in enumerate(ports)))
    out_file = tmp_path / "bench.csv"
    proc = subprocess.run(
        [sys.executable, "-m", "colflow.cli", "bench-sort",
         "--rows", "500", "--repeat", "1",
         "--launch", "2", "--hostfile", str(hostfile),
         "--out", str(out_file)],
        capture_output=True, text=True, timeout=60)
    assert proc.returncode == 0, proc.stderr
    # rank 0 wrote the csv (workers inherit --out)
    text = out_file.read_text()
    assert text.startswith("op,world,rows,uniqueness,repeat,seconds")
    assert ",2,500," in text


def test_rank_mode_requires_hostfile(capsys):
    with pytest.raises(SystemExit):
        main(["bench-join", "--rank", "0"])
