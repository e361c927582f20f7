"""Single-binary entry point.

Subcommands: gen-data, pipeline, bench-join, bench-sort, selftest.
Launch modes:
  --local-threads N          workers as threads in this process (default 1)
  --rank R --hostfile F      this process is one tcp worker
  --launch N --hostfile F    fork N tcp worker processes and wait

The parent in --launch mode only spawns and collects exit codes; all
coordination happens inside the symmetric workers.
"""

from __future__ import annotations

import argparse
import statistics
import subprocess
import sys
import time

from . import comm
from .columnar import DataType, Table, table
from .csvio import CsvOptions, write_csv
from .distops import DistContext, dist_join, dist_sort
from .localops import JoinKind
from .pipeline import PipelineConfig, generate_synthetic, metrics_csv, run_pipeline
from .tensor import NetConfig, SplitMix64, TrainConfig


def _add_launch_flags(p: argparse.ArgumentParser):
    p.add_argument("--local-threads", type=int, default=None, metavar="N")
    p.add_argument("--rank", type=int, default=None, metavar="R")
    p.add_argument("--launch", type=int, default=None, metavar="N")
    p.add_argument("--hostfile", type=str, default=None, metavar="F")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=str, default=None, metavar="FILE")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="colflow")
    sub = ap.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen-data", help="write synthetic CSV datasets")
    _add_launch_flags(g)
    g.add_argument("--prefix", type=str, default="colflow_data")
    g.add_argument("--rows", type=int, default=4000)

    p = sub.add_parser("pipeline", help="run the end-to-end pipeline")
    _add_launch_flags(p)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--hidden", type=int, default=16)
    p.add_argument("--blocks", type=int, default=2)
    p.add_argument("--dropout", type=float, default=0.0)
    p.add_argument("--rows", type=int, default=4000)

    for name in ("bench-join", "bench-sort"):
        b = sub.add_parser(name, help=f"time {name.split('-')[1]} scaling")
        _add_launch_flags(b)
        b.add_argument("--rows", type=int, default=100000)
        b.add_argument("--uniqueness", type=float, default=0.10)
        b.add_argument("--repeat", type=int, default=3)

    s = sub.add_parser("selftest", help="oracle-equivalence suite")
    _add_launch_flags(s)
    return ap


def _out_stream(args):
    if args.out:
        return open(args.out, "w")
    return sys.stdout


# -- worker bodies ---------------------------------------------------------

def _bench_table(seed: int, rows: int, uniqueness: float,
                 rank: int, world: int) -> Table:
    # `rows` is the global relation size; each rank loads an equal share
    local = rows // world + (1 if rank < rows % world else 0)
    rng = SplitMix64(seed * 1315423911 + rank)
    n_keys = max(1, int(rows * uniqueness))
    keys = [rng.randint(n_keys) for _ in range(local)]
    vals = [rng.uniform() for _ in range(local)]
    return table({"k": keys, "v": vals},
                 dtypes={"k": DataType.Int64, "v": DataType.Float64})


def _bench_worker(c, args, op: str):
    ctx = DistContext(c)
    lines = []
    for rep in range(args.repeat):
        t = _bench_table(args.seed + rep, args.rows, args.uniqueness,
                         c.rank, c.world_size)
        if op == "join":
            u = _bench_table(args.seed + rep + 7919, args.rows,
                             args.uniqueness, c.rank, c.world_size)
            c.barrier()
            t0 = time.perf_counter()
            dist_join(ctx, t, u, ["k"], ["k"], JoinKind.Inner)
        else:
            c.barrier()
            t0 = time.perf_counter()
            dist_sort(ctx, t, ["k"])
        c.barrier()
        dt = time.perf_counter() - t0
        if c.rank == 0:
            lines.append(
                f"{op},{c.world_size},{args.rows},{args.uniqueness},{rep},{dt:.6f}"
            )
    return lines


def _pipeline_cfg(args) -> PipelineConfig:
    cfg = PipelineConfig(seed=args.seed, n_response_rows=args.rows)
    cfg.net = NetConfig(
        in_dim=cfg.net.in_dim, hidden_dim=args.hidden, n_blocks=args.blocks,
        n_tail=cfg.net.n_tail, dropout_p=args.dropout, seed=cfg.net.seed,
    )
    cfg.train_cfg = TrainConfig(
        lr=args.lr, epochs=args.epochs,
        batch_size=cfg.train_cfg.batch_size, base_seed=cfg.train_cfg.base_seed,
    )
    return cfg


def _pipeline_worker(c, args):
    cfg = _pipeline_cfg(args)
    res = run_pipeline(DistContext(c), cfg)
    return res


def _selftest_worker(c, args):
    from .selftest import run_selftest_worker

    return run_selftest_worker(DistContext(c), seed=args.seed)


# -- launch machinery ------------------------------------------------------

def _run_collective(args, worker):
    """Run worker(comm, args) under the selected launch mode and return the
    list of per-rank results (tcp single-worker mode returns [result])."""
    if args.rank is not None:
        if not args.hostfile:
            raise SystemExit("--rank requires --hostfile")
        with open(args.hostfile) as f:
            peers = comm.parse_hostfile(f.read())
        spec = comm.WorkerSpec(rank=args.rank, world_size=len(peers),
                               transport="tcp", peers=peers)
        c = comm.TcpCommunicator(spec) if len(peers) > 1 else comm.init(spec)
        try:
            return [worker(c, args)]
        finally:
            c.close()
    if args.launch is not None:
        if not args.hostfile:
            raise SystemExit("--launch requires --hostfile")
        argv = [a for a in sys.argv[1:] if not _is_launch_flag(a)]
        procs = []
        for r in range(args.launch):
            cmd = [sys.executable, "-m", "colflow.cli", *argv,
                   "--rank", str(r), "--hostfile", args.hostfile]
            procs.append(subprocess.Popen(cmd))
        codes = [p.wait() for p in procs]
        if any(codes):
            raise SystemExit(1)
        return []
    n = args.local_threads or 1
    return comm.run_threads(n, worker, args)


def _is_launch_flag(a: str) -> bool:
    # strip --launch N from the argv we forward to tcp workers
    if a == "--launch":
        _is_launch_flag.skip = True  # type: ignore[attr-defined]
        return True
    if getattr(_is_launch_flag, "skip", False):
        _is_launch_flag.skip = False  # type: ignore[attr-defined]
        return True
    return False


# -- subcommand drivers ----------------------------------------------------

def _cmd_gen_data(args) -> int:
    cfg = PipelineConfig(seed=args.seed, n_response_rows=args.rows)
    response, feat_a, feat_b, rna = generate_synthetic(cfg, 0, 1)
    opts = CsvOptions()
    for name, t in [("response", response), ("drug_feat_a", feat_a),
                    ("drug_feat_b", feat_b), ("rna", rna)]:
        path = f"{args.prefix}_{name}.csv"
        with open(path, "w") as f:
            write_csv(t, f, opts)
        print(f"wrote {t.nrows} rows to {path}", file=sys.stderr)
    return 0


def _cmd_pipeline(args) -> int:
    results = _run_collective(args, _pipeline_worker)
    if not results:
        return 0  # --launch parent
    if args.rank is not None and args.rank != 0:
        return 0  # tcp mode: rank 0 owns the report (others share --out)
    out = _out_stream(args)
    all_metrics = [m for res in results if res for m in res.metrics]
    out.write(metrics_csv(all_metrics))
    first = results[0]
    print("epoch,global_mse", file=sys.stderr)
    for i, loss in enumerate(first.loss_history):
        print(f"{i + 1},{loss:.6f}", file=sys.stderr)
    if out is not sys.stdout:
        out.close()
    return 0


def _cmd_bench(args, op: str) -> int:
    results = _run_collective(args, lambda c, a: _bench_worker(c, a, op))
    if not results:
        return 0
    if args.rank is not None and args.rank != 0:
        return 0  # tcp mode: rank 0 owns the report (others share --out)
    out = _out_stream(args)
    out.write("op,world,rows,uniqueness,repeat,seconds\n")
    times = []
    for res in results:
        if res:
            for line in res:
                out.write(line + "\n")
                times.append(float(line.rsplit(",", 1)[1]))
    if times:
        print(f"median {op} seconds: {statistics.median(times):.6f}",
              file=sys.stderr)
    if out is not sys.stdout:
        out.close()
    return 0


def _cmd_selftest(args) -> int:
    failures = 0
    for world in (1, 2, 4):
        local = argparse.Namespace(**vars(args))
        local.local_threads = world
        local.rank = None
        local.launch = None
        results = _run_collective(local, _selftest_worker)
        bad = [msg for res in results if res for msg in res]
        status = "ok" if not bad else "FAIL"
        print(f"selftest world={world}: {status}", file=sys.stderr)
        for msg in bad:
            print(f"  {msg}", file=sys.stderr)
        failures += len(bad)
    return 0 if failures == 0 else 1


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code not in (0, None) else 0
    try:
        if args.cmd == "gen-data":
            return _cmd_gen_data(args)
        if args.cmd == "pipeline":
            return _cmd_pipeline(args)
        if args.cmd == "bench-join":
            return _cmd_bench(args, "join")
        if args.cmd == "bench-sort":
            return _cmd_bench(args, "sort")
        if args.cmd == "selftest":
            return _cmd_selftest(args)
    except AssertionError as e:
        print(f"assertion failure: {e}", file=sys.stderr)
        return 1
    return 2


if __name__ == "__main__":
    sys.exit(main())
