"""Distributed-vs-local oracle equivalence checks, callable from the CLI.

Every rank regenerates the same logical global input from the seed, takes
its contiguous shard, runs the distributed operator, and gathers the result
to rank 0, which compares against the local operator applied to the whole
input. Rank 0 returns failure messages; other ranks return an empty list.
"""

from __future__ import annotations

from .columnar import (
    DataType,
    Table,
    canonical_allclose,
    canonical_compare,
    split_rows,
    table,
)
from .distops import (
    DistContext,
    dist_groupby_aggregate,
    dist_isin,
    dist_join,
    dist_set_op,
    dist_sort,
    dist_standard_scale,
    dist_unique,
)
from . import localops
from .localops import AggKind, JoinKind, SetOpKind
from .tensor import SplitMix64

KEY_UNIQUENESS = 0.10


def random_table(
    rng: SplitMix64,
    nrows: int,
    with_strings: bool = True,
    null_fraction: float = 0.05,
    key_pool: int | None = None,
) -> Table:
    """Mixed-type table; key column 'k' draws from a small pool so joins
    and groupbys see heavy key collisions (10% uniqueness by default)."""
    pool = key_pool if key_pool is not None else max(1, int(nrows * KEY_UNIQUENESS))
    k, f, b, s = [], [], [], []
    for _ in range(nrows):
        k.append(rng.randint(pool) if rng.uniform() >= null_fraction else None)
        r = rng.uniform()
        if r < null_fraction:
            f.append(None)
        elif r < null_fraction + 0.03:
            f.append(float("nan"))
        else:
            f.append(rng.uniform(-100, 100))
        b.append(bool(rng.next_u64() & 1)
                 if rng.uniform() >= null_fraction else None)
        s.append(f"s{rng.randint(pool)}"
                 if rng.uniform() >= null_fraction else None)
    data = {"k": k, "f": f, "b": b}
    dtypes = {"k": DataType.Int64, "f": DataType.Float64, "b": DataType.Bool}
    if with_strings:
        data["s"] = s
        dtypes["s"] = DataType.Utf8
    return table(data, dtypes=dtypes)


def _shard(ctx: DistContext, t: Table) -> Table:
    return split_rows(t, ctx.world_size)[ctx.rank]


def _check(ctx: DistContext, name: str, dist_out: Table, oracle: Table,
           failures: list[str], exact: bool = True):
    gathered = ctx.comm.gather_table(0, dist_out)
    if ctx.rank != 0:
        return
    ok = (canonical_compare(gathered, oracle) if exact
          else canonical_allclose(gathered, oracle))
    if not ok:
        failures.append(
            f"{name}: gathered {gathered.nrows} rows != oracle {oracle.nrows}"
        )


def run_selftest_worker(ctx: DistContext, seed: int = 0,
                        instances: int = 8) -> list[str]:
    failures: list[str] = []
    for i in range(instances):
        rng = SplitMix64(seed * 7919 + i)
        n = 40 + rng.randint(160)
        gl = random_table(rng, n)
        gr = random_table(rng, 30 + rng.randint(120))
        l, r = _shard(ctx, gl), _shard(ctx, gr)

        kind = list(JoinKind)[i % 4]
        _check(ctx, f"dist_join[{kind.value}]#{i}",
               dist_join(ctx, l, r, ["k"], ["k"], kind),
               localops.local_join(gl, gr, ["k"], ["k"], kind), failures)

        _check(ctx, f"dist_sort#{i}",
               dist_sort(ctx, l, ["k", "f"]),
               localops.orderby(gl, ["k", "f"]), failures)

        agg = list(AggKind)[i % 6]
        _check(ctx, f"dist_groupby[{agg.value}]#{i}",
               dist_groupby_aggregate(ctx, l, ["k"], [("f", agg)]),
               localops.groupby_aggregate(gl, ["k"], [("f", agg)]),
               failures, exact=agg in (AggKind.Count, AggKind.Min, AggKind.Max))

        _check(ctx, f"dist_unique#{i}",
               dist_unique(ctx, l, ["k", "s"]),
               localops.unique(gl, ["k", "s"]), failures)

        sk = list(SetOpKind)[i % 3]
        narrow_l = localops.project(l, ["k", "b"])
        narrow_r = localops.project(_shard(ctx, gr), ["k", "b"])
        _check(ctx, f"dist_set_op[{sk.value}]#{i}",
               dist_set_op(ctx, narrow_l, narrow_r, sk),
               localops.set_op(localops.project(gl, ["k", "b"]),
                               localops.project(gr, ["k", "b"]), sk), failures)

        _check(ctx, f"dist_isin#{i}",
               dist_isin(ctx, l, "k", r, "k"),
               localops.isin(gl, "k", gr, "k"), failures)

        clean = localops.drop_nulls(gl, ["f"])
        nn = localops.select(
            clean, lambda row: row[clean.schema.index_of("f")] == row[
                clean.schema.index_of("f")])  # drop NaN so moments are finite
        if nn.nrows >= 4:
            _check(ctx, f"dist_standard_scale#{i}",
                   dist_standard_scale(ctx, _shard(ctx, nn), ["f"]),
                   dist_standard_scale(
                       DistContext(_single()), nn, ["f"]),
                   failures, exact=False)
    ctx.comm.barrier()
    return failures


def _single():
    from .comm import make_in_process_world

    return make_in_process_world(1)[0]
