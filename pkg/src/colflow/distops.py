"""Distributed operators: communication primitive + local operator.

Every operator here is collective -- all p ranks call it in the same order
with compatible arguments -- and partition-invariant: gathering the
distributed result is canonically equal to running the local operator on
the gathered input (exact for Int64/Bool/Utf8; Float64 aggregates and
scaling agree to 1e-12 relative, since association order differs).

Key-based operators route rows to rank hash(key) mod p; dist_sort range
partitions via sampled splitters instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from .columnar import (
    Column,
    DataType,
    NUMERIC_TYPES,
    Schema,
    Table,
    encode_keys,
    hash_keys,
    sort_token,
    take,
)
from .comm import Communicator, ReduceOp
from .errors import DegenerateColumn, ProbeTooLarge
from . import localops
from .localops import AggKind, JoinKind, SetOpKind


@dataclass
class DistContext:
    comm: Communicator

    @property
    def rank(self) -> int:
        return self.comm.rank

    @property
    def world_size(self) -> int:
        return self.comm.world_size


def _key_dests(t: Table, key_idx: Sequence[int], p: int) -> list[int]:
    return [h % p for h in hash_keys(encode_keys(t, key_idx))]


def _shuffle_by_key(ctx: DistContext, t: Table, key_cols: Sequence[str]) -> Table:
    idx = [t.schema.index_of(c) for c in key_cols]
    return ctx.comm.shuffle_table(t, _key_dests(t, idx, ctx.world_size))


# -- join ------------------------------------------------------------------

def dist_join(
    ctx: DistContext,
    l: Table,
    r: Table,
    on_l: Sequence[str],
    on_r: Sequence[str],
    kind: JoinKind = JoinKind.Inner,
) -> Table:
    """Hash-partition both sides by join key, then join locally. Null-key
    rows hash like any other key (the null encoding is canonical), so
    outer null rows land on exactly one rank and survive exactly once."""
    if ctx.world_size == 1:
        return localops.local_join(l, r, on_l, on_r, kind)
    lsh = _shuffle_by_key(ctx, l, on_l)
    rsh = _shuffle_by_key(ctx, r, on_r)
    return localops.local_join(lsh, rsh, on_l, on_r, kind)


# -- sort ------------------------------------------------------------------

_SAMPLE_PER_RANK = 32


def dist_sort(
    ctx: DistContext,
    t: Table,
    cols: Sequence[str],
    ascending: Sequence[bool] | None = None,
) -> Table:
    """Sample sort: allgather up to 32 seeded sample keys per rank, pick
    p-1 quantile splitters deterministically, range-partition, then sort
    locally. Ranks end up globally ordered under the requested ordering."""
    p = ctx.world_size
    if p == 1:
        return localops.orderby(t, cols, ascending)
    idx = [t.schema.index_of(c) for c in cols]
    asc = list(ascending) if ascending is not None else [True] * len(idx)

    sample_idx = _sample_indices(t.nrows, _SAMPLE_PER_RANK,
                                 seed=0x5EED ^ ctx.rank)
    sample = take(t, sample_idx)
    sample_keys = localops.project(sample, cols)
    gathered = ctx.comm.allgather_table(sample_keys)

    def token(tab: Table, row: int):
        toks = []
        for c, up in zip(range(len(idx)), asc):
            tok = sort_token(tab.columns[c].dtype, tab.columns[c].values[row])
            toks.append(tok if up else _NegTok(tok))
        return tuple(toks)

    all_keys = sorted(token(gathered, r) for r in range(gathered.nrows))
    splitters = []
    if all_keys:
        for i in range(1, p):
            splitters.append(all_keys[i * len(all_keys) // p])

    dest = []
    for r in range(t.nrows):
        k = tuple(
            (sort_token(t.columns[c].dtype, t.columns[c].values[r]) if up
             else _NegTok(sort_token(t.columns[c].dtype, t.columns[c].values[r])))
            for c, up in zip(idx, asc)
        )
        d = 0
        while d < len(splitters) and k >= splitters[d]:
            d += 1
        dest.append(d)
    shuffled = ctx.comm.shuffle_table(t, dest)
    return localops.orderby(shuffled, cols, ascending)


class _NegTok:
    """Order-reversing wrapper so descending keys can share one splitter
    comparison path."""

    __slots__ = ("tok",)

    def __init__(self, tok):
        self.tok = tok

    def __lt__(self, other):
        return other.tok < self.tok

    def __le__(self, other):
        return other.tok <= self.tok

    def __ge__(self, other):
        return other.tok >= self.tok

    def __gt__(self, other):
        return other.tok > self.tok

    def __eq__(self, other):
        return isinstance(other, _NegTok) and other.tok == self.tok

    def __hash__(self):
        return hash(("neg", self.tok))


def _sample_indices(n: int, k: int, seed: int) -> list[int]:
    """Deterministic sample of min(n, k) distinct row indices."""
    if n <= k:
        return list(range(n))
    state = seed & 0xFFFFFFFFFFFFFFFF
    picked = []
    seen = set()
    while len(picked) < k:
        state = (state * 6364136223846793005 + 1442695040888963407) & 0xFFFFFFFFFFFFFFFF
        i = state % n
        if i not in seen:
            seen.add(i)
            picked.append(i)
    return sorted(picked)


# -- groupby ---------------------------------------------------------------

def dist_groupby_aggregate(
    ctx: DistContext,
    t: Table,
    keys: Sequence[str],
    aggs: Sequence[tuple[str, AggKind]],
) -> Table:
    """Partial aggregation, shuffle partials by key hash, combine, finalize.
    Mean travels as a Sum+Count pair. All six aggregates decompose, so the
    result matches a single-node groupby (Float64 up to association order)."""
    if ctx.world_size == 1:
        return localops.groupby_aggregate(t, keys, aggs)

    # local partials: expand Mean into sum + count legs
    legs: list[tuple[str, AggKind]] = []
    for col, kind in aggs:
        if kind is AggKind.Mean:
            legs.append((col, AggKind.Sum))
            legs.append((col, AggKind.Count))
        else:
            legs.append((col, kind))
    # dedupe legs while keeping order
    seen = set()
    uniq_legs = []
    for leg in legs:
        if leg not in seen:
            seen.add(leg)
            uniq_legs.append(leg)

    partial = localops.groupby_aggregate(t, keys, uniq_legs)
    shuffled = _shuffle_by_key(ctx, partial, keys)

    # combine partials: Sum/Count combine by Sum, Prod by Prod, Min/Max as is
    combine_kind = {
        AggKind.Sum: AggKind.Sum,
        AggKind.Count: AggKind.Sum,
        AggKind.Prod: AggKind.Prod,
        AggKind.Min: AggKind.Min,
        AggKind.Max: AggKind.Max,
    }
    combine_aggs = [
        (f"{col}_{kind.value}", combine_kind[kind]) for col, kind in uniq_legs
    ]
    combined = localops.groupby_aggregate(shuffled, keys, combine_aggs)
    # combined names look like "<col>_<leg>_<combine>"
    leg_out = {
        leg: f"{leg[0]}_{leg[1].value}_{combine_kind[leg[1]].value}"
        for leg in uniq_legs
    }

    fields = []
    columns = []
    ki = [combined.schema.index_of(k) for k in keys]
    for k, ci in zip(keys, ki):
        fields.append((k, combined.schema.dtypes[ci]))
        columns.append(Column(combined.columns[ci].dtype,
                              list(combined.columns[ci].values)))
    for col, kind in aggs:
        out_name = f"{col}_{kind.value}"
        if kind is AggKind.Mean:
            s = combined.col(leg_out[(col, AggKind.Sum)]).values
            c = combined.col(leg_out[(col, AggKind.Count)]).values
            vals = [
                None if (cv is None or cv == 0 or sv is None) else float(sv) / cv
                for sv, cv in zip(s, c)
            ]
            fields.append((out_name, DataType.Float64))
            columns.append(Column(DataType.Float64, vals))
        else:
            src = combined.col(leg_out[(col, kind)])
            if kind is AggKind.Count:
                vals = [0 if v is None else v for v in src.values]
            else:
                vals = list(src.values)
            fields.append((out_name, src.dtype))
            columns.append(Column(src.dtype, vals))
    return Table(Schema.of(fields), columns)


# -- unique / set ops / isin -----------------------------------------------

def dist_unique(ctx: DistContext, t: Table,
                subset: Sequence[str] | None = None) -> Table:
    if ctx.world_size == 1:
        return localops.unique(t, subset)
    cols = list(subset) if subset is not None else t.schema.names
    shuffled = _shuffle_by_key(ctx, t, cols)
    return localops.unique(shuffled, subset)


def dist_set_op(ctx: DistContext, a: Table, b: Table, kind: SetOpKind) -> Table:
    if ctx.world_size == 1:
        return localops.set_op(a, b, kind)
    ash = _shuffle_by_key(ctx, a, a.schema.names)
    bsh = _shuffle_by_key(ctx, b, b.schema.names)
    return localops.set_op(ash, bsh, kind)


DEFAULT_PROBE_LIMIT = 10**6


def dist_isin(
    ctx: DistContext,
    t: Table,
    col: str,
    probe: Table,
    probe_col: str,
    probe_limit: int = DEFAULT_PROBE_LIMIT,
) -> Table:
    """Allgather the (small) distinct probe key set; the large side never
    moves."""
    if ctx.world_size == 1:
        return localops.isin(t, col, probe, probe_col)
    local_probe = localops.unique(
        localops.project(probe, [probe_col]), [probe_col]
    )
    global_probe = ctx.comm.allgather_table(local_probe)
    if global_probe.nrows > probe_limit:
        raise ProbeTooLarge(
            f"global probe has {global_probe.nrows} keys (limit {probe_limit})"
        )
    return localops.isin(t, col, global_probe, probe_col)


# -- scaling ---------------------------------------------------------------

def dist_standard_scale(ctx: DistContext, t: Table,
                        cols: Sequence[str]) -> Table:
    """Z-score named numeric columns with global population moments
    (count, sum, sum-of-squares via allreduce). Constant columns scale to
    zero; nulls are preserved; scaled columns come out Float64."""
    idx = [t.schema.index_of(c) for c in cols]
    for c in idx:
        if t.schema.dtypes[c] not in NUMERIC_TYPES:
            raise DegenerateColumn(
                f"cannot scale non-numeric column {t.schema.names[c]!r}"
            )
    stats = []
    for c in idx:
        vals = [v for v in t.columns[c].values if v is not None]
        stats.extend([float(len(vals)),
                      float(sum(vals)),
                      float(sum(v * v for v in vals))])
    global_stats = ctx.comm.allreduce(stats, ReduceOp.SUM)

    fields = list(t.schema.fields)
    columns = list(t.columns)
    for j, c in enumerate(idx):
        n, sx, sxx = global_stats[3 * j : 3 * j + 3]
        if n < 2:
            raise DegenerateColumn(
                f"column {t.schema.names[c]!r} has {int(n)} non-null values"
            )
        mu = sx / n
        var = max(sxx / n - mu * mu, 0.0)
        sigma = math.sqrt(var)
        vals = [
            None if v is None else (0.0 if sigma == 0.0 else (v - mu) / sigma)
            for v in t.columns[c].values
        ]
        fields[c] = (t.schema.names[c], DataType.Float64)
        columns[c] = Column(DataType.Float64, vals)
    return Table(Schema.of(fields), columns)
