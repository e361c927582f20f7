"""Single-worker relational operators over Table.

All operators are pure: inputs untouched, outputs fresh. Output orderings
are fully specified (source order / first appearance) so the distributed
compositions can be checked canonically while unit tests stay exact.

Null semantics: null keys never match in joins/isin (SQL convention) but
form their own group in groupby; aggregates skip nulls.
"""

from __future__ import annotations

import math
import re
from enum import Enum
from typing import Callable, Sequence

from .columnar import (
    Column,
    DataType,
    NUMERIC_TYPES,
    Schema,
    Table,
    concat,
    encode_keys,
    sort_token,
    take,
)
from .errors import (
    CastFailure,
    DuplicateResultName,
    KeyArityMismatch,
    KeyTypeMismatch,
    NonNumericAggregate,
    SchemaMismatch,
    UnsupportedCast,
    WrongType,
)


class JoinKind(Enum):
    Inner = "inner"
    Left = "left"
    Right = "right"
    FullOuter = "full_outer"


class AggKind(Enum):
    Sum = "sum"
    Prod = "prod"
    Count = "count"
    Mean = "mean"
    Min = "min"
    Max = "max"


class SetOpKind(Enum):
    Union = "union"
    Intersect = "intersect"
    Difference = "difference"


def _col_indices(t: Table, cols: Sequence[str]) -> list[int]:
    return [t.schema.index_of(c) for c in cols]


# -- row selection ---------------------------------------------------------

def select(t: Table, pred: Callable[[tuple], bool]) -> Table:
    """Keep rows where pred(row_tuple) is true; order preserved.

    The predicate sees null cells as None and must treat comparisons with
    null as false (callers typically write `v is not None and ...`).
    """
    keep = [r for r in range(t.nrows) if pred(t.row(r))]
    return take(t, keep)


def project(
    t: Table,
    cols: Sequence[str],
    rename_to: Sequence[str] | None = None,
    prefix: str | None = None,
) -> Table:
    idx = _col_indices(t, cols)
    names = list(rename_to) if rename_to is not None else list(cols)
    if len(names) != len(cols):
        raise KeyArityMismatch("rename_to length must match cols")
    if prefix:
        names = [prefix + n for n in names]
    if len(set(names)) != len(names):
        raise DuplicateResultName(f"duplicate result names: {names}")
    fields = [(names[i], t.schema.dtypes[idx[i]]) for i in range(len(idx))]
    columns = [Column(t.columns[i].dtype, list(t.columns[i].values)) for i in idx]
    return Table(Schema.of(fields), columns)


_STRIP_RE = re.compile(r"[^0-9A-Za-z]+")


def transform_column(t: Table, col: str, kind: str,
                     to: DataType | None = None) -> Table:
    """kind 'cast' converts the column to dtype `to`; kind 'strip_symbols'
    keeps only ASCII alphanumerics of a Utf8 column."""
    ci = t.schema.index_of(col)
    src = t.columns[ci]
    if kind == "strip_symbols":
        if src.dtype is not DataType.Utf8:
            raise WrongType("strip_symbols requires a Utf8 column")
        vals = [None if v is None else _STRIP_RE.sub("", v) for v in src.values]
        new = Column(DataType.Utf8, vals)
        new_dt = DataType.Utf8
    elif kind == "cast":
        if to is None:
            raise UnsupportedCast("cast requires a target dtype")
        new = _cast_column(src, to)
        new_dt = to
    else:
        raise UnsupportedCast(f"unknown transform kind {kind!r}")
    fields = list(t.schema.fields)
    fields[ci] = (col, new_dt)
    columns = list(t.columns)
    columns[ci] = new
    return Table(Schema.of(fields), columns)


def _cast_column(src: Column, to: DataType) -> Column:
    frm = src.dtype
    if frm is to:
        return Column(to, list(src.values))
    ok = {
        (DataType.Int64, DataType.Float64),
        (DataType.Float64, DataType.Int64),
        (DataType.Int64, DataType.Utf8),
        (DataType.Float64, DataType.Utf8),
        (DataType.Bool, DataType.Utf8),
        (DataType.Utf8, DataType.Int64),
        (DataType.Utf8, DataType.Float64),
    }
    if (frm, to) not in ok:
        raise UnsupportedCast(f"cast {frm.name} -> {to.name} unsupported")
    out = []
    for r, v in enumerate(src.values):
        if v is None:
            out.append(None)
            continue
        try:
            if to is DataType.Utf8:
                if frm is DataType.Bool:
                    out.append("true" if v else "false")
                elif frm is DataType.Float64:
                    out.append(repr(v))
                else:
                    out.append(str(v))
            elif to is DataType.Int64:
                out.append(int(v))
            elif to is DataType.Float64:
                out.append(float(v))
        except (ValueError, OverflowError) as e:
            raise CastFailure(f"row {r}: cannot cast {v!r} to {to.name}",
                              row=r) from e
    return Column(to, out)


# -- join ------------------------------------------------------------------

def _join_schema(l: Table, r: Table) -> Schema:
    lnames = set(l.schema.names)
    fields = list(l.schema.fields)
    for name, dt in r.schema.fields:
        out = "r_" + name if name in lnames else name
        fields.append((out, dt))
    return Schema.of(fields)


def local_join(
    l: Table,
    r: Table,
    on_l: Sequence[str],
    on_r: Sequence[str],
    kind: JoinKind = JoinKind.Inner,
) -> Table:
    """Hash join on canonical key bytes. Rows with any null key never match
    but survive as outer rows per kind. Output: l's columns then r's
    (r-side names get an "r_" prefix on collision); matched rows in l order
    (matches per l-row in r order), then unmatched outer rows in source
    order (FullOuter: unmatched l then unmatched r)."""
    li = _col_indices(l, on_l)
    ri = _col_indices(r, on_r)
    if len(li) != len(ri):
        raise KeyArityMismatch(f"{len(li)} left keys vs {len(ri)} right keys")
    for a, b in zip(li, ri):
        if l.schema.dtypes[a] != r.schema.dtypes[b]:
            raise KeyTypeMismatch(
                f"key dtype mismatch: {l.schema.dtypes[a].name} vs "
                f"{r.schema.dtypes[b].name}"
            )

    def null_key(t: Table, idx: list[int], row: int) -> bool:
        return any(t.columns[c].values[row] is None for c in idx)

    lkeys = encode_keys(l, li)
    rkeys = encode_keys(r, ri)
    rmap: dict[bytes, list[int]] = {}
    for rr in range(r.nrows):
        if not null_key(r, ri, rr):
            rmap.setdefault(rkeys[rr], []).append(rr)

    lrows: list[int] = []
    rrows: list[int | None] = []
    matched_r: set[int] = set()
    for lr in range(l.nrows):
        if null_key(l, li, lr):
            continue
        hits = rmap.get(lkeys[lr])
        if hits:
            for rr in hits:
                lrows.append(lr)
                rrows.append(rr)
                matched_r.add(rr)
    matched_l = set(lrows)

    if kind in (JoinKind.Left, JoinKind.FullOuter):
        for lr in range(l.nrows):
            if lr not in matched_l:
                lrows.append(lr)
                rrows.append(None)
    if kind in (JoinKind.Right, JoinKind.FullOuter):
        for rr in range(r.nrows):
            if rr not in matched_r:
                lrows.append(-1)
                rrows.append(rr)

    schema = _join_schema(l, r)
    columns = []
    for c in range(l.ncols):
        src = l.columns[c].values
        columns.append(Column(
            l.columns[c].dtype,
            [src[lr] if lr >= 0 else None for lr in lrows],
        ))
    for c in range(r.ncols):
        src = r.columns[c].values
        columns.append(Column(
            r.columns[c].dtype,
            [src[rr] if rr is not None else None for rr in rrows],
        ))
    return Table(schema, columns)


# -- sort ------------------------------------------------------------------

def orderby(t: Table, cols: Sequence[str],
            ascending: Sequence[bool] | None = None) -> Table:
    idx = _col_indices(t, cols)
    asc = list(ascending) if ascending is not None else [True] * len(idx)
    if len(asc) != len(idx):
        raise KeyArityMismatch("ascending flags must match cols")
    order = list(range(t.nrows))
    # last key first: successive stable sorts compose into a multi-key sort
    for ci, up in reversed(list(zip(idx, asc))):
        col = t.columns[ci]
        dt = col.dtype
        order.sort(key=lambda r, c=col, d=dt: sort_token(d, c.values[r]),
                   reverse=not up)
    return take(t, order)


# -- groupby ---------------------------------------------------------------

_NUMERIC_AGGS = {AggKind.Sum, AggKind.Prod, AggKind.Mean, AggKind.Min,
                 AggKind.Max}


def groupby_aggregate(
    t: Table,
    keys: Sequence[str],
    aggs: Sequence[tuple[str, AggKind]],
) -> Table:
    """One output row per distinct key (null keys group too), ordered by
    first appearance; aggregates skip nulls; all-null groups yield null
    (Count yields 0); Mean is Float64 Sum/Count."""
    ki = _col_indices(t, keys)
    for col, kind in aggs:
        ci = t.schema.index_of(col)
        if kind in _NUMERIC_AGGS and t.schema.dtypes[ci] not in NUMERIC_TYPES:
            raise NonNumericAggregate(
                f"{kind.value} over non-numeric column {col!r}"
            )
    kb = encode_keys(t, ki)
    groups: dict[bytes, list[int]] = {}
    order: list[bytes] = []
    for r in range(t.nrows):
        k = kb[r]
        if k not in groups:
            groups[k] = []
            order.append(k)
        groups[k].append(r)

    first_rows = [groups[k][0] for k in order]
    fields = [(name, t.schema.dtypes[ci]) for name, ci in zip(keys, ki)]
    columns = [
        Column(t.columns[ci].dtype,
               [t.columns[ci].values[r] for r in first_rows])
        for ci in ki
    ]
    for col, kind in aggs:
        ci = t.schema.index_of(col)
        src = t.columns[ci].values
        out = []
        for k in order:
            vals = [src[r] for r in groups[k] if src[r] is not None]
            out.append(_aggregate(vals, kind))
        if kind is AggKind.Count:
            dt = DataType.Int64
        elif kind is AggKind.Mean:
            dt = DataType.Float64
        else:
            dt = t.schema.dtypes[ci]
        fields.append((f"{col}_{kind.value}", dt))
        columns.append(Column(dt, out))
    return Table(Schema.of(fields), columns)


def _aggregate(vals: list, kind: AggKind):
    if kind is AggKind.Count:
        return len(vals)
    if not vals:
        return None
    if kind is AggKind.Sum:
        acc = vals[0]
        for v in vals[1:]:
            acc = acc + v
        return acc
    if kind is AggKind.Prod:
        acc = vals[0]
        for v in vals[1:]:
            acc = acc * v
        return acc
    if kind is AggKind.Mean:
        acc = 0.0
        for v in vals:
            acc += v
        return acc / len(vals)
    if kind is AggKind.Min:
        return min(vals, key=_minmax_key)
    if kind is AggKind.Max:
        return max(vals, key=_minmax_key)
    raise ValueError(kind)


def _minmax_key(v):
    # NaN sorts above every finite value and +inf in the canonical total
    # order; plain min()/max() would otherwise depend on operand order.
    return (isinstance(v, float) and math.isnan(v), v)


# -- set semantics ---------------------------------------------------------

def _all_cols(t: Table) -> list[int]:
    return list(range(t.ncols))


def set_op(a: Table, b: Table, kind: SetOpKind) -> Table:
    if a.schema != b.schema:
        raise SchemaMismatch("set_op inputs must share a schema")
    akeys = encode_keys(a, _all_cols(a))
    bkeys = encode_keys(b, _all_cols(b))
    if kind is SetOpKind.Union:
        both = concat([a, b])
        return unique(both)
    bset = set(bkeys)
    seen: set[bytes] = set()
    keep = []
    for r, k in enumerate(akeys):
        if k in seen:
            continue
        if kind is SetOpKind.Intersect and k in bset:
            seen.add(k)
            keep.append(r)
        elif kind is SetOpKind.Difference and k not in bset:
            seen.add(k)
            keep.append(r)
    return take(a, keep)


def unique(t: Table, subset: Sequence[str] | None = None) -> Table:
    idx = _col_indices(t, subset) if subset is not None else _all_cols(t)
    kb = encode_keys(t, idx)
    seen: set[bytes] = set()
    keep = []
    for r, k in enumerate(kb):
        if k not in seen:
            seen.add(k)
            keep.append(r)
    return take(t, keep)


def isin(t: Table, col: str, probe: Table, probe_col: str) -> Table:
    ci = t.schema.index_of(col)
    pi = probe.schema.index_of(probe_col)
    if t.schema.dtypes[ci] != probe.schema.dtypes[pi]:
        raise KeyTypeMismatch(
            f"{t.schema.dtypes[ci].name} vs {probe.schema.dtypes[pi].name}"
        )
    probe_keys = {
        k for k, v in zip(encode_keys(probe, [pi]), probe.columns[pi].values)
        if v is not None
    }
    tkeys = encode_keys(t, [ci])
    keep = [
        r for r in range(t.nrows)
        if t.columns[ci].values[r] is not None and tkeys[r] in probe_keys
    ]
    return take(t, keep)


# -- null handling ---------------------------------------------------------

def drop_nulls(t: Table, subset: Sequence[str] | None = None) -> Table:
    idx = _col_indices(t, subset) if subset is not None else _all_cols(t)
    keep = [
        r for r in range(t.nrows)
        if all(t.columns[c].values[r] is not None for c in idx)
    ]
    return take(t, keep)


def null_mask(t: Table, col: str, mode: str = "isnull") -> Column:
    if mode not in ("isnull", "notnull"):
        raise ValueError(f"bad mode {mode!r}")
    ci = t.schema.index_of(col)
    want_null = mode == "isnull"
    return Column(
        DataType.Bool,
        [(v is None) == want_null for v in t.columns[ci].values],
    )


# -- cartesian product -----------------------------------------------------

def cross_product(a: Table, b: Table) -> Table:
    schema = _join_schema(a, b)
    columns = []
    nb = b.nrows
    for c in range(a.ncols):
        vals = []
        for v in a.columns[c].values:
            vals.extend([v] * nb)
        columns.append(Column(a.columns[c].dtype, vals))
    for c in range(b.ncols):
        columns.append(Column(b.columns[c].dtype, list(b.columns[c].values) * a.nrows))
    return Table(schema, columns)
