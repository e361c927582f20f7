"""In-memory columnar tables.

A Table is a schema plus equal-length typed columns. Null cells are tracked
per row; operators never look at the payload of a null cell (internally the
payload of a null is always None, so an accidental read blows up instead of
silently producing garbage). Tables are immutable by convention: every
operator returns a fresh table.

This module also owns the canonical per-row key encoding (the basis of
hash partitioning, joins, grouping and set semantics), the fixed total
order used by every sort, order-insensitive table comparison, and the
binary wire format used when tables travel between workers.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

from .errors import IndexOutOfBounds, SchemaMismatch


class DataType(Enum):
    Int64 = 1
    Float64 = 2
    Bool = 3
    Utf8 = 4


NUMERIC_TYPES = (DataType.Int64, DataType.Float64)

# Quiet-NaN bit pattern every NaN is canonicalized to at key/compare
# boundaries. Stored payloads keep their original bits.
_CANON_NAN_BITS = 0x7FF8000000000000
_CANON_NAN = struct.unpack("<d", struct.pack("<Q", _CANON_NAN_BITS))[0]

_INT64_MIN = -(1 << 63)
_INT64_MAX = (1 << 63) - 1


def canonical_float(v: float) -> float:
    """NaN -> quiet NaN, -0.0 -> +0.0; other values unchanged."""
    if math.isnan(v):
        return _CANON_NAN
    if v == 0.0:
        return 0.0
    return v


@dataclass(frozen=True)
class Schema:
    """Ordered list of (name, dtype); names unique, order significant."""

    fields: tuple[tuple[str, DataType], ...]

    def __post_init__(self):
        names = [n for n, _ in self.fields]
        if len(set(names)) != len(names):
            raise SchemaMismatch(f"duplicate column names in schema: {names}")

    @staticmethod
    def of(pairs: Iterable[tuple[str, DataType]]) -> "Schema":
        return Schema(tuple(pairs))

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.fields]

    @property
    def dtypes(self) -> list[DataType]:
        return [d for _, d in self.fields]

    def __len__(self) -> int:
        return len(self.fields)

    def index_of(self, name: str) -> int:
        for i, (n, _) in enumerate(self.fields):
            if n == name:
                return i
        from .errors import UnknownColumn

        raise UnknownColumn(f"no column named {name!r}")


class Column:
    """One typed column; cell value None means null."""

    __slots__ = ("dtype", "values")

    def __init__(self, dtype: DataType, values: list):
        self.dtype = dtype
        self.values = values

    def __len__(self) -> int:
        return len(self.values)

    @property
    def validity(self) -> list[bool]:
        return [v is not None for v in self.values]


class Table:
    __slots__ = ("schema", "columns")

    def __init__(self, schema: Schema, columns: list[Column]):
        if len(columns) != len(schema):
            raise SchemaMismatch("column count does not match schema")
        n = len(columns[0]) if columns else 0
        for c in columns:
            if len(c) != n:
                raise SchemaMismatch("ragged columns")
        self.schema = schema
        self.columns = columns

    @property
    def nrows(self) -> int:
        return len(self.columns[0]) if self.columns else 0

    @property
    def ncols(self) -> int:
        return len(self.columns)

    def col(self, name: str) -> Column:
        return self.columns[self.schema.index_of(name)]

    def cell(self, col: int, row: int):
        return self.columns[col].values[row]

    def row(self, row: int) -> tuple:
        return tuple(c.values[row] for c in self.columns)

    def __repr__(self) -> str:
        cols = ", ".join(
            f"{n}:{d.name}" for n, d in self.schema.fields
        )
        return f"Table[{self.nrows} rows]({cols})"


def table(data: dict[str, list], dtypes: dict[str, DataType] | None = None) -> Table:
    """Build a table from {name: values}; dtype inferred from the first
    non-null value unless given explicitly. Test/CLI convenience."""
    fields = []
    columns = []
    for name, values in data.items():
        if dtypes and name in dtypes:
            dt = dtypes[name]
        else:
            sample = next((v for v in values if v is not None), None)
            if sample is None:
                raise ValueError(f"cannot infer dtype of all-null column {name!r}")
            if isinstance(sample, bool):
                dt = DataType.Bool
            elif isinstance(sample, int):
                dt = DataType.Int64
            elif isinstance(sample, float):
                dt = DataType.Float64
            elif isinstance(sample, str):
                dt = DataType.Utf8
            else:
                raise ValueError(f"unsupported value type {type(sample)}")
        fields.append((name, dt))
        columns.append(Column(dt, list(values)))
    return Table(Schema.of(fields), columns)


def empty_like(schema: Schema) -> Table:
    return Table(schema, [Column(dt, []) for dt in schema.dtypes])


# -- basic operators ------------------------------------------------------

def concat(tables: Sequence[Table], schema: Schema | None = None) -> Table:
    """Vertical concatenation; all inputs must share one schema.

    `schema` is required only for the zero-table case.
    """
    if not tables:
        if schema is None:
            raise SchemaMismatch("concat of zero tables needs an explicit schema")
        return empty_like(schema)
    first = tables[0].schema
    for t in tables[1:]:
        if t.schema != first:
            raise SchemaMismatch(
                f"concat schema mismatch: {first.fields} vs {t.schema.fields}"
            )
    out_cols = []
    for ci, dt in enumerate(first.dtypes):
        vals: list = []
        for t in tables:
            vals.extend(t.columns[ci].values)
        out_cols.append(Column(dt, vals))
    return Table(first, out_cols)


def take(t: Table, indices: Sequence[int]) -> Table:
    """Gather rows by index; duplicates allowed, null bits preserved."""
    n = t.nrows
    for i in indices:
        if not 0 <= i < n:
            raise IndexOutOfBounds(f"row index {i} out of range [0, {n})")
    cols = [
        Column(c.dtype, [c.values[i] for i in indices]) for c in t.columns
    ]
    return Table(t.schema, cols)


def split_rows(t: Table, world_size: int) -> list[Table]:
    """Contiguous near-equal row partitioning into world_size shards."""
    n = t.nrows
    shards = []
    for r in range(world_size):
        lo = r * n // world_size
        hi = (r + 1) * n // world_size
        shards.append(take(t, range(lo, hi)))
    return shards


# -- canonical key encoding and hashing -----------------------------------

_TAG_NULL = b"\x00"

FNV_OFFSET = 14695981039346656037
FNV_PRIME = 1099511628211
_U64_MASK = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for b in data:
        h = ((h ^ b) * FNV_PRIME) & _U64_MASK
    return h


def _encode_cell(dtype: DataType, v) -> bytes:
    if v is None:
        return _TAG_NULL
    if dtype is DataType.Int64:
        return b"\x01" + struct.pack("<q", v)
    if dtype is DataType.Float64:
        return b"\x02" + struct.pack("<d", canonical_float(v))
    if dtype is DataType.Bool:
        return b"\x03" + (b"\x01" if v else b"\x00")
    # Utf8
    enc = v.encode("utf-8")
    return b"\x04" + struct.pack("<I", len(enc)) + enc


def encode_key(t: Table, key_cols: Sequence[int], row: int) -> bytes:
    """Canonical byte encoding of one row restricted to key_cols.

    Injective over non-null canonical values and identical on every worker,
    so equality, hashing and grouping agree across the cluster.
    """
    parts = []
    for ci in key_cols:
        col = t.columns[ci]
        parts.append(_encode_cell(col.dtype, col.values[row]))
    return b"".join(parts)


def encode_and_hash_key(
    t: Table, key_cols: Sequence[int], row: int
) -> tuple[bytes, int]:
    kb = encode_key(t, key_cols, row)
    return kb, fnv1a64(kb)


def encode_keys(t: Table, key_cols: Sequence[int]) -> list[bytes]:
    """Batch key encoding for all rows (hot path for joins/grouping)."""
    n = t.nrows
    per_col: list[list[bytes]] = []
    for ci in key_cols:
        col = t.columns[ci]
        dt = col.dtype
        per_col.append([_encode_cell(dt, v) for v in col.values])
    if len(per_col) == 1:
        return per_col[0]
    return [b"".join(parts) for parts in zip(*per_col)] if n else []


def hash_keys(keys: Sequence[bytes]) -> list[int]:
    return [fnv1a64(k) for k in keys]


# -- total order and canonical comparison ---------------------------------

def sort_token(dtype: DataType, v):
    """Sortable token under the fixed total order: nulls first; within
    Float64, -inf < finite < +inf < NaN; floats canonicalized."""
    if v is None:
        return (0, 0, 0)
    if dtype is DataType.Float64:
        if math.isnan(v):
            return (1, 1, 0.0)
        return (1, 0, canonical_float(v))
    if dtype is DataType.Bool:
        return (1, 0, int(v))
    return (1, 0, v)


def _canonical_rows(t: Table) -> list[tuple]:
    dtypes = t.schema.dtypes
    rows = []
    for r in range(t.nrows):
        rows.append(
            tuple(
                sort_token(dtypes[c], t.columns[c].values[r])
                for c in range(t.ncols)
            )
        )
    rows.sort()
    return rows


def canonical_compare(t1: Table, t2: Table) -> bool:
    """Order-insensitive equality: schemas match and row multisets match
    (floats compared after canonicalization)."""
    if t1.schema != t2.schema or t1.nrows != t2.nrows:
        return False
    return _canonical_rows(t1) == _canonical_rows(t2)


def canonical_allclose(t1: Table, t2: Table, rel: float = 1e-12) -> bool:
    """canonical_compare with a relative tolerance on Float64 cells, for
    results whose float association order legitimately differs (global
    aggregates, scaling)."""
    if t1.schema != t2.schema or t1.nrows != t2.nrows:
        return False
    for a, b in zip(_canonical_rows(t1), _canonical_rows(t2)):
        for ca, cb in zip(a, b):
            if ca == cb:
                continue
            if (
                isinstance(ca[-1], float)
                and isinstance(cb[-1], float)
                and ca[:-1] == cb[:-1]
            ):
                x, y = ca[-1], cb[-1]
                if abs(x - y) <= rel * max(abs(x), abs(y), 1.0):
                    continue
            return False
    return True


# -- binary serialization -------------------------------------------------

MAGIC = b"TMT1"


def _pack_bitmap(validity: list[bool]) -> bytes:
    out = bytearray((len(validity) + 7) // 8)
    for i, v in enumerate(validity):
        if v:
            out[i >> 3] |= 1 << (i & 7)
    return bytes(out)


def serialize_table(t: Table) -> bytes:
    out = bytearray()
    out += MAGIC
    out += struct.pack("<IQ", t.ncols, t.nrows)
    n = t.nrows
    for (name, dtype), col in zip(t.schema.fields, t.columns):
        nb = name.encode("utf-8")
        out += struct.pack("<I", len(nb))
        out += nb
        out += struct.pack("<B", dtype.value)
        out += _pack_bitmap(col.validity)
        vals = col.values
        if dtype is DataType.Int64:
            out += struct.pack(f"<{n}q", *(0 if v is None else v for v in vals))
        elif dtype is DataType.Float64:
            out += struct.pack(f"<{n}d", *(0.0 if v is None else v for v in vals))
        elif dtype is DataType.Bool:
            out += bytes(0 if v is None else int(v) for v in vals)
        else:
            data = bytearray()
            offsets = [0]
            for v in vals:
                if v is not None:
                    data += v.encode("utf-8")
                offsets.append(len(data))
            out += struct.pack(f"<{n + 1}I", *offsets)
            out += data
    return bytes(out)


def deserialize_table(buf: bytes) -> Table:
    if buf[:4] != MAGIC:
        raise SchemaMismatch("bad table magic")
    ncols, nrows = struct.unpack_from("<IQ", buf, 4)
    pos = 16
    fields = []
    columns = []
    for _ in range(ncols):
        (nlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos : pos + nlen].decode("utf-8")
        pos += nlen
        dtype = DataType(buf[pos])
        pos += 1
        nbytes = (nrows + 7) // 8
        bitmap = buf[pos : pos + nbytes]
        pos += nbytes
        valid = [bool(bitmap[i >> 3] & (1 << (i & 7))) for i in range(nrows)]
        if dtype is DataType.Int64:
            raw = struct.unpack_from(f"<{nrows}q", buf, pos)
            pos += 8 * nrows
            vals = [v if ok else None for v, ok in zip(raw, valid)]
        elif dtype is DataType.Float64:
            raw = struct.unpack_from(f"<{nrows}d", buf, pos)
            pos += 8 * nrows
            vals = [v if ok else None for v, ok in zip(raw, valid)]
        elif dtype is DataType.Bool:
            raw = buf[pos : pos + nrows]
            pos += nrows
            vals = [bool(b) if ok else None for b, ok in zip(raw, valid)]
        else:
            offsets = struct.unpack_from(f"<{nrows + 1}I", buf, pos)
            pos += 4 * (nrows + 1)
            data_len = offsets[-1]
            data = buf[pos : pos + data_len]
            pos += data_len
            vals = [
                data[offsets[i] : offsets[i + 1]].decode("utf-8") if ok else None
                for i, ok in enumerate(valid)
            ]
        fields.append((name, dtype))
        columns.append(Column(dtype, vals))
    t = Table(Schema.of(fields), columns)
    if t.nrows != nrows:
        raise SchemaMismatch("row count mismatch in serialized table")
    return t
