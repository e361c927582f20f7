"""CSV ingestion with type inference, and CSV emission.

Dialect: RFC-4180-style. Fields may be double-quoted, embedded quotes are
doubled, rows end with LF or CRLF. A field equal to the null token (default:
empty string) is null under any type and never blocks inference.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from .columnar import Column, DataType, Schema, Table
from .errors import CastFailure, RaggedRow, SinkFailure, UnclosedQuote

_INT_RE = re.compile(r"^[+-]?[0-9]+$")
_INT64_MIN = -(1 << 63)
_INT64_MAX = (1 << 63) - 1


@dataclass
class CsvOptions:
    delimiter: str = ","
    has_header: bool = True
    null_token: str = ""
    explicit_schema: Schema | None = None

    def __post_init__(self):
        d = self.delimiter
        if len(d) != 1 or d in ('"', "\n", "\r") or not (0x20 <= ord(d) < 0x7F):
            raise ValueError(f"bad delimiter {d!r}")


def _parse_rows(text: str, delim: str) -> list[list[str]]:
    rows: list[list[str]] = []
    field: list[str] = []
    row: list[str] = []
    i, n = 0, len(text)
    in_quotes = False
    field_started = False
    while i < n:
        ch = text[i]
        if in_quotes:
            if ch == '"':
                if i + 1 < n and text[i + 1] == '"':
                    field.append('"')
                    i += 2
                    continue
                in_quotes = False
                i += 1
            else:
                field.append(ch)
                i += 1
            continue
        if ch == '"' and not field:
            in_quotes = True
            field_started = True
            i += 1
        elif ch == delim:
            row.append("".join(field))
            field = []
            field_started = False
            i += 1
        elif ch == "\n" or ch == "\r":
            if ch == "\r" and i + 1 < n and text[i + 1] == "\n":
                i += 2
            else:
                i += 1
            row.append("".join(field))
            rows.append(row)
            field = []
            row = []
            field_started = False
        else:
            field.append(ch)
            i += 1
    if in_quotes:
        raise UnclosedQuote("unterminated quoted field at end of input")
    if field or row or field_started:
        row.append("".join(field))
        rows.append(row)
    return rows


def _try_int(s: str):
    if not _INT_RE.match(s):
        return None
    v = int(s)
    if not _INT64_MIN <= v <= _INT64_MAX:
        return None
    return v


def _try_float(s: str):
    try:
        return float(s)
    except ValueError:
        return None


def _try_bool(s: str):
    low = s.lower()
    if low == "true":
        return True
    if low == "false":
        return False
    return None


def _infer_dtype(fields: list[str]) -> DataType:
    if all(_try_int(f) is not None for f in fields):
        return DataType.Int64
    if all(_try_float(f) is not None for f in fields):
        return DataType.Float64
    if all(_try_bool(f) is not None for f in fields):
        return DataType.Bool
    return DataType.Utf8


def _convert(field: str, dtype: DataType, row: int):
    if dtype is DataType.Int64:
        v = _try_int(field)
    elif dtype is DataType.Float64:
        v = _try_float(field)
    elif dtype is DataType.Bool:
        v = _try_bool(field)
    else:
        return field
    if v is None:
        raise CastFailure(f"cannot cast {field!r} to {dtype.name}", row=row)
    return v


def read_csv(source, opts: CsvOptions | None = None) -> Table:
    """Parse CSV from a byte/text stream or bytes/str into a Table."""
    opts = opts or CsvOptions()
    if hasattr(source, "read"):
        raw = source.read()
    else:
        raw = source
    if isinstance(raw, bytes):
        raw = raw.decode("utf-8")

    rows = _parse_rows(raw, opts.delimiter)
    if opts.has_header:
        if not rows:
            raise RaggedRow("header expected but input is empty")
        names = rows[0]
        rows = rows[1:]
    else:
        width = len(rows[0]) if rows else (
            len(opts.explicit_schema) if opts.explicit_schema else 0
        )
        names = [f"c{i}" for i in range(width)]

    width = len(names)
    for i, row in enumerate(rows):
        if len(row) != width:
            raise RaggedRow(
                f"row {i} has {len(row)} fields, expected {width}"
            )

    null = opts.null_token
    if opts.explicit_schema is not None:
        schema = opts.explicit_schema
        if len(schema) != width:
            raise RaggedRow("explicit schema width does not match input")
        dtypes = schema.dtypes
    else:
        dtypes = []
        for c in range(width):
            non_null = [row[c] for row in rows if row[c] != null]
            dtypes.append(_infer_dtype(non_null) if non_null else DataType.Utf8)
        schema = Schema.of(list(zip(names, dtypes)))

    columns = []
    for c, dt in enumerate(dtypes):
        vals = [
            None if row[c] == null else _convert(row[c], dt, r)
            for r, row in enumerate(rows)
        ]
        columns.append(Column(dt, vals))
    return Table(schema, columns)


def _render(v, dtype: DataType, opts: CsvOptions) -> str:
    if v is None:
        return opts.null_token
    if dtype is DataType.Int64:
        return str(v)
    if dtype is DataType.Float64:
        return repr(v)
    if dtype is DataType.Bool:
        return "true" if v else "false"
    if opts.delimiter in v or '"' in v or "\n" in v or "\r" in v:
        return '"' + v.replace('"', '""') + '"'
    return v


def write_csv(t: Table, sink, opts: CsvOptions | None = None) -> int:
    """Emit a table as CSV; returns the number of data rows written."""
    opts = opts or CsvOptions()
    lines = []
    if opts.has_header:
        lines.append(opts.delimiter.join(t.schema.names))
    dtypes = t.schema.dtypes
    for r in range(t.nrows):
        lines.append(
            opts.delimiter.join(
                _render(t.columns[c].values[r], dtypes[c], opts)
                for c in range(t.ncols)
            )
        )
    data = "\n".join(lines) + "\n" if lines else ""
    try:
        if hasattr(sink, "write"):
            try:
                sink.write(data)
            except TypeError:
                sink.write(data.encode("utf-8"))
        else:
            raise SinkFailure(f"unwritable sink {sink!r}")
    except OSError as e:
        raise SinkFailure(str(e)) from e
    return t.nrows
