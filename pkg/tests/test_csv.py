import io
import struct

import pytest

from colflow.columnar import DataType, Schema, canonical_compare, table
from colflow.csvio import CsvOptions, read_csv, write_csv
from colflow.errors import CastFailure, RaggedRow, UnclosedQuote

from conftest import make_rng, random_table


def test_infer_int_and_utf8():
    t = read_csv("a,b\n1,x\n2,y")
    assert t.schema.dtypes == [DataType.Int64, DataType.Utf8]
    assert t.col("a").values == [1, 2]


def test_infer_falls_back_to_float():
    t = read_csv("a\n1\n2.5")
    assert t.schema.dtypes == [DataType.Float64]
    assert t.col("a").values == [1.0, 2.5]


def test_infer_bool_case_insensitive():
    t = read_csv("a\nTRUE\nfalse")
    assert t.schema.dtypes == [DataType.Bool]
    assert t.col("a").values == [True, False]


def test_null_token_does_not_block_inference():
    t = read_csv("a\n1\n\n3")
    assert t.schema.dtypes == [DataType.Int64]
    assert t.col("a").values == [1, None, 3]


def test_no_header_names():
    t = read_csv("1,2\n3,4", CsvOptions(has_header=False))
    assert t.schema.names == ["c0", "c1"]


def test_write_null_token():
    t = table({"a": [1, None]}, dtypes={"a": DataType.Int64})
    buf = io.StringIO()
    assert write_csv(t, buf) == 2
    assert buf.getvalue() == "a\n1\n\n"


def test_write_quoting():
    t = table({"a": ["x,y", 'he said "hi"', "line\nbreak", "plain"]})
    buf = io.StringIO()
    write_csv(t, buf)
    lines = buf.getvalue().split("\n")
    assert lines[1] == '"x,y"'
    assert lines[2] == '"he said ""hi"""'


def test_quoted_field_roundtrip():
    t = read_csv('a\n"x,y"\n"with ""q"""\n')
    assert t.col("a").values == ["x,y", 'with "q"']


def test_ragged_row():
    with pytest.raises(RaggedRow):
        read_csv("a,b\n1\n")


def test_unclosed_quote():
    with pytest.raises(UnclosedQuote):
        read_csv('a\n"oops\n')


def test_explicit_schema_cast_failure():
    opts = CsvOptions(explicit_schema=Schema.of([("a", DataType.Int64)]))
    with pytest.raises(CastFailure):
        read_csv("a\nnotanumber\n", opts)


def test_roundtrip_random_tables_canonical():
    rng = make_rng(77)
    for _ in range(100):
        t = random_table(rng, rng.randrange(0, 40))
        buf = io.StringIO()
        write_csv(t, buf)
        t2 = read_csv(buf.getvalue())
        if t.nrows == 0:
            assert t2.nrows == 0
            continue
        if any(all(v is None for v in c.values) for c in t.columns):
            continue  # all-null columns carry no dtype evidence to re-infer
        # Utf8 cells equal to the null token are documented lossiness;
        # the generator never emits empty strings, so equality must hold
        assert canonical_compare(t, t2), buf.getvalue()


def test_roundtrip_float_bit_patterns():
    rng = make_rng(13)
    vals = [struct.unpack("<d", struct.pack("<Q", rng.getrandbits(64)))[0]
            for _ in range(20000)]
    vals = [v for v in vals if v == v and abs(v) != float("inf")][:10000]
    t = table({"f": vals}, dtypes={"f": DataType.Float64})
    buf = io.StringIO()
    write_csv(t, buf)
    t2 = read_csv(buf.getvalue())
    assert t2.schema.dtypes == [DataType.Float64]
    a = struct.pack(f"<{len(vals)}d", *t.col("f").values)
    b = struct.pack(f"<{len(vals)}d", *t2.col("f").values)
    assert a == b


def test_inference_order_independent():
    rng = make_rng(31)
    t = random_table(rng, 30)
    buf = io.StringIO()
    write_csv(t, buf)
    lines = buf.getvalue().strip().split("\n")
    header, body = lines[0], lines[1:]
    schema1 = read_csv("\n".join([header] + body)).schema
    rng.shuffle(body)
    schema2 = read_csv("\n".join([header] + body)).schema
    assert schema1 == schema2


def test_crlf_rows():
    t = read_csv("a,b\r\n1,2\r\n3,4\r\n")
    assert t.col("a").values == [1, 3]


def test_custom_delimiter():
    t = read_csv("a;b\n1;2\n", CsvOptions(delimiter=";"))
    assert t.schema.names == ["a", "b"]


def test_bad_delimiter_rejected():
    with pytest.raises(ValueError):
        CsvOptions(delimiter='"')
