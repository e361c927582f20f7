"""Shared test helpers: seeded random table generation and row-level
views that the brute-force oracles operate on."""

from __future__ import annotations

import math
import random

from colflow.columnar import DataType, Table, table


def make_rng(seed: int) -> random.Random:
    return random.Random(seed)


# Verdict lines registered by test_acceptance.py; echoed in the terminal
# summary so they survive pytest's fd-level output capture.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def random_table(
    rng: random.Random,
    nrows: int,
    key_pool: int | None = None,
    null_fraction: float = 0.08,
    with_nan: bool = True,
) -> Table:
    """Mixed-type table with a low-cardinality Int64 key column 'k'."""
    pool = key_pool if key_pool is not None else max(1, nrows // 10)
    k, f, b, s = [], [], [], []
    for _ in range(nrows):
        k.append(None if rng.random() < null_fraction else rng.randrange(pool))
        r = rng.random()
        if r < null_fraction:
            f.append(None)
        elif with_nan and r < null_fraction + 0.04:
            f.append(float("nan"))
        else:
            f.append(rng.uniform(-50, 50))
        b.append(None if rng.random() < null_fraction else rng.random() < 0.5)
        s.append(None if rng.random() < null_fraction
                 else f"s{rng.randrange(pool)}")
    return table(
        {"k": k, "f": f, "b": b, "s": s},
        dtypes={"k": DataType.Int64, "f": DataType.Float64,
                "b": DataType.Bool, "s": DataType.Utf8},
    )


def rows_of(t: Table) -> list[tuple]:
    return [t.row(r) for r in range(t.nrows)]


def canon_cell(v):
    """Hashable, uniformly sortable canonical token of one cell for
    oracle-side multiset comparison (nulls and NaNs get their own tags)."""
    if v is None:
        return (0, 0)
    if isinstance(v, bool):
        return (1, int(v))
    if isinstance(v, float):
        if math.isnan(v):
            return (3, 0.0)
        return (2, 0.0 if v == 0.0 else v)
    if isinstance(v, int):
        return (2, v)
    return (4, v)


def canon_rows(t: Table) -> list[tuple]:
    return sorted(
        tuple(canon_cell(c) for c in row) for row in rows_of(t)
    )
