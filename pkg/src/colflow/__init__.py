"""colflow: columnar distributed-dataframe engine with BSP collectives and
a data-parallel dense-network trainer."""

from .columnar import (
    Column,
    DataType,
    Schema,
    Table,
    canonical_allclose,
    canonical_compare,
    concat,
    deserialize_table,
    encode_and_hash_key,
    serialize_table,
    table,
    take,
)
from .comm import Communicator, ReduceOp, WorkerSpec, init, run_threads
from .distops import DistContext

__all__ = [
    "Column",
    "Communicator",
    "DataType",
    "DistContext",
    "ReduceOp",
    "Schema",
    "Table",
    "WorkerSpec",
    "canonical_allclose",
    "canonical_compare",
    "concat",
    "deserialize_table",
    "encode_and_hash_key",
    "init",
    "run_threads",
    "serialize_table",
    "table",
    "take",
]

__version__ = "0.1.0"
