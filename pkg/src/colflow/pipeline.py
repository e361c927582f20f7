"""Synthetic drug-response pipeline: generate three raw datasets, run the
distributed preprocessing graphs, assemble the final training table, and
train the regression network -- one loosely-synchronous program per rank.

The generator is deterministic from the seed alone: each rank slices its
contiguous shard out of one logical global dataset, so the assembled result
is independent of world size (the pipeline's master invariant).
"""

from __future__ import annotations

import io
import time
from dataclasses import dataclass, field

from .columnar import DataType, Table, table, take
from .distops import (
    DistContext,
    dist_isin,
    dist_join,
    dist_set_op,
    dist_standard_scale,
    dist_unique,
)
from .localops import (
    JoinKind,
    SetOpKind,
    drop_nulls,
    project,
    transform_column,
)
from .tensor import (
    NetConfig,
    ResponseNet,
    SplitMix64,
    TrainConfig,
    ddp_broadcast_params,
    split_train_test,
    table_to_matrix,
    train,
)

FEATURE_COLS = ["concentration", "f1", "f2"]
TARGET_COL = "growth"


@dataclass
class PipelineConfig:
    n_drugs: int = 1006
    n_response_rows: int = 4000
    n_rna_rows: int = 1500
    dup_fraction: float = 0.15
    symbol_fraction: float = 0.3
    null_fraction: float = 0.02
    train_fraction: float = 0.8
    feature_coverage: float = 0.85  # drugs present in each feature sub-table
    net: NetConfig = field(default_factory=lambda: NetConfig(
        in_dim=len(FEATURE_COLS), hidden_dim=16, n_blocks=2, n_tail=1,
        dropout_p=0.0, seed=7,
    ))
    train_cfg: TrainConfig = field(default_factory=lambda: TrainConfig(
        lr=0.01, epochs=30, batch_size=32, base_seed=11,
    ))
    seed: int = 0

    def __post_init__(self):
        for f in (self.dup_fraction, self.symbol_fraction,
                  self.null_fraction, self.train_fraction):
            if not 0.0 <= f <= 1.0:
                raise ValueError("fractions must lie in [0, 1]")
        if self.n_drugs < 1:
            raise ValueError("n_drugs must be >= 1")


def _drug_id(i: int) -> str:
    return f"NSC{100000 + i}"


def _with_symbols(rng: SplitMix64, ident: str, fraction: float) -> str:
    if rng.uniform() >= fraction:
        return ident
    sym = ".-_/"[rng.randint(4)]
    pos = 1 + rng.randint(len(ident) - 1)
    return ident[:pos] + sym + ident[pos:]


def _shard(t: Table, rank: int, world_size: int) -> Table:
    n = t.nrows
    lo = rank * n // world_size
    hi = (rank + 1) * n // world_size
    return take(t, range(lo, hi))


def _target(c: float, l1: float, l2: float, noise: float) -> float:
    import math

    return math.tanh(l1 + 0.8 * c) + 0.5 * l2 - 0.4 * c * l2 + 0.1 * noise


def generate_synthetic(
    cfg: PipelineConfig, rank: int, world_size: int
) -> tuple[Table, Table, Table, Table]:
    """Returns this rank's shards of (response, drug_feat_a, drug_feat_b,
    rna). Bit-identical for the same (cfg.seed, rank)."""
    rng = SplitMix64(cfg.seed)
    latent1 = [rng.uniform(-1, 1) for _ in range(cfg.n_drugs)]
    latent2 = [rng.uniform(-1, 1) for _ in range(cfg.n_drugs)]

    # response: drug_id (symbol-injected), concentration, latent features,
    # junk columns dropped by the projection stage, target
    drug_idx, drug_ids, conc, f1, f2, junk_s, junk_f, growth = \
        [], [], [], [], [], [], [], []
    for _ in range(cfg.n_response_rows):
        j = rng.randint(cfg.n_drugs)
        drug_idx.append(j)
        drug_ids.append(_with_symbols(rng, _drug_id(j), cfg.symbol_fraction))
        c = rng.uniform(-1, 1)
        conc.append(c)
        f1.append(latent1[j] if rng.uniform() >= cfg.null_fraction else None)
        f2.append(latent2[j])
        junk_s.append(f"note{rng.randint(100)}")
        junk_f.append(rng.uniform())
        growth.append(_target(c, latent1[j], latent2[j], rng.normal()))
    response = table(
        {
            "drug_id": drug_ids,
            "concentration": conc,
            "f1": f1,
            "f2": f2,
            "junk_note": junk_s,
            "junk_val": junk_f,
            "growth": growth,
        },
        dtypes={"f1": DataType.Float64},
    )

    # drug feature sub-tables: overlapping drug subsets, joined later
    def feature_subset() -> list[int]:
        return [i for i in range(cfg.n_drugs)
                if rng.uniform() < cfg.feature_coverage]

    sub_a = feature_subset()
    feat_a = table({
        "drug_id": [_drug_id(i) for i in sub_a],
        "fa1": [latent1[i] * 2.0 for i in sub_a],
        "fa2": [i % 17 for i in sub_a],
    })
    sub_b = feature_subset()
    feat_b = table({
        "drug_id": [_drug_id(i) for i in sub_b],
        "fb1": [latent2[i] - latent1[i] for i in sub_b],
    })

    # rna: symbol-bearing ids with injected duplicates
    base_n = max(1, int(cfg.n_rna_rows * (1.0 - cfg.dup_fraction)))
    rna_ids, r1, r2 = [], [], []
    for _ in range(base_n):
        j = rng.randint(cfg.n_drugs)
        rna_ids.append(_with_symbols(rng, _drug_id(j), cfg.symbol_fraction))
        r1.append(latent1[j] + 0.01 * rng.normal())
        r2.append(latent2[j] + 0.01 * rng.normal())
    while len(rna_ids) < cfg.n_rna_rows:
        k = rng.randint(base_n)
        rna_ids.append(rna_ids[k])
        r1.append(r1[k])
        r2.append(r2[k])
    rna = table({"rna_drug_id": rna_ids, "r1": r1, "r2": r2})

    return (
        _shard(response, rank, world_size),
        _shard(feat_a, rank, world_size),
        _shard(feat_b, rank, world_size),
        _shard(rna, rank, world_size),
    )


@dataclass
class StageMetric:
    stage: str
    rank: int
    rows_in: int
    rows_out: int
    seconds: float


@dataclass
class PipelineResult:
    loss_history: list[float]
    final_table: Table
    metrics: list[StageMetric]


class _Metrics:
    def __init__(self, rank: int):
        self.rank = rank
        self.rows: list[StageMetric] = []

    def run(self, stage: str, rows_in: int, fn):
        t0 = time.perf_counter()
        out = fn()
        dt = time.perf_counter() - t0
        rows_out = out.nrows if isinstance(out, Table) else rows_in
        self.rows.append(StageMetric(stage, self.rank, rows_in, rows_out, dt))
        return out


def run_pipeline(ctx: DistContext, cfg: PipelineConfig) -> PipelineResult:
    """The four-stage run: worker spawn is the caller's job (verified here
    by a barrier), then distributed data engineering, the table->tensor
    bridge, and DDP training."""
    ctx.comm.barrier()  # stage 1: world is up and consistent
    m = _Metrics(ctx.rank)

    response, feat_a, feat_b, rna = generate_synthetic(
        cfg, ctx.rank, ctx.world_size
    )

    # -- response graph ---------------------------------------------------
    resp = m.run("resp_project", response.nrows, lambda: project(
        response, ["drug_id"] + FEATURE_COLS + [TARGET_COL]))
    resp = m.run("resp_strip", resp.nrows, lambda: transform_column(
        resp, "drug_id", "strip_symbols"))
    resp = m.run("resp_dropna", resp.nrows, lambda: drop_nulls(resp))
    resp = m.run("resp_scale", resp.nrows, lambda: dist_standard_scale(
        ctx, resp, FEATURE_COLS))

    # -- drug feature graph -----------------------------------------------
    feats = m.run("feat_join", feat_a.nrows + feat_b.nrows, lambda: dist_join(
        ctx, feat_a, feat_b, ["drug_id"], ["drug_id"], JoinKind.Inner))
    feats = m.run("feat_cast", feats.nrows, lambda: transform_column(
        feats, "fa2", "cast", to=DataType.Float64))

    # -- rna graph ---------------------------------------------------------
    rna_t = m.run("rna_strip", rna.nrows, lambda: transform_column(
        rna, "rna_drug_id", "strip_symbols"))
    rna_t = m.run("rna_unique", rna_t.nrows, lambda: dist_unique(
        ctx, rna_t, ["rna_drug_id"]))
    rna_t = m.run("rna_scale", rna_t.nrows, lambda: dist_standard_scale(
        ctx, rna_t, ["r1", "r2"]))

    # -- assembly ----------------------------------------------------------
    resp_drugs = m.run("asm_resp_drugs", resp.nrows, lambda: dist_unique(
        ctx, project(resp, ["drug_id"]), ["drug_id"]))
    in_rna = m.run("asm_isin_rna", resp_drugs.nrows, lambda: dist_isin(
        ctx, resp_drugs, "drug_id", rna_t, "rna_drug_id"))
    in_feat = m.run("asm_isin_feat", resp_drugs.nrows, lambda: dist_isin(
        ctx, resp_drugs, "drug_id", feats, "drug_id"))
    common = m.run("asm_common", in_rna.nrows + in_feat.nrows,
                   lambda: dist_set_op(ctx, in_rna, in_feat,
                                       SetOpKind.Intersect))
    final = m.run("asm_filter", resp.nrows, lambda: dist_isin(
        ctx, resp, "drug_id", common, "drug_id"))

    # -- bridge + training -------------------------------------------------
    x = table_to_matrix(final, FEATURE_COLS)
    y = table_to_matrix(final, [TARGET_COL])
    n_train = int(round(final.nrows * cfg.train_fraction))
    x_train, y_train, _x_test, _y_test = split_train_test(x, y, n_train)

    net = ResponseNet(cfg.net)
    ddp_broadcast_params(ctx, net)
    t0 = time.perf_counter()
    result = train(ctx, net, x_train, y_train, cfg.train_cfg)
    m.rows.append(StageMetric("train", ctx.rank, n_train, n_train,
                              time.perf_counter() - t0))

    return PipelineResult(
        loss_history=result.loss_history,
        final_table=final,
        metrics=m.rows,
    )


def metrics_csv(metrics: list[StageMetric]) -> str:
    buf = io.StringIO()
    buf.write("stage,rank,rows_in,rows_out,seconds\n")
    for s in metrics:
        buf.write(f"{s.stage},{s.rank},{s.rows_in},{s.rows_out},{s.seconds:.6f}\n")
    return buf.getvalue()
