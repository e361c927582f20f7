import math
import re

import pytest

from colflow.columnar import canonical_allclose, concat, table
from colflow.comm import make_in_process_world, run_threads
from colflow.distops import DistContext
from colflow import localops
from colflow.localops import JoinKind, SetOpKind
from colflow.pipeline import (
    FEATURE_COLS,
    TARGET_COL,
    PipelineConfig,
    generate_synthetic,
    metrics_csv,
    run_pipeline,
)

SMALL = dict(n_drugs=60, n_response_rows=400, n_rna_rows=150)


def small_cfg(**over) -> PipelineConfig:
    kw = dict(SMALL)
    kw.update(over)
    return PipelineConfig(**kw)


def ctx1():
    return DistContext(make_in_process_world(1)[0])


# ---------------------------------------------------------------- generator

def test_generator_deterministic_per_rank():
    cfg = small_cfg(seed=5)
    a = generate_synthetic(cfg, 1, 3)
    b = generate_synthetic(cfg, 1, 3)
    for ta, tb in zip(a, b):
        assert ta.schema == tb.schema
        assert [ta.row(i) for i in range(ta.nrows)] == \
               [tb.row(i) for i in range(tb.nrows)]


def test_generator_shards_tile_the_global_dataset():
    cfg = small_cfg(seed=2)
    global_tables = generate_synthetic(cfg, 0, 1)
    for world in (2, 3):
        shards = [generate_synthetic(cfg, r, world) for r in range(world)]
        for i, gt in enumerate(global_tables):
            tiled = concat([s[i] for s in shards], schema=gt.schema)
            assert [tiled.row(j) for j in range(tiled.nrows)] == \
                   [gt.row(j) for j in range(gt.nrows)]


def test_generator_shapes_and_ranges():
    cfg = small_cfg(seed=1)
    resp, fa, fb, rna = generate_synthetic(cfg, 0, 1)
    assert resp.nrows == cfg.n_response_rows
    assert rna.nrows == cfg.n_rna_rows
    assert set(n for n, _ in resp.schema.fields) >= \
        set(["drug_id"] + FEATURE_COLS + [TARGET_COL])
    # drug ids (after symbol stripping) come from the configured universe
    pat = re.compile(r"^NSC\d{6}$")
    for raw in resp.col("drug_id").values:
        clean = re.sub(r"[^0-9A-Za-z]+", "", raw)
        assert pat.match(clean)
        assert 0 <= int(clean[3:]) - 100000 < cfg.n_drugs
    # feature tables carry distinct clean ids
    ids = fa.col("drug_id").values
    assert len(ids) == len(set(ids))
    assert fb.nrows > 0


def test_generator_symbol_and_duplicate_knobs():
    cfg = small_cfg(seed=3, symbol_fraction=0.0, dup_fraction=0.0,
                    null_fraction=0.0)
    resp, _, _, rna = generate_synthetic(cfg, 0, 1)
    assert all(re.match(r"^NSC\d{6}$", v)
               for v in resp.col("drug_id").values)
    assert all(v is not None for v in resp.col("f1").values)
    # dup_fraction=0: every rna row generated fresh (ids may still repeat
    # by chance, but the injected-duplicate tail is absent -> nrows = base)
    assert rna.nrows == cfg.n_rna_rows

    cfg2 = small_cfg(seed=3, symbol_fraction=1.0)
    resp2, _, _, _ = generate_synthetic(cfg2, 0, 1)
    assert all(not re.match(r"^NSC\d{6}$", v)
               for v in resp2.col("drug_id").values)


def test_generator_target_depends_on_features():
    """Same drug + same concentration differ only by noise; a different
    concentration shifts the target systematically."""
    cfg = small_cfg(seed=8, null_fraction=0.0, symbol_fraction=0.0)
    resp, _, _, _ = generate_synthetic(cfg, 0, 1)
    g = resp.col("growth").values
    assert all(isinstance(v, float) and math.isfinite(v) for v in g)
    assert max(g) != min(g)


# ---------------------------------------------------------------- pipeline

def oracle_pipeline_tables(cfg: PipelineConfig):
    """Recompose the expected final table with single-rank local ops only."""
    ctx = ctx1()
    resp, fa, fb, rna = generate_synthetic(cfg, 0, 1)
    from colflow.distops import dist_standard_scale

    resp = localops.project(resp, ["drug_id"] + FEATURE_COLS + [TARGET_COL])
    resp = localops.transform_column(resp, "drug_id", "strip_symbols")
    resp = localops.drop_nulls(resp)
    resp = dist_standard_scale(ctx, resp, FEATURE_COLS)

    feats = localops.local_join(fa, fb, ["drug_id"], ["drug_id"],
                                JoinKind.Inner)

    rna_t = localops.transform_column(rna, "rna_drug_id", "strip_symbols")
    rna_t = localops.unique(rna_t, ["rna_drug_id"])

    resp_drugs = localops.unique(localops.project(resp, ["drug_id"]),
                                 ["drug_id"])
    in_rna = localops.isin(resp_drugs, "drug_id", rna_t, "rna_drug_id")
    in_feat = localops.isin(resp_drugs, "drug_id", feats, "drug_id")
    common = localops.set_op(in_rna, in_feat, SetOpKind.Intersect)
    final = localops.isin(resp, "drug_id", common, "drug_id")
    return final


def test_pipeline_single_rank_matches_local_oracle():
    cfg = small_cfg(seed=4)
    res = run_pipeline(ctx1(), cfg)
    oracle = oracle_pipeline_tables(cfg)
    assert res.final_table.nrows == oracle.nrows
    assert canonical_allclose(res.final_table, oracle)


def test_pipeline_loss_finite_and_decreasing():
    cfg = small_cfg(seed=4)
    res = run_pipeline(ctx1(), cfg)
    assert len(res.loss_history) == cfg.train_cfg.epochs
    assert all(math.isfinite(v) for v in res.loss_history)
    assert res.loss_history[-1] < res.loss_history[0]


def test_pipeline_partition_invariant_final_table_and_loss():
    cfg = small_cfg(seed=6)
    ref = run_pipeline(ctx1(), cfg)
    for world in (2, 4):
        def w(comm):
            res = run_pipeline(DistContext(comm), cfg)
            gathered = comm.gather_table(0, res.final_table)
            return gathered, res.loss_history

        results = run_threads(world, w)
        gathered, hist = results[0]
        assert gathered.nrows == ref.final_table.nrows
        assert canonical_allclose(gathered, ref.final_table)
        # the data-engineering result is invariant; the SGD trajectory is
        # not (mini-batch boundaries depend on shard sizes), but training
        # must still converge and every rank must report the same global
        # history
        assert all(math.isfinite(v) for v in hist)
        assert hist[-1] < hist[0]
        assert all(h == hist for _, h in results[1:])


def test_pipeline_metrics_reconcile_with_table_sizes():
    cfg = small_cfg(seed=4)
    res = run_pipeline(ctx1(), cfg)
    by_stage = {s.stage: s for s in res.metrics}
    expected_stages = [
        "resp_project", "resp_strip", "resp_dropna", "resp_scale",
        "feat_join", "feat_cast", "rna_strip", "rna_unique", "rna_scale",
        "asm_resp_drugs", "asm_isin_rna", "asm_isin_feat", "asm_common",
        "asm_filter", "train",
    ]
    assert [s.stage for s in res.metrics] == expected_stages
    assert by_stage["asm_filter"].rows_out == res.final_table.nrows
    assert by_stage["resp_project"].rows_in == cfg.n_response_rows
    # dropna cannot add rows; strip preserves row count
    assert by_stage["resp_dropna"].rows_out <= by_stage["resp_dropna"].rows_in
    assert by_stage["resp_strip"].rows_out == by_stage["resp_strip"].rows_in
    for s in res.metrics:
        assert s.seconds >= 0.0


def test_metrics_csv_format():
    cfg = small_cfg(seed=4)
    res = run_pipeline(ctx1(), cfg)
    text = metrics_csv(res.metrics)
    lines = text.strip().split("\n")
    assert lines[0] == "stage,rank,rows_in,rows_out,seconds"
    assert len(lines) == len(res.metrics) + 1
    for line in lines[1:]:
        parts = line.split(",")
        assert len(parts) == 5
        int(parts[1]), int(parts[2]), int(parts[3]), float(parts[4])


def test_pipeline_config_validation():
    with pytest.raises(ValueError):
        PipelineConfig(dup_fraction=1.5)
    with pytest.raises(ValueError):
        PipelineConfig(n_drugs=0)


def test_pipeline_final_table_is_clean():
    """No nulls in the bridge columns, features standardized (mean~0 over
    the global table), target present."""
    cfg = small_cfg(seed=9)
    res = run_pipeline(ctx1(), cfg)
    t = res.final_table
    for name in FEATURE_COLS + [TARGET_COL]:
        assert all(v is not None for v in t.col(name).values)
    # columns were scaled before filtering, so means are near zero but not
    # exactly zero; sanity-bound them
    for name in FEATURE_COLS:
        vals = t.col(name).values
        mean = sum(vals) / len(vals)
        assert abs(mean) < 0.5
