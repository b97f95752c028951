import numpy as np
import pytest

from aptkit.data import ProcessEventMatrix
from aptkit.eval import RankingMetrics
from aptkit.eval.protocols import (
    P3_STAGES, CellFailure, ProtocolConfig, ProtocolConfigError, ProtocolResultGrid, run_p3_pipeline,
    run_protocol_grid, synthetic_pair,
)
from aptkit.eval.stats import avg_incremental_improvement
from aptkit.nn import TrainConfig

FAST = ProtocolConfig(train=TrainConfig(learning_rate=3e-3, epochs=10),
                      finetune=TrainConfig(learning_rate=1e-3, epochs=5),
                      surrogate=TrainConfig(learning_rate=3e-3, epochs=5))


@pytest.fixture(scope="module")
def pair():
    return synthetic_pair(0, n=300, d=14, n_nuisance=4)


def test_synthetic_pair_shape(pair):
    src, tgt = pair
    assert src.col_names == tgt.col_names and src.n == tgt.n == 303
    assert int(src.labels.sum()) == int(tgt.labels.sum()) == 3
    # nuisance columns are silent in the source and active in the target
    assert src.values[:, -4:].sum() == 0 and tgt.values[:, -4:].sum() > 0


def test_grid_cardinality(pair):
    g = run_protocol_grid(pair[0], {"t": pair[1]}, ["KNN"], ["P0", "P1"], FAST)
    assert len(g.cells) == 2
    assert all(isinstance(c, RankingMetrics) for c in g.cells.values())


def test_p2_aae_is_the_ablation(pair):
    g = run_protocol_grid(pair[0], {"t": pair[1]}, ["AAE"], ["P2", "P3"], FAST)
    p2 = " ".join(g.stage_log[("t", "AAE", "P2", 0)])
    p3 = " ".join(g.stage_log[("t", "AAE", "P3", 0)])
    assert "select_features" not in p2 and "siamese" not in p2 and "dropout=0.2" in p2
    assert "select_features" in p3 and "train_siamese" in p3


def test_p2_classical_tunes(pair):
    g = run_protocol_grid(pair[0], {"t": pair[1]}, ["KNN"], ["P2"], FAST)
    assert g.stage_log[("t", "KNN", "P2", 0)][0].startswith("tune(KNN")


def test_failed_cell_does_not_stop_grid(pair):
    src, tgt = pair
    one_class = ProcessEventMatrix(tgt.row_ids, tgt.col_names, tgt.values, np.zeros(tgt.n, dtype=np.uint8))
    g = run_protocol_grid(src, {"bad": one_class, "good": tgt}, ["KNN"], ["P1"], FAST)
    assert isinstance(g.cells[("bad", "KNN", "P1", 0)], CellFailure)
    assert isinstance(g.cells[("good", "KNN", "P1", 0)], RankingMetrics)
    assert len(g.failures()) == 1


def test_grid_validation(pair):
    with pytest.raises(ProtocolConfigError):
        run_protocol_grid(pair[0], {"t": pair[1]}, [], ["P1"])
    with pytest.raises(ProtocolConfigError):
        run_protocol_grid(pair[0], {"t": pair[1]}, ["KNN"], ["P9"])
    with pytest.raises(ProtocolConfigError):
        ProtocolConfig(xi=0.0)


def test_grid_summaries():
    g = ProtocolResultGrid(seeds=[0, 1])
    for seed, vals in enumerate([(0.1, 0.2, 0.3), (0.3, 0.4, 0.5)]):
        for proto, v in zip(("P1", "P2", "P3"), vals):
            g.cells[("d", "M", proto, seed)] = RankingMetrics(v, v, 10)
    assert g.mean("d", "M", "P2") == pytest.approx(0.3)
    assert g.improvement("d", "M") == pytest.approx(avg_incremental_improvement(0.2, 0.3, 0.4))
    assert "friedman" in g.tests("d", "M") and "wilcoxon_p0_p3" not in g.tests("d", "M")


def test_p3_pipeline_stages(pair):
    cfg = FAST.seeded(0)
    out = run_p3_pipeline(*pair, cfg, upto="train_autoencoder")
    assert "pretrained" in out and "model" not in out
    full = run_p3_pipeline(*pair, cfg)
    assert set(full["stage_seconds"]) == set(P3_STAGES)
    As, At = full["aligned"]
    assert As.shape == (303, 16) and At.shape == (303, 16)
    assert full["source_sel"].col_names == tuple(pair[0].col_names[i] for i in full["columns"])


def test_grid_deterministic(pair):
    a = run_protocol_grid(pair[0], {"t": pair[1]}, ["IsolationForest", "AAE"], ["P1", "P3"], FAST)
    b = run_protocol_grid(pair[0], {"t": pair[1]}, ["IsolationForest", "AAE"], ["P1", "P3"], FAST)
    assert a.cells == b.cells
