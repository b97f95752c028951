import csv
import json
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from aptkit import cli
from aptkit.eval import RankingMetrics
from aptkit.eval.protocols import ProtocolResultGrid
from aptkit.eval.stats import avg_incremental_improvement, friedman_test
from aptkit.experiment import CHECK_MARK, emit_report, report_table

TINY = {"n_benign": 200, "n_anomalies": 4, "d": 12, "n_nuisance": 2}
FAST = {
    "nn": {"epochs": 10}, "surrogate": {"epochs": 5}, "transfer": {"epochs": 5},
    "contrastive": {"epochs": 5}, "siamese": {"epochs": 3, "pairs_per_setting": 64},
    "detectors": {"net_epochs": 5},
    "selection": {"shap": {"background_size": 20, "explained_instances": 10}},
}


def make_config(tmp_path, name="cfg.json", **extra):
    tree = {"source": {"synthetic": dict(TINY)}, "target": {"synthetic": dict(TINY)},
            "output_dir": "out", **FAST}
    tree.update(extra)
    p = tmp_path / name
    p.write_text(json.dumps(tree))
    return p


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_smoke_run_p1_knn(tmp_path):
    cfg = make_config(tmp_path, methods=["KNN"], protocols=["P1"], seeds=[0, 1])
    t0 = time.perf_counter()
    assert cli.main(["run", str(cfg), "-q"]) == 0
    assert time.perf_counter() - t0 < 10
    rows = read_rows(tmp_path / "out" / "results.csv")
    assert sorted(r["seed"] for r in rows) == ["0", "1"]
    assert list(rows[0]) == ["os", "dataset", "method", "protocol", "ndcg", "auc", "seed"]


@pytest.fixture(scope="module")
def full_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("full")
    cfg = make_config(tmp, methods=["KNN", "AAE"], protocols=["P0", "P1", "P2", "P3"], seeds=[0, 1, 2])
    code = cli.main(["run", str(cfg), "-q"])
    return tmp, cfg, code


def test_full_run_artifacts(full_run):
    tmp, _, code = full_run
    out = tmp / "out"
    assert code == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "ok" and manifest["failure"] is None
    assert manifest["seeds"] == [0, 1, 2]
    for stage in ("gen-data", "grid", "evaluate", "detect", "export", "p3/siamese"):
        assert stage in manifest["stage_seconds"]
    for name in ("results.csv", "stats.json", "report.txt", "scores.csv", "feature_scores.csv", "embeddings.csv",
                 "similarity.json", "models/aae_pretrained.json", "models/aae_transfer.json",
                 "models/contrastive_head.json", "models/siamese.json"):
        assert name in manifest["artifacts"] and (out / name).exists(), name
    for name in manifest["artifacts"]:
        if name.endswith(".json"):
            json.loads((out / name).read_text())
    assert len(read_rows(out / "results.csv")) == 2 * 4 * 3
    scores = read_rows(out / "scores.csv")
    assert {r["protocol"] for r in scores} == {"P0", "P1", "P2", "P3"}


def test_determinism(full_run, tmp_path):
    tmp, cfg, _ = full_run
    again = make_config(tmp_path, methods=["KNN", "AAE"], protocols=["P0", "P1", "P2", "P3"], seeds=[0, 1, 2])
    assert cli.main(["run", str(again), "-q"]) == 0
    assert (tmp / "out" / "results.csv").read_bytes() == (tmp_path / "out" / "results.csv").read_bytes()


def test_improvement_and_significance_recomputed(full_run):
    tmp, _, _ = full_run
    rows = read_rows(tmp / "out" / "results.csv")
    stats = json.loads((tmp / "out" / "stats.json").read_text())
    report = (tmp / "out" / "report.txt").read_text()
    for method in ("KNN", "AAE"):
        mine = [r for r in rows if r["method"] == method]
        means = {p: np.mean([float(r["ndcg"]) for r in mine if r["protocol"] == p]) for p in ("P1", "P2", "P3")}
        expected = 0.5 * ((means["P2"] - means["P1"]) / means["P1"] + (means["P3"] - means["P2"]) / means["P2"]) * 100
        entry = stats[f"target/{method}"]
        assert entry["impr_ndcg_pct"] == pytest.approx(expected, rel=1e-12)
        M = [[float(r["ndcg"]) for r in sorted((r for r in mine if r["seed"] == s), key=lambda r: r["protocol"])]
             for s in ("0", "1", "2")]
        p = friedman_test(M).p_value
        assert entry["friedman"]["p"] == pytest.approx(p, abs=1e-15)
        line = next(ln for ln in report.splitlines() if ln.startswith(method))
        assert f"{expected:.1f}" in line
        assert line.endswith(CHECK_MARK) == (p < 0.05)


def test_report_subcommand_rebuilds_tables(full_run, capsys):
    tmp, cfg, _ = full_run
    before = (tmp / "out" / "report.txt").read_text()
    assert cli.main(["report", str(cfg), "-q"]) == 0
    assert capsys.readouterr().out == before


def _grid(values_by_seed):
    g = ProtocolResultGrid(seeds=sorted(values_by_seed))
    for seed, vals in values_by_seed.items():
        for proto, v in vals.items():
            g.cells[("d", "M", proto, seed)] = RankingMetrics(v, v, 5)
    return g


def test_single_cell_report(tmp_path):
    g = _grid({0: {"P1": 0.5}})
    emit_report(g, tmp_path)
    lines = (tmp_path / "report.txt").read_text().splitlines()
    assert len(lines) == 4 and lines[3].startswith("M ")
    with pytest.raises(ValueError):
        emit_report(ProtocolResultGrid(), tmp_path)


def test_check_mark_threshold():
    strong = _grid({s: {"P1": 0.1, "P2": 0.2, "P3": 0.3} for s in range(6)})
    weak = _grid({s: {"P1": 0.1 + s % 2 * 0.3, "P2": 0.2, "P3": 0.3 - s % 2 * 0.2} for s in range(4)})
    for g in (strong, weak):
        p = g.tests("d", "M")["friedman"].p_value
        row = report_table(g, "d").splitlines()[3]
        assert row.endswith(CHECK_MARK) == (p < 0.05)
    assert strong.tests("d", "M")["friedman"].p_value < 0.05 <= weak.tests("d", "M")["friedman"].p_value
    assert f"{avg_incremental_improvement(0.1, 0.2, 0.3):.1f}" in report_table(strong, "d")


def test_config_error_exit_code(tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"source": {"synthetic": {}}, "target": {"synthetic": {}}, "learning_rte": 1}))
    assert cli.main(["run", str(p)]) == 2
    assert "learning_rte" in capsys.readouterr().err
    assert cli.main([]) == 2


def test_io_error_exit_codes(tmp_path):
    assert cli.main(["run", str(tmp_path / "missing.json")]) == 4
    bad = tmp_path / "bad.csv"
    bad.write_text("process_id,e1\np1,7\n")
    cfg = make_config(tmp_path, source={"path": "bad.csv"}, methods=["KNN"], protocols=["P1"])
    assert cli.main(["run", str(cfg), "-q"]) == 4
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert manifest["status"] == "failed" and manifest["failure"]["stage"] == "gen-data"


def test_stage_failure_exit_code(tmp_path):
    # a target without anomalies leaves AUC undefined, so every cell fails
    cfg = make_config(tmp_path, target={"synthetic": dict(TINY, n_anomalies=0)}, methods=["KNN"],
                      protocols=["P1"])
    assert cli.main(["run", str(cfg), "-q"]) == 3
    out = tmp_path / "out"
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["failure"]["stage"] == "grid" and manifest["cell_failures"]
    assert read_rows(out / "results.csv")[0]["ndcg"] == "nan"


def test_stage_subcommands(tmp_path):
    cfg = make_config(tmp_path, methods=["KNN"], protocols=["P1", "P3"])
    out = tmp_path / "out"
    assert cli.main(["gen-data", str(cfg), "-q"]) == 0
    assert (out / "data" / "source_seed0.csv").exists() and (out / "data" / "target_seed0.csv").exists()
    assert cli.main(["select-features", str(cfg), "-q"]) == 0
    assert (out / "feature_scores.csv").exists() and not (out / "models").exists()
    assert cli.main(["train", str(cfg), "-q"]) == 0
    assert (out / "models" / "aae_pretrained.json").exists()
    assert cli.main(["transfer", str(cfg), "-q"]) == 0
    assert (out / "models" / "aae_transfer.json").exists()
    assert cli.main(["align", str(cfg), "-q"]) == 0
    assert (out / "models" / "siamese.json").exists() and (out / "similarity.json").exists()
    assert cli.main(["detect", str(cfg), "-q"]) == 0
    assert {r["protocol"] for r in read_rows(out / "scores.csv")} == {"P1", "P3"}
    assert cli.main(["evaluate", str(cfg), "-q"]) == 0
    assert len(read_rows(out / "results.csv")) == 2
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "evaluate" and "results.csv" in manifest["artifacts"]


def test_augment_subcommand(tmp_path):
    cfg = make_config(tmp_path, augment={"epochs": 3})
    assert cli.main(["augment", str(cfg), "-q"]) == 0
    for k in (3, 4, 5, 6):
        assert (tmp_path / "out" / "data" / f"scenario{k}.csv").exists()
        json.loads((tmp_path / "out" / "models" / f"generator_scenario{k}.json").read_text())


def test_set_overrides_and_echo(tmp_path, capsys):
    cfg = make_config(tmp_path, methods=["KNN"], protocols=["P1"])
    assert cli.main(["gen-data", str(cfg), "--echo", "-q", "--set", "seeds=[5]"]) == 0
    echoed = capsys.readouterr().out
    assert json.loads(echoed)["seeds"] == [5]
    assert (tmp_path / "out" / "data" / "source_seed5.csv").exists()


def test_console_script_print_defaults():
    env = dict(os.environ, APTKIT_THREADS="1")
    res = subprocess.run([sys.executable, "-m", "aptkit.cli", "--print-defaults"], capture_output=True,
                         text=True, env=env, check=True)
    assert json.loads(res.stdout)["selection"]["xi"] == 0.95
