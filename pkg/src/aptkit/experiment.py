"""Config-driven experiment runner: datasets, protocol grid, artifacts and reports."""

from __future__ import annotations

import csv
import datetime as _dt
import hashlib
import json
import math
import platform
import time
import traceback
from pathlib import Path

import numpy as np

from . import __version__, align, augment, xai
from .config import ExperimentConfig
from .data import (
    MatrixParseError, ProcessEventMatrix, SchemaError, generate_synthetic, load_matrix, matrix_to_csv,
    save_matrix,
)
from .detect import rank_processes
from .eval.metrics import RankingMetrics
from .eval.protocols import (
    PROTOCOLS, CellFailure, ProtocolResultGrid, run_p3_pipeline, run_protocol_grid,
)
from .nn.io import model_to_json

EXIT_OK, EXIT_CONFIG, EXIT_STAGE, EXIT_IO = 0, 2, 3, 4

RESULTS_HEADER = ["os", "dataset", "method", "protocol", "ndcg", "auc", "seed"]
CHECK_MARK = "✓"


class StageFailure(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


# ------------------------------------------------------------------ datasets


def load_datasets(cfg: ExperimentConfig, seed: int) -> dict:
    """name -> (matrix, os tag) for the source, the target and any derived scenarios."""
    out = {}
    for role, spec, scenario in (("source", cfg.source, 1), ("target", cfg.target, 2)):
        if spec.path is not None:
            m = load_matrix(spec.path)
        else:
            m, _ = generate_synthetic(spec.synth_config(seed, role, scenario))
        out[spec.name] = (m, spec.os_tag)
    return out


def derive_augmented(cfg: ExperimentConfig, source: ProcessEventMatrix, target: ProcessEventMatrix,
                     seed: int):
    """Scenarios 3-6 as extra targets, plus the generators that produced them."""
    from dataclasses import replace

    scen, models = augment.derive_scenarios(source, target, replace(cfg.augment, seed=seed),
                                            return_models=True)
    return {f"scenario{k}": m for k, m in scen.items()}, models


def matrix_sha256(m: ProcessEventMatrix) -> str:
    return hashlib.sha256(matrix_to_csv(m).encode("utf-8")).hexdigest()


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


# ------------------------------------------------------------------ writers


def _num(v) -> str:
    return "nan" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))


def write_results(grid: ProtocolResultGrid, path, os_tags: dict) -> None:
    lines = [",".join(RESULTS_HEADER)]
    for (dataset, method, protocol, seed), cell in grid.cells.items():
        if isinstance(cell, RankingMetrics):
            nd, au = cell.ndcg, cell.auc
        else:
            nd = au = None
        lines.append(",".join([os_tags.get(dataset, "Synthetic"), dataset, method, protocol,
                               _num(nd), _num(au), str(seed)]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _test_entry(res):
    if res is None:
        return None
    return {"stat": res.statistic, "p": res.p_value}


def stats_summary(grid: ProtocolResultGrid) -> dict:
    """Per ``dataset/method``: Friedman and Wilcoxon on nDCG, incremental improvements in percent."""
    out = {}
    for dataset in grid.datasets():
        for method in grid.methods(dataset):
            tests = grid.tests(dataset, method, "ndcg")
            out[f"{dataset}/{method}"] = {
                "friedman": _test_entry(tests.get("friedman")),
                "wilcoxon_p0_p3": _test_entry(tests.get("wilcoxon_p0_p3")),
                "impr_ndcg_pct": grid.improvement(dataset, method, "ndcg"),
                "impr_auc_pct": grid.improvement(dataset, method, "auc"),
            }
    return out


def write_scores(grid: ProtocolResultGrid, path, dataset: str, seed: int) -> bool:
    """``row_id,detector,protocol,score,rank,label`` for one dataset and seed."""
    lines = ["row_id,detector,protocol,score,rank,label"]
    any_rows = False
    for (ds, method, protocol, s), entry in grid.scores.items():
        if ds != dataset or s != seed:
            continue
        ids, scores, labels = entry
        label_of = dict(zip(ids, labels.tolist()))
        for rid, score, rank in rank_processes(scores, ids):
            lines.append(f"{rid},{method},{protocol},{score!r},{rank},{int(label_of[rid])}")
            any_rows = True
    if any_rows:
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return any_rows


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_pipeline_artifacts(p: dict, source: ProcessEventMatrix, target: ProcessEventMatrix, out: Path) -> list:
    """Whatever the P3 pipeline produced: feature scores, models, embeddings, similarity report."""
    written = []
    if "table" in p:
        xai.write_feature_scores(p["table"], p["selection"], out / "feature_scores.csv")
        written.append("feature_scores.csv")
    models = out / "models"
    for key, name in (("pretrained", "aae_pretrained.json"), ("model", "aae_transfer.json")):
        if key in p:
            models.mkdir(exist_ok=True)
            write_json(model_to_json(p[key]), models / name)
            written.append(f"models/{name}")
    if "contrastive_head" in p:
        write_json(align.head_to_json(p["contrastive_head"]), models / "contrastive_head.json")
        written.append("models/contrastive_head.json")
    if "siamese" in p:
        write_json(align.siamese_to_json(p["siamese"]), models / "siamese.json")
        written.append("models/siamese.json")
    blocks = []
    for key, stage in (("latent", "raw"), ("refined", "refined"), ("aligned", "aligned")):
        if key in p:
            Es, Et = p[key]
            blocks.append((source.row_ids, "source", stage, Es))
            blocks.append((target.row_ids, "target", stage, Et))
    if blocks:
        align.write_embeddings(out / "embeddings.csv", blocks)
        written.append("embeddings.csv")
    if "similarity" in p:
        write_json(p["similarity"], out / "similarity.json")
        written.append("similarity.json")
    return written


# ------------------------------------------------------------------ report


def _fmt(v, digits=3):
    return "-" if v is None else f"{v:.{digits}f}"


def report_table(grid: ProtocolResultGrid, dataset: str, os_tag: str = "") -> str:
    cols = (["Method"] + [f"nDCG {p}" for p in PROTOCOLS] + [f"AUC {p}" for p in PROTOCOLS]
            + ["%Impr nDCG", "%Impr AUC", "p-value", "Sig"])
    rows = []
    for method in grid.methods(dataset):
        friedman = grid.tests(dataset, method, "ndcg").get("friedman")
        p = None if friedman is None else friedman.p_value
        rows.append(
            [method]
            + [_fmt(grid.mean(dataset, method, q, "ndcg")) for q in PROTOCOLS]
            + [_fmt(grid.mean(dataset, method, q, "auc")) for q in PROTOCOLS]
            + [_fmt(grid.improvement(dataset, method, "ndcg"), 1),
               _fmt(grid.improvement(dataset, method, "auc"), 1),
               _fmt(p, 4), CHECK_MARK if p is not None and p < 0.05 else ""]
        )
    widths = [max(len(c), *(len(r[i]) for r in rows)) for i, c in enumerate(cols)]
    line = lambda cells: "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()  # noqa: E731
    title = f"Dataset: {dataset}" + (f" ({os_tag})" if os_tag else "")
    body = [title, line(cols), line(["-" * w for w in widths])] + [line(r) for r in rows]
    return "\n".join(body) + "\n"


def emit_report(grid: ProtocolResultGrid, out_dir, os_tags: dict | None = None) -> list:
    """report.txt (one table per dataset), results.csv and stats.json."""
    if not grid.cells:
        raise ValueError("grid is empty")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    os_tags = os_tags or {}
    tables = [report_table(grid, ds, os_tags.get(ds, "")) for ds in grid.datasets()]
    (out / "report.txt").write_text("\n".join(tables), encoding="utf-8")
    write_results(grid, out / "results.csv", os_tags)
    write_json(stats_summary(grid), out / "stats.json")
    return ["report.txt", "results.csv", "stats.json"]


def grid_from_results(path) -> tuple:
    """Rebuild (grid, os tags) from a results.csv; nan cells come back as failures."""
    grid = ProtocolResultGrid()
    os_tags = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != RESULTS_HEADER:
            raise MatrixParseError(f"{path}: expected header {','.join(RESULTS_HEADER)}")
        for row in reader:
            seed = int(row["seed"])
            if seed not in grid.seeds:
                grid.seeds.append(seed)
            os_tags[row["dataset"]] = row["os"]
            key = (row["dataset"], row["method"], row["protocol"], seed)
            nd, au = float(row["ndcg"]), float(row["auc"])
            if math.isnan(nd) or math.isnan(au):
                grid.cells[key] = CellFailure("failed in the original run")
            else:
                grid.cells[key] = RankingMetrics(nd, au, None)
    return grid, os_tags


# ------------------------------------------------------------------ runner


def _versions() -> dict:
    import scipy
    import sklearn

    return {"aptkit": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "scikit-learn": sklearn.__version__}


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


class Manifest:
    """Run manifest kept on disk after every stage so a crash still leaves a record."""

    def __init__(self, cfg: ExperimentConfig, out: Path, command: str):
        self.out = out
        self.data = {
            "command": command,
            "config": cfg.raw,
            "seeds": list(cfg.seeds),
            "versions": _versions(),
            "datasets": {},
            "stage_seconds": {},
            "artifacts": [],
            "status": "running",
            "failure": None,
            "cell_failures": [],
            "started": _now(),
            "finished": None,
        }

    def stage(self, name, fn):
        t0 = time.perf_counter()
        try:
            return fn()
        except Exception as exc:
            raise StageFailure(name, exc) from exc
        finally:
            self.data["stage_seconds"][name] = self.data["stage_seconds"].get(name, 0.0) + time.perf_counter() - t0

    def add(self, names):
        for n in names:
            if n not in self.data["artifacts"]:
                self.data["artifacts"].append(n)

    def save(self):
        self.data["finished"] = _now()
        write_json(self.data, self.out / "manifest.json")


def _record_datasets(manifest: Manifest, cfg: ExperimentConfig, seed: int, data: dict):
    for name, (m, _) in data.items():
        spec = cfg.source if name == cfg.source.name else cfg.target if name == cfg.target.name else None
        if spec is not None and spec.path is not None:
            entry = {"path": str(spec.path), "sha256": file_sha256(spec.path)}
        else:
            entry = {"generated": True, "sha256": matrix_sha256(m)}
        manifest.data["datasets"].setdefault(name, {})[str(seed)] = entry


def run_experiment(cfg: ExperimentConfig, progress=None) -> int:
    """Execute the full pipeline for every seed and write all artifacts; returns an exit code."""
    out = Path(cfg.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        if progress:
            progress(f"cannot create output directory: {exc}")
        return EXIT_IO
    manifest = Manifest(cfg, out, "run")
    code = EXIT_OK
    try:
        datasets, os_tags = {}, {cfg.source.name: cfg.source.os_tag, cfg.target.name: cfg.target.os_tag}
        for seed in cfg.seeds:
            data = manifest.stage("gen-data", lambda: load_datasets(cfg, seed))
            src, tgt = data[cfg.source.name][0], data[cfg.target.name][0]
            if cfg.augment_enabled:
                extra, _ = manifest.stage("augment", lambda: derive_augmented(cfg, src, tgt, seed))
                for name, m in extra.items():
                    data[name] = (m, "Synthetic")
                    os_tags[name] = "Synthetic"
            _record_datasets(manifest, cfg, seed, data)
            datasets[seed] = data

        source = lambda s: datasets[s][cfg.source.name][0]  # noqa: E731
        names = [n for n in datasets[cfg.seeds[0]] if n != cfg.source.name]
        targets = {n: (lambda s, n=n: datasets[s][n][0]) for n in names}
        grid = manifest.stage("grid", lambda: run_protocol_grid(
            source, targets, cfg.methods, cfg.protocols, cfg.protocol, cfg.seeds,
            keep_scores=True, progress=(lambda k, c: progress(_cell_line(k, c))) if progress else None))
        for key, t in grid.timings.items():
            for name, sec in t.items():
                manifest.data["stage_seconds"][f"grid/{name}"] = (
                    manifest.data["stage_seconds"].get(f"grid/{name}", 0.0) + sec)
        for key, art in grid.artifacts.items():
            for name, sec in art["stage_seconds"].items():
                manifest.data["stage_seconds"][f"p3/{name}"] = (
                    manifest.data["stage_seconds"].get(f"p3/{name}", 0.0) + sec)

        manifest.add(manifest.stage("evaluate", lambda: emit_report(grid, out, os_tags)))
        first = cfg.seeds[0]
        if manifest.stage("detect", lambda: write_scores(grid, out / "scores.csv", cfg.target.name, first)):
            manifest.add(["scores.csv"])
        art = grid.artifacts.get((cfg.target.name, first))
        if art is not None:
            manifest.add(manifest.stage("export", lambda: write_pipeline_artifacts(
                art, datasets[first][cfg.source.name][0], datasets[first][cfg.target.name][0], out)))

        failures = grid.failures()
        if failures:
            manifest.data["cell_failures"] = [
                {"cell": list(k), "error": f.error} for k, f in failures.items()]
            first_fail = next(iter(failures))
            manifest.data["failure"] = {"stage": "grid", "cell": list(first_fail),
                                        "error": failures[first_fail].error}
            code = EXIT_STAGE
    except StageFailure as exc:
        cause = exc.cause
        manifest.data["failure"] = {"stage": exc.stage, "error": f"{type(cause).__name__}: {cause}",
                                    "traceback": traceback.format_exception(type(cause), cause,
                                                                            cause.__traceback__, limit=4)}
        code = EXIT_IO if isinstance(cause, (OSError, MatrixParseError, SchemaError)) else EXIT_STAGE
        if progress:
            progress(str(exc))
    manifest.data["status"] = "ok" if code == EXIT_OK else "failed"
    try:
        manifest.save()
    except OSError:
        return EXIT_IO
    return code


def _cell_line(key, cell) -> str:
    ds, method, proto, seed = key
    if isinstance(cell, RankingMetrics):
        return f"seed {seed} {ds} {method} {proto}: ndcg={cell.ndcg:.4f} auc={cell.auc:.4f}"
    return f"seed {seed} {ds} {method} {proto}: FAILED {cell.error}"


def first_seed_pipeline(cfg: ExperimentConfig, upto: str):
    """Single-seed slice of the full-transfer pipeline for the stage subcommands."""
    seed = cfg.seeds[0]
    data = load_datasets(cfg, seed)
    src, tgt = data[cfg.source.name][0], data[cfg.target.name][0]
    p = run_p3_pipeline(src, tgt, cfg.protocol.seeded(seed), seed, upto)
    return p, src, tgt


def save_datasets(cfg: ExperimentConfig, out: Path) -> list:
    data_dir = out / "data"
    data_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for seed in cfg.seeds:
        for name, (m, _) in load_datasets(cfg, seed).items():
            fname = f"{name}_seed{seed}.csv"
            save_matrix(m, data_dir / fname)
            written.append(f"data/{fname}")
    return written


def save_augmented(cfg: ExperimentConfig, out: Path) -> list:
    seed = cfg.seeds[0]
    data = load_datasets(cfg, seed)
    extra, models = derive_augmented(cfg, data[cfg.source.name][0], data[cfg.target.name][0], seed)
    (out / "data").mkdir(parents=True, exist_ok=True)
    (out / "models").mkdir(parents=True, exist_ok=True)
    written = []
    for name, m in extra.items():
        save_matrix(m, out / "data" / f"{name}.csv")
        written.append(f"data/{name}.csv")
    for num, g in models.items():
        write_json(augment.generator_to_json(g), out / "models" / f"generator_scenario{num}.json")
        written.append(f"models/generator_scenario{num}.json")
    return written
