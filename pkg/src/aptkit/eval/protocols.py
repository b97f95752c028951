"""Evaluation protocols P0-P3 over seeds, datasets and methods.

P0  fit and score inside the source domain (train/test view)
P1  fit on source, score the target as is
P2  minimal adaptation: tuned hyperparameters for classical detectors, target
    fine-tuning with dropout for the neural ones; no selection, no alignment
P3  full pipeline: feature selection, autoencoder pretraining, transfer
    fine-tuning, contrastive refinement, Siamese alignment, then scoring
"""

from __future__ import annotations

import time
import traceback
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Union

import numpy as np

from .. import align, xai
from ..data import ProcessEventMatrix, SynthConfig, generate_synthetic, train_test_views
from ..detect import DetectorConfig, make_detector
from ..nn import TrainConfig, encode, reconstruction_errors, train_autoencoder
from ..nn.autoencoder import continue_training, fine_tune_transfer
from .metrics import RankingMetrics, UndefinedMetricError, auc, ranking_metrics
from .stats import avg_incremental_improvement, friedman_test, wilcoxon_signed_rank

PROTOCOLS = ("P0", "P1", "P2", "P3")
CLASSICAL = ("IsolationForest", "OneClassSVM", "LOF", "KNN", "DBSCAN")
NEURAL = ("DeepSVDD", "AE")
METHODS = CLASSICAL + NEURAL + ("AAE",)
DEFAULT_METHODS = CLASSICAL + ("DeepSVDD", "AAE")

# hyperparameter grids searched in P2 (field of DetectorConfig -> candidates)
P2_GRID = {
    "IsolationForest": ("if_n_trees", (50, 100, 200)),
    "KNN": ("knn_k", (5, 10, 20)),
    "LOF": ("lof_k", (5, 10, 20)),
    "OneClassSVM": ("ocsvm_nu", (0.05, 0.1, 0.2)),
    "DBSCAN": ("dbscan_eps_scale", (0.5, 1.0, 2.0)),
}


class ProtocolConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ProtocolConfig:
    train: TrainConfig = TrainConfig(learning_rate=3e-3, epochs=100)
    finetune: TrainConfig = TrainConfig(learning_rate=1e-3, epochs=50)
    surrogate: TrainConfig = TrainConfig(learning_rate=3e-3, epochs=50)
    shap: xai.ShapConfig = xai.ShapConfig(instances="top_error")
    alpha: float = 0.5
    beta: float = 0.5
    gamma: float = 0.5
    xi: float = 0.95
    lambda_src: float = 1.0
    lambda_reg: float = 0.01
    p2_dropout: float = 0.2
    p3_dropout: float = 0.2
    p2_tune_fraction: float = 0.3
    p0_train_fraction: float = 0.7
    n_clusters: int = 4
    contrastive: align.ContrastiveConfig = align.ContrastiveConfig()
    siamese: align.SiameseConfig = align.SiameseConfig()
    detector: DetectorConfig = DetectorConfig()
    p3_detector_input: str = "aligned"
    ndcg_cutoff: Optional[int] = None

    def __post_init__(self):
        if self.p3_detector_input not in ("aligned", "refined"):
            raise ProtocolConfigError("p3_detector_input must be 'aligned' or 'refined'")
        if not 0.0 < self.xi <= 1.0:
            raise ProtocolConfigError("xi must be in (0, 1]")
        if self.lambda_src < 0:
            raise ProtocolConfigError("lambda_src must be >= 0")
        for name in ("p2_dropout", "p3_dropout"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ProtocolConfigError(f"{name} must be in [0, 1)")
        if self.n_clusters < 2:
            raise ProtocolConfigError("n_clusters must be >= 2")

    def seeded(self, seed: int) -> "ProtocolConfig":
        return replace(
            self,
            train=replace(self.train, seed=seed),
            finetune=replace(self.finetune, seed=seed),
            surrogate=replace(self.surrogate, seed=seed),
            shap=replace(self.shap, seed=seed),
            contrastive=replace(self.contrastive, seed=seed),
            siamese=replace(self.siamese, seed=seed),
            detector=replace(self.detector, seed=seed),
        )


@dataclass(frozen=True)
class CellFailure:
    error: str
    stage: str = ""


@dataclass
class ProtocolResultGrid:
    cells: dict = field(default_factory=dict)  # (dataset, method, protocol, seed) -> RankingMetrics | CellFailure
    stage_log: dict = field(default_factory=dict)  # same key -> [stage, ...]
    scores: dict = field(default_factory=dict)  # same key -> (row_ids, scores, labels)
    artifacts: dict = field(default_factory=dict)  # (dataset, seed) -> P3 pipeline outputs
    timings: dict = field(default_factory=dict)
    seeds: list = field(default_factory=list)

    def datasets(self):
        return sorted({k[0] for k in self.cells})

    def methods(self, dataset=None):
        seen = []
        for k in self.cells:
            if (dataset is None or k[0] == dataset) and k[1] not in seen:
                seen.append(k[1])
        return seen

    def values(self, dataset, method, protocol, metric="ndcg") -> dict:
        """seed -> metric value for successful cells."""
        out = {}
        for seed in self.seeds:
            c = self.cells.get((dataset, method, protocol, seed))
            if isinstance(c, RankingMetrics):
                out[seed] = getattr(c, metric)
        return out

    def mean(self, dataset, method, protocol, metric="ndcg") -> Optional[float]:
        v = list(self.values(dataset, method, protocol, metric).values())
        return float(np.mean(v)) if v else None

    def failures(self):
        return {k: c for k, c in self.cells.items() if isinstance(c, CellFailure)}

    def improvement(self, dataset, method, metric="ndcg") -> Optional[float]:
        p = [self.mean(dataset, method, q, metric) for q in ("P1", "P2", "P3")]
        if any(v is None for v in p):
            return None
        try:
            return avg_incremental_improvement(*p)
        except ValueError:
            return None

    def tests(self, dataset, method, metric="ndcg") -> dict:
        """Friedman over seeds x protocols and Wilcoxon P0 vs P3 across seeds."""
        out = {}
        protos = [p for p in PROTOCOLS if self.values(dataset, method, p, metric)]
        common = [s for s in self.seeds
                  if all(s in self.values(dataset, method, p, metric) for p in protos)]
        if len(protos) >= 2 and len(common) >= 2:
            M = [[self.values(dataset, method, p, metric)[s] for p in protos] for s in common]
            out["friedman"] = friedman_test(M)
        v0 = self.values(dataset, method, "P0", metric)
        v3 = self.values(dataset, method, "P3", metric)
        paired = [s for s in self.seeds if s in v0 and s in v3]
        if paired:
            out["wilcoxon_p0_p3"] = wilcoxon_signed_rank([v3[s] for s in paired], [v0[s] for s in paired])
        return out


# ------------------------------------------------------------------ datasets


def synthetic_pair(seed: int, n: int = 1000, d: int = 30, anomaly_ratio: float = 0.01,
                   shift: float = 0.3, n_nuisance: int = 8, n_clusters: int = 4,
                   anomaly_rarity: float = 0.7, nuisance_p=(0.1, 0.3)):
    """Source/target pair sharing the planted anomaly mechanism.

    The target perturbs benign prototypes and carries ``n_nuisance`` noisy
    columns that are silent in the source.
    """
    n_anom = max(1, int(round(anomaly_ratio * n)))
    base = SynthConfig(n_benign=n, n_anomalies=n_anom, d=d, n_clusters=n_clusters, seed=seed,
                       anomaly_rarity=anomaly_rarity, n_nuisance=n_nuisance,
                       nuisance_p=tuple(nuisance_p), scenario=1)
    source, _ = generate_synthetic(base)
    target, _ = generate_synthetic(replace(base, domain="target", shift=shift, scenario=2))
    return source, target


# ------------------------------------------------------------------ runners


def _resolve(obj, seed):
    return obj(seed) if callable(obj) else obj


def _check_labels(m: ProcessEventMatrix, what: str):
    if m.labels is None:
        raise ProtocolConfigError(f"{what} needs labels for evaluation")


P3_STAGES = ("select_features", "train_autoencoder", "fine_tune_transfer", "contrastive", "siamese")


def run_p3_pipeline(source: ProcessEventMatrix, target: ProcessEventMatrix, cfg: ProtocolConfig,
                    seed: int = 0, upto: str = "siamese") -> dict:
    """Run the full-transfer stages in order, stopping after ``upto``.

    ``cfg`` should already be seeded (see :meth:`ProtocolConfig.seeded`).
    Returns every intermediate product plus per-stage wall-clock seconds.
    """
    if upto not in P3_STAGES:
        raise ProtocolConfigError(f"upto must be one of {P3_STAGES}")
    last = P3_STAGES.index(upto)
    out = {"stage_seconds": {}}
    t = out["stage_seconds"]

    t0 = time.perf_counter()
    table = xai.score_features(source, cfg.alpha, cfg.beta, cfg.gamma, cfg.surrogate, cfg.shap)
    sel = xai.select_features(table, cfg.xi)
    cols = sorted(sel.selected)
    src, tgt = source.subset_cols(cols), target.subset_cols(cols)
    t["select_features"] = time.perf_counter() - t0
    out.update(table=table, selection=sel, columns=cols, source_sel=src, target_sel=tgt)
    if last < 1:
        return out

    t0 = time.perf_counter()
    pre, _ = train_autoencoder(src, "AAE", cfg=cfg.train, lambda_reg=cfg.lambda_reg)
    t["train_autoencoder"] = time.perf_counter() - t0
    out["pretrained"] = pre
    if last < 2:
        return out

    t0 = time.perf_counter()
    tuned, _ = fine_tune_transfer(pre, src, tgt, cfg.lambda_src, cfg.finetune, cfg.p3_dropout)
    t["fine_tune_transfer"] = time.perf_counter() - t0
    Zs, Zt = encode(tuned, src), encode(tuned, tgt)
    out.update(model=tuned, latent=(Zs, Zt))
    if last < 3:
        return out

    t0 = time.perf_counter()
    pseudo = align.kmeans_pseudolabels(Zs, cfg.n_clusters, seed)
    lab_t = align.assign_to_centroids(Zt, pseudo)
    lab_all = np.concatenate([pseudo.assignments, lab_t])
    head, refined, _ = align.train_contrastive_head(np.vstack([Zs, Zt]), lab_all, cfg.contrastive)
    Rs, Rt = refined[: len(Zs)], refined[len(Zs):]
    t["contrastive"] = time.perf_counter() - t0
    out.update(pseudo=pseudo, target_labels=lab_t, contrastive_head=head, refined=(Rs, Rt))
    if last < 4:
        return out

    t0 = time.perf_counter()
    net, _ = align.train_siamese(Rs, Rt, pseudo.assignments, lab_t, cfg=cfg.siamese)
    As, At = net.transform(Rs), net.transform(Rt)
    pairs = align.domain_pairs(pseudo.assignments, lab_t, 256, seed)
    t["siamese"] = time.perf_counter() - t0
    out.update(siamese=net, aligned=(As, At), similarity=align.similarity_summary(net, Rs, Rt, pairs))
    return out


class _SeedRun:
    """All protocol cells for one (seed, target); shared stages are computed once."""

    def __init__(self, source, target, cfg: ProtocolConfig, seed: int):
        self.source, self.target, self.cfg, self.seed = source, target, cfg, seed
        self._cache = {}
        self.timings = {}

    def _timed(self, name, fn):
        if name not in self._cache:
            t0 = time.perf_counter()
            self._cache[name] = fn()
            self.timings[name] = time.perf_counter() - t0
        return self._cache[name]

    # -- shared pieces

    def source_aae(self):
        return self._timed("train_autoencoder", lambda: train_autoencoder(
            self.source, "AAE", cfg=self.cfg.train, lambda_reg=self.cfg.lambda_reg)[0])

    def p0_views(self):
        return self._timed("split", lambda: train_test_views(
            self.source, self.cfg.p0_train_fraction, self.seed))

    def pipeline(self):
        return self._timed("p3_pipeline", lambda: run_p3_pipeline(
            self.source, self.target, self.cfg, self.seed))

    # -- cells

    def cell(self, method: str, protocol: str):
        """Returns (row_ids, scores, labels, stages)."""
        return getattr(self, f"_{protocol.lower()}")(method)

    def _p0(self, method):
        train, test = self.p0_views()
        if method == "AAE":
            model, _ = train_autoencoder(train, "AAE", cfg=self.cfg.train, lambda_reg=self.cfg.lambda_reg)
            s = reconstruction_errors(model, test)
            stages = ["train_autoencoder(source_train)", "score(source_test)"]
        else:
            s = make_detector(method, self.cfg.detector).fit(train.X()).score(test.X())
            stages = [f"fit({method}, source_train)", "score(source_test)"]
        return test.row_ids, s, test.labels, stages

    def _p1(self, method):
        if method == "AAE":
            s = reconstruction_errors(self.source_aae(), self.target)
            stages = ["train_autoencoder(source)", "score(target)"]
        else:
            s = make_detector(method, self.cfg.detector).fit(self.source.X()).score(self.target.X())
            stages = [f"fit({method}, source)", "score(target)"]
        return self.target.row_ids, s, self.target.labels, stages

    def _p2(self, method):
        Xs, Xt = self.source.X(), self.target.X()
        if method == "AAE":
            model, _ = continue_training(self.source_aae(), self.target, self.cfg.finetune,
                                         dropout=self.cfg.p2_dropout)
            s = reconstruction_errors(model, self.target)
            stages = ["train_autoencoder(source)", f"fine_tune(target, dropout={self.cfg.p2_dropout})",
                      "score(target)"]
        elif method in NEURAL:
            det = make_detector(method, self.cfg.detector).fit(Xs).adapt(Xt, self.cfg.p2_dropout)
            s = det.score(Xt)
            stages = [f"fit({method}, source)", f"fine_tune(target, dropout={self.cfg.p2_dropout})",
                      "score(target)"]
        else:
            dcfg, tuned = self._tune(method)
            s = make_detector(method, dcfg).fit(Xs).score(Xt)
            stages = [f"tune({method}, {tuned})", f"fit({method}, source)", "score(target)"]
        return self.target.row_ids, s, self.target.labels, stages

    def _tune(self, method):
        """Pick the grid value with the best AUC on a labelled target slice."""
        name, grid = P2_GRID[method]
        tune_view, _ = self._timed("p2_slice", lambda: train_test_views(
            self.target, self.cfg.p2_tune_fraction, self.seed + 7919))
        base = self.cfg.detector
        if tune_view.labels is None or len(set(tune_view.labels.tolist())) < 2:
            return base, f"{name}=default"
        best, best_auc = None, -1.0
        Xs = self.source.X()
        for v in grid:
            dcfg = replace(base, **{name: v})
            try:
                s = make_detector(method, dcfg).fit(Xs).score(tune_view.X())
                a = auc(s, tune_view.labels)
            except (ValueError, UndefinedMetricError):
                continue
            if a > best_auc:
                best, best_auc = dcfg, a
        if best is None:
            return base, f"{name}=default"
        return best, f"{name}={getattr(best, name)}"

    def _p3(self, method):
        p = self.pipeline()
        stages = ["select_features", "train_autoencoder(source_selected)", "fine_tune_transfer",
                  "kmeans_pseudolabels", "train_contrastive_head", "train_siamese"]
        if method == "AAE":
            s = reconstruction_errors(p["model"], p["target_sel"])
            stages.append("score(target, reconstruction)")
        else:
            Es, Et = p[self.cfg.p3_detector_input]
            s = make_detector(method, self.cfg.detector).fit(Es).score(Et)
            stages.append(f"score(target, {self.cfg.p3_detector_input} embeddings)")
        return self.target.row_ids, s, self.target.labels, stages


def run_protocol_grid(source: Union[ProcessEventMatrix, Callable], targets: dict,
                      methods=DEFAULT_METHODS, protocols=PROTOCOLS,
                      config: ProtocolConfig = ProtocolConfig(), seeds=(0,),
                      keep_scores: bool = True, progress: Optional[Callable] = None) -> ProtocolResultGrid:
    """Fill every (dataset, method, protocol, seed) cell.

    ``source`` and each value of ``targets`` may be a matrix or a callable taking
    the seed. A failing cell records the error and the grid moves on.
    """
    methods, protocols = list(methods), list(protocols)
    if not methods:
        raise ProtocolConfigError("methods must be nonempty")
    for m in methods:
        if m not in METHODS:
            raise ProtocolConfigError(f"unknown method {m!r}")
    for p in protocols:
        if p not in PROTOCOLS:
            raise ProtocolConfigError(f"unknown protocol {p!r}")
    if not targets:
        raise ProtocolConfigError("need at least one target dataset")
    grid = ProtocolResultGrid(seeds=list(seeds))
    for seed in seeds:
        cfg = config.seeded(seed)
        src = _resolve(source, seed)
        _check_labels(src, "source")
        for name, tgt_spec in targets.items():
            tgt = _resolve(tgt_spec, seed)
            _check_labels(tgt, f"target {name}")
            if tgt.col_names != src.col_names:
                raise ProtocolConfigError(f"target {name} columns differ from the source")
            run = _SeedRun(src, tgt, cfg, seed)
            for method in methods:
                for proto in protocols:
                    key = (name, method, proto, seed)
                    try:
                        ids, s, y, stages = run.cell(method, proto)
                        s = np.asarray(s, dtype=np.float64)
                        if not np.all(np.isfinite(s)):
                            raise FloatingPointError("non-finite scores")
                        grid.cells[key] = ranking_metrics(s, y, config.ndcg_cutoff)
                        grid.stage_log[key] = stages
                        if keep_scores:
                            grid.scores[key] = (list(ids), s, np.asarray(y))
                    except Exception as exc:  # noqa: BLE001 - a failed cell must not stop the grid
                        grid.cells[key] = CellFailure(f"{type(exc).__name__}: {exc}",
                                                      traceback.format_exc(limit=3))
                        grid.stage_log[key] = ["failed"]
                    if progress:
                        progress(key, grid.cells[key])
            if "p3_pipeline" in run._cache:
                grid.artifacts[(name, seed)] = run._cache["p3_pipeline"]
            grid.timings[(name, seed)] = dict(run.timings)
    return grid
