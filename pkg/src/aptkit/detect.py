"""Anomaly scorers with one contract: fit on a matrix, score rows, higher = more anomalous."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from sklearn.cluster import DBSCAN as _DBSCAN
from sklearn.ensemble import IsolationForest as _IsolationForest
from sklearn.kernel_approximation import RBFSampler
from sklearn.linear_model import SGDOneClassSVM
from sklearn.neighbors import LocalOutlierFactor, NearestNeighbors

from .nn import TrainConfig, encode, reconstruction_errors, train_autoencoder
from .nn.autoencoder import continue_training

DETECTOR_KINDS = (
    "IsolationForest", "OneClassSVM", "LOF", "KNN", "DBSCAN", "DeepSVDD", "AE", "AAEReconstruction",
)


class DetectorConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DetectorConfig:
    seed: int = 0
    if_n_trees: int = 100
    if_subsample: int = 256
    ocsvm_nu: float = 0.1
    ocsvm_rff_dim: int = 200
    ocsvm_gamma: Optional[float] = None  # None -> 1 / (p * Var(X))
    ocsvm_epochs: int = 50
    lof_k: int = 20
    knn_k: int = 10
    dbscan_eps: Optional[float] = None  # None -> 90th percentile of k-distance
    dbscan_eps_scale: float = 1.0
    dbscan_k: int = 4
    dbscan_min_pts: int = 4
    net_epochs: int = 50
    net_lr: float = 1e-3
    net_batch_size: int = 128

    def __post_init__(self):
        for name in ("if_n_trees", "if_subsample", "ocsvm_rff_dim", "ocsvm_epochs", "lof_k", "knn_k",
                     "dbscan_k", "dbscan_min_pts", "net_epochs", "net_batch_size"):
            if getattr(self, name) < 1:
                raise DetectorConfigError(f"{name} must be >= 1")
        if not 0.0 < self.ocsvm_nu < 1.0:
            raise DetectorConfigError("ocsvm_nu must be in (0, 1)")

    def train_config(self) -> TrainConfig:
        return TrainConfig(learning_rate=self.net_lr, batch_size=self.net_batch_size,
                           epochs=self.net_epochs, seed=self.seed)


@dataclass
class AnomalyScores:
    scores: np.ndarray
    kind: str
    config: dict


def average_path_length(n: int) -> float:
    """Expected unsuccessful-search path length c(n) in a binary search tree."""
    if n <= 1:
        return 0.0
    if n == 2:
        return 1.0
    harmonic = np.log(n - 1) + np.euler_gamma
    return 2.0 * harmonic - 2.0 * (n - 1) / n


def _minmax_fit(X):
    lo, hi = X.min(axis=0), X.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    return lo, span


class Detector:
    kind = ""
    min_rows = 2

    def __init__(self, cfg: DetectorConfig = DetectorConfig()):
        self.cfg = cfg

    def _check(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[0] < self.min_rows:
            raise DetectorConfigError(f"{self.kind} needs at least {self.min_rows} rows, got {X.shape[0]}")
        return X

    def fit(self, X) -> "Detector":
        raise NotImplementedError

    def score(self, X) -> np.ndarray:
        raise NotImplementedError

    def fit_score(self, X) -> np.ndarray:
        """Score the training rows themselves (leave-self-out where it matters)."""
        return self.fit(X).score(X)

    def adapt(self, X_target, dropout: float = 0.2) -> "Detector":
        """Target-side adaptation hook; classical detectors have none."""
        return self


class IsolationForestDetector(Detector):
    kind = "IsolationForest"

    def fit(self, X):
        X = self._check(X)
        self.model = _IsolationForest(n_estimators=self.cfg.if_n_trees,
                                      max_samples=min(self.cfg.if_subsample, X.shape[0]),
                                      random_state=self.cfg.seed).fit(X)
        return self

    def score(self, X):
        # sklearn returns -2^(-E[h(x)] / c(psi))
        return -self.model.score_samples(np.atleast_2d(X))


class OneClassSVMDetector(Detector):
    """Random Fourier features + linear one-class SVM fitted by SGD on the nu-hinge objective."""

    kind = "OneClassSVM"

    def fit(self, X):
        X = self._check(X)
        gamma = self.cfg.ocsvm_gamma
        if gamma is None:
            var = X.var()
            gamma = 1.0 / (X.shape[1] * var) if var > 0 else 1.0
        self.gamma_ = gamma
        self.rff = RBFSampler(gamma=gamma, n_components=self.cfg.ocsvm_rff_dim,
                              random_state=self.cfg.seed).fit(X)
        self.svm = SGDOneClassSVM(nu=self.cfg.ocsvm_nu, max_iter=self.cfg.ocsvm_epochs, tol=None,
                                  random_state=self.cfg.seed, learning_rate="optimal")
        self.svm.fit(self.rff.transform(X))
        return self

    def score(self, X):
        # decision_function = w.phi(x) - rho
        return -self.svm.decision_function(self.rff.transform(np.atleast_2d(X)))


class LOFDetector(Detector):
    kind = "LOF"

    @property
    def min_rows(self):
        return self.cfg.lof_k + 1

    def fit(self, X):
        X = self._check(X)
        self.X_ = X
        self.model = LocalOutlierFactor(n_neighbors=self.cfg.lof_k, novelty=True).fit(X)
        return self

    def score(self, X):
        return -self.model.score_samples(np.atleast_2d(X))

    def fit_score(self, X):
        X = self._check(X)
        lof = LocalOutlierFactor(n_neighbors=self.cfg.lof_k)
        lof.fit(X)
        self.model = LocalOutlierFactor(n_neighbors=self.cfg.lof_k, novelty=True).fit(X)
        return -lof.negative_outlier_factor_


class KNNDetector(Detector):
    kind = "KNN"

    @property
    def min_rows(self):
        return self.cfg.knn_k + 1

    def fit(self, X):
        X = self._check(X)
        self.nn = NearestNeighbors(n_neighbors=self.cfg.knn_k).fit(X)
        return self

    def score(self, X):
        dist, _ = self.nn.kneighbors(np.atleast_2d(X), n_neighbors=self.cfg.knn_k)
        return dist[:, -1]

    def fit_score(self, X):
        X = self._check(X)
        self.fit(X)
        dist, _ = self.nn.kneighbors(None, n_neighbors=self.cfg.knn_k)
        return dist[:, -1]


class DBSCANDetector(Detector):
    """Core/border rows score 0; noise rows score their distance to the nearest core row."""

    kind = "DBSCAN"

    @property
    def min_rows(self):
        return max(self.cfg.dbscan_k, self.cfg.dbscan_min_pts) + 1

    def fit(self, X):
        X = self._check(X)
        eps = self.cfg.dbscan_eps
        if eps is None:
            kd, _ = NearestNeighbors(n_neighbors=self.cfg.dbscan_k).fit(X).kneighbors(None)
            eps = float(np.percentile(kd[:, -1], 90))
        # duplicate-heavy data can give a zero k-distance; keep eps strictly positive
        eps = max(eps * self.cfg.dbscan_eps_scale, 1e-9)
        self.eps_ = eps
        db = _DBSCAN(eps=eps, min_samples=self.cfg.dbscan_min_pts).fit(X)
        core = db.core_sample_indices_
        self.core_ = X[core] if core.size else X
        self.no_core_ = core.size == 0
        self.core_nn = NearestNeighbors(n_neighbors=1).fit(self.core_)
        return self

    def score(self, X):
        dist, _ = self.core_nn.kneighbors(np.atleast_2d(X), n_neighbors=1)
        d = dist[:, 0]
        return np.where(d <= self.eps_, 0.0, d)


class _NetDetector(Detector):
    """Shared plumbing for detectors backed by a baseline autoencoder on min-max scaled inputs."""

    min_rows = 2

    def _scale(self, X):
        return (np.atleast_2d(np.asarray(X, dtype=np.float64)) - self.lo_) / self.span_

    def fit(self, X):
        X = self._check(X)
        self.lo_, self.span_ = _minmax_fit(X)
        self.model, self.trace = train_autoencoder(self._scale(X), "AE", cfg=self.cfg.train_config())
        self._after_fit(self._scale(X))
        return self

    def adapt(self, X_target, dropout=0.2):
        Xt = self._scale(self._check(X_target))
        self.model, _ = continue_training(self.model, Xt, self.cfg.train_config(), dropout)
        self._after_fit(Xt)
        return self

    def _after_fit(self, Xs):
        pass


class DeepSVDDDetector(_NetDetector):
    """Fixed-centre Deep SVDD: squared distance of the encoder embedding to the mean training embedding."""

    kind = "DeepSVDD"

    def _after_fit(self, Xs):
        self.center_ = encode(self.model, Xs).mean(axis=0)

    def score(self, X):
        Z = encode(self.model, self._scale(X))
        return ((Z - self.center_) ** 2).sum(axis=1)


class AEDetector(_NetDetector):
    kind = "AE"

    def score(self, X):
        return reconstruction_errors(self.model, self._scale(X))


class AAEReconstructionDetector(Detector):
    kind = "AAEReconstruction"
    min_rows = 1

    def __init__(self, cfg=DetectorConfig(), model_context=None):
        super().__init__(cfg)
        if model_context is None:
            raise DetectorConfigError("AAEReconstruction needs a trained autoencoder as model_context")
        self.model = model_context

    def fit(self, X):
        return self

    def score(self, X):
        return reconstruction_errors(self.model, np.atleast_2d(np.asarray(X, dtype=np.float64)))


_REGISTRY = {
    "IsolationForest": IsolationForestDetector,
    "OneClassSVM": OneClassSVMDetector,
    "LOF": LOFDetector,
    "KNN": KNNDetector,
    "DBSCAN": DBSCANDetector,
    "DeepSVDD": DeepSVDDDetector,
    "AE": AEDetector,
}


def make_detector(kind: str, cfg: DetectorConfig = DetectorConfig(), model_context=None) -> Detector:
    if kind == "AAEReconstruction":
        return AAEReconstructionDetector(cfg, model_context)
    if kind not in _REGISTRY:
        raise DetectorConfigError(f"unknown detector kind {kind!r}; expected one of {DETECTOR_KINDS}")
    return _REGISTRY[kind](cfg)


def detector_scores(kind: str, X, cfg: DetectorConfig = DetectorConfig(), model_context=None,
                    fit_X=None) -> AnomalyScores:
    """Fit on ``fit_X`` (default: ``X`` itself) and score ``X``."""
    det = make_detector(kind, cfg, model_context)
    if fit_X is None:
        s = det.fit_score(X)
    else:
        s = det.fit(fit_X).score(X)
    s = np.asarray(s, dtype=np.float64)
    if not np.all(np.isfinite(s)):
        raise FloatingPointError(f"{kind} produced non-finite scores")
    return AnomalyScores(s, kind, asdict(cfg))


def rank_processes(scores, ids, top_n: Optional[int] = None) -> list:
    """(id, score, rank) by descending score; ties keep row order; ranks start at 1."""
    s = scores.scores if isinstance(scores, AnomalyScores) else np.asarray(scores, dtype=np.float64)
    ids = list(ids)
    top_n = len(s) if top_n is None else top_n
    if top_n > len(s):
        raise ValueError("top_n exceeds the number of rows")
    order = np.lexsort((np.arange(len(s)), -s))[:top_n]
    return [(ids[i], float(s[i]), r + 1) for r, i in enumerate(order)]
