"""Per-feature importance: surrogate reconstruction error, entropy and Kernel SHAP.

The three components are min-max normalised, mixed with weights (alpha, beta,
gamma) and cut by cumulative contribution: keep the smallest top-K set whose
scores reach a fraction ``xi`` of the total.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field
from math import comb
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .data import ProcessEventMatrix
from .nn import TrainConfig, reconstruction_errors, reconstruct, train_autoencoder


class SelectionError(ValueError):
    pass


@dataclass(frozen=True)
class ShapConfig:
    n_coalitions: Optional[int] = None  # None -> 4d + 2
    background_size: int = 50
    explained_instances: int = 50
    seed: int = 0
    instances: str = "uniform"  # or "top_error": explain the rows f scores highest

    def __post_init__(self):
        if self.instances not in ("uniform", "top_error"):
            raise ValueError("instances must be 'uniform' or 'top_error'")

    def coalitions_for(self, d: int) -> int:
        n = 4 * d + 2 if self.n_coalitions is None else self.n_coalitions
        if n < 2 * d:
            raise ValueError("n_coalitions must be >= 2d")
        return n


@dataclass
class FeatureScoreTable:
    names: list
    re: np.ndarray
    ent: np.ndarray
    shap: np.ndarray
    s: np.ndarray
    weights: tuple = (0.5, 0.5, 0.5)
    normalization: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.s)


@dataclass(frozen=True)
class SelectionResult:
    xi: float
    K: int
    selected: tuple


# ---------------------------------------------------------------- components


def _fit_surrogate(m, cfg: TrainConfig):
    X = m.X() if isinstance(m, ProcessEventMatrix) else np.asarray(m, dtype=np.float64)
    if X.shape[0] < 20:
        raise ValueError("surrogate scoring needs at least 20 rows")
    model, _ = train_autoencoder(X, "AAE", cfg=cfg)
    return model, X


def surrogate_feature_re(m, cfg: TrainConfig = TrainConfig()) -> np.ndarray:
    """Mean squared reconstruction error per column from a throwaway autoencoder."""
    model, X = _fit_surrogate(m, cfg)
    return ((X - reconstruct(model, X)) ** 2).mean(axis=0)


def feature_entropy(m) -> np.ndarray:
    """Empirical Bernoulli entropy of each column in bits (0 log 0 = 0)."""
    X = m.X() if isinstance(m, ProcessEventMatrix) else np.asarray(m, dtype=np.float64)
    if X.shape[0] < 1:
        raise ValueError("entropy needs at least one row")
    p = X.mean(axis=0)
    out = np.zeros_like(p)
    for q in (p, 1.0 - p):
        nz = q > 0
        out[nz] -= q[nz] * np.log2(q[nz])
    return out


def shapley_kernel_weight(d: int, s: int) -> float:
    return (d - 1) / (comb(d, s) * s * (d - s))


def _coalitions(d: int, n_coalitions: int, rng: np.random.Generator):
    """Coalition masks and regression weights, excluding the empty and full sets.

    Enumerates every coalition when the budget allows (exact Shapley values);
    otherwise samples sizes from the Shapley kernel, paired with complements.
    """
    budget = n_coalitions - 2
    if d <= 30 and 2 ** d - 2 <= budget:
        masks, weights = [], []
        for s in range(1, d):
            w = shapley_kernel_weight(d, s)
            for idx in itertools.combinations(range(d), s):
                z = np.zeros(d)
                z[list(idx)] = 1.0
                masks.append(z)
                weights.append(w)
        return np.array(masks), np.array(weights)
    sizes = np.arange(1, d)
    p = (d - 1) / (sizes * (d - sizes))
    p = p / p.sum()
    masks = []
    while len(masks) < budget:
        s = rng.choice(sizes, p=p)
        z = np.zeros(d)
        z[rng.choice(d, size=s, replace=False)] = 1.0
        masks.append(z)
        if len(masks) < budget:
            masks.append(1.0 - z)
    return np.array(masks), np.ones(len(masks))


def kernel_shap(f: Callable, x, background, n_coalitions: Optional[int] = None, rng=None):
    """Kernel SHAP values for one instance.

    ``f`` maps an (n, d) array to n scalars. Absent features are filled from each
    background row and the outputs averaged; only features that differ from some
    background row enter the regression. Returns (phi, base_value) with
    ``phi.sum() == f(x) - base_value`` enforced by eliminating the last feature.
    """
    x = np.asarray(x, dtype=np.float64)
    B = np.atleast_2d(np.asarray(background, dtype=np.float64))
    d = x.size
    rng = rng or np.random.default_rng(0)
    base = float(np.mean(f(B)))
    fx = float(np.mean(f(x[None, :])))
    delta = fx - base
    phi = np.zeros(d)
    # a feature equal to x in every background row cannot change f: phi_j = 0
    varying = np.flatnonzero((B != x[None, :]).any(axis=0))
    M = varying.size
    if M == 0:
        return phi, base
    if M == 1:
        phi[varying] = delta
        return phi, base
    n_coalitions = 4 * d + 2 if n_coalitions is None else n_coalitions
    Zv, w = _coalitions(M, n_coalitions, rng)
    k, nb = Zv.shape[0], B.shape[0]
    Zm = np.zeros((k, d))
    Zm[:, varying] = Zv
    Zm[:, np.setdiff1d(np.arange(d), varying)] = 1.0
    filled = Zm[:, None, :] * x[None, None, :] + (1.0 - Zm[:, None, :]) * B[None, :, :]
    v = np.asarray(f(filled.reshape(k * nb, d)), dtype=np.float64).reshape(k, nb).mean(axis=1)
    y = v - base - Zv[:, -1] * delta
    A = Zv[:, :-1] - Zv[:, -1:]
    Aw = A * w[:, None]
    G = A.T @ Aw
    rhs = Aw.T @ y
    try:
        if np.linalg.cond(G) > 1e12:
            raise np.linalg.LinAlgError("ill-conditioned")
        head = np.linalg.solve(G, rhs)
    except np.linalg.LinAlgError:
        warnings.warn("singular Kernel SHAP system; using ridge 1e-8")
        head = np.linalg.solve(G + 1e-8 * np.eye(M - 1), rhs)
    phi[varying] = np.append(head, delta - head.sum())
    return phi, base


def reconstruction_error_fn(model) -> Callable:
    return lambda X: reconstruction_errors(model, X)


def shap_importance(m, f: Optional[Callable] = None, cfg: ShapConfig = ShapConfig(),
                    train_cfg: TrainConfig = TrainConfig(), return_phi: bool = False):
    """Mean |phi_j| over explained instances.

    With ``f`` unset, explains the reconstruction error of a freshly trained surrogate.
    Instances are drawn uniformly, or with ``instances="top_error"`` they are the
    rows with the largest ``f`` (the ones an analyst would be asked to triage).
    """
    X = m.X() if isinstance(m, ProcessEventMatrix) else np.asarray(m, dtype=np.float64)
    n, d = X.shape
    if cfg.background_size < 1:
        raise ValueError("background_size must be >= 1")
    if f is None:
        model, _ = _fit_surrogate(X, train_cfg)
        f = reconstruction_error_fn(model)
    root = np.random.SeedSequence(cfg.seed)
    pick_rng = np.random.default_rng(root.spawn(1)[0])
    bg = X[pick_rng.choice(n, size=min(cfg.background_size, n), replace=False)]
    inst = pick_rng.choice(n, size=min(cfg.explained_instances, n), replace=False)
    if cfg.instances == "top_error":
        fx = np.asarray(f(X), dtype=np.float64)
        inst = np.lexsort((np.arange(n), -fx))[: min(cfg.explained_instances, n)]
    n_coal = cfg.coalitions_for(d)
    phis = []
    for i, ss in zip(inst, root.spawn(len(inst))):
        phi, _ = kernel_shap(f, X[i], bg, n_coal, np.random.default_rng(ss))
        phis.append(phi)
    phis = np.array(phis)
    imp = np.abs(phis).mean(axis=0)
    return (imp, phis, inst) if return_phi else imp


# ---------------------------------------------------------------- combining


def _minmax(v):
    v = np.asarray(v, dtype=np.float64)
    lo, hi = float(v.min()), float(v.max())
    if hi - lo <= 0:
        return np.zeros_like(v), (lo, hi)
    return (v - lo) / (hi - lo), (lo, hi)


def combined_scores(re, ent, shap, alpha=0.5, beta=0.5, gamma=0.5, names=None) -> FeatureScoreTable:
    re, ent, shap = (np.asarray(v, dtype=np.float64) for v in (re, ent, shap))
    if not re.shape == ent.shape == shap.shape:
        raise ValueError("component vectors must have equal length")
    re_n, re_rng = _minmax(re)
    ent_n, ent_rng = _minmax(ent)
    shap_n, shap_rng = _minmax(shap)
    s = alpha * re_n + beta * ent_n + gamma * shap_n
    names = list(names) if names is not None else [f"f{j}" for j in range(len(s))]
    return FeatureScoreTable(
        names, re_n, ent_n, shap_n, s, (alpha, beta, gamma),
        {"re": re_rng, "entropy": ent_rng, "shap": shap_rng,
         "raw": {"re": re, "entropy": ent, "shap": shap}},
    )


def select_features(table: FeatureScoreTable, xi: float = 0.9) -> SelectionResult:
    """Smallest prefix of the score ranking holding at least ``xi`` of the total score."""
    if not 0.0 < xi <= 1.0:
        raise SelectionError("xi must be in (0, 1]")
    s = np.asarray(table.s, dtype=np.float64)
    if not (s > 0).any():
        raise SelectionError("all feature scores are zero")
    order = np.lexsort((np.arange(s.size), -s))
    csum = np.cumsum(s[order])
    K = int(np.searchsorted(csum, xi * csum[-1], side="left")) + 1
    K = min(K, s.size)
    return SelectionResult(xi, K, tuple(int(j) for j in order[:K]))


def score_features(m: ProcessEventMatrix, alpha=0.5, beta=0.5, gamma=0.5,
                   train_cfg: TrainConfig = TrainConfig(), shap_cfg: ShapConfig = ShapConfig()):
    """RE, entropy and SHAP from one surrogate, combined; the surrogate is dropped afterwards."""
    model, X = _fit_surrogate(m, train_cfg)
    re = ((X - reconstruct(model, X)) ** 2).mean(axis=0)
    ent = feature_entropy(X)
    shap = shap_importance(X, reconstruction_error_fn(model), shap_cfg)
    return combined_scores(re, ent, shap, alpha, beta, gamma, names=m.col_names)


def write_feature_scores(table: FeatureScoreTable, sel: SelectionResult, path) -> None:
    rank = np.empty(len(table.s), dtype=int)
    order = np.lexsort((np.arange(len(table.s)), -table.s))
    rank[order] = np.arange(1, len(order) + 1)
    chosen = set(sel.selected)
    raw = table.normalization.get("raw", {})
    lines = ["feature,re,entropy,shap,score,rank,selected"]
    for j, name in enumerate(table.names):
        re_v = raw.get("re", table.re)[j]
        ent_v = raw.get("entropy", table.ent)[j]
        sh_v = raw.get("shap", table.shap)[j]
        lines.append(f"{name},{float(re_v)!r},{float(ent_v)!r},{float(sh_v)!r},{float(table.s[j])!r},"
                     f"{rank[j]},{int(j in chosen)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
