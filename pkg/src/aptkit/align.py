"""Embedding refinement and cross-domain alignment.

K-Means pseudo-labels drive everything here: an InfoNCE projection head pulls
same-cluster embeddings together, and a shared-weight Siamese branch learns a
Euclidean metric where same-cluster pairs (within and across domains) are close.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .nn.core import Adam, DenseNet, finite_difference_check
from .nn.io import FORMAT_VERSION, ModelLoadError, layers_from_json, layers_to_json


class AlignConfigError(ValueError):
    pass


class SamplingError(ValueError):
    pass


# ---------------------------------------------------------------- similarity


def _unit_rows(V):
    V = np.atleast_2d(np.asarray(V, dtype=np.float64))
    norms = np.linalg.norm(V, axis=1, keepdims=True)
    safe = np.where(norms > 0, norms, 1.0)
    return np.where(norms > 0, V / safe, 0.0), norms[:, 0]


def cosine_similarity(a, b) -> float:
    """Cosine of two vectors; 0 if either is the zero vector."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def cosine_matrix(A, B) -> np.ndarray:
    Au, _ = _unit_rows(A)
    Bu, _ = _unit_rows(B)
    return np.clip(Au @ Bu.T, -1.0, 1.0)


def _cos_backward(U, Un, norms, dUn):
    """Gradient through row normalisation; zero rows get zero gradient."""
    safe = np.where(norms > 0, norms, 1.0)[:, None]
    g = (dUn - Un * (dUn * Un).sum(axis=1, keepdims=True)) / safe
    return np.where(norms[:, None] > 0, g, 0.0)


# ---------------------------------------------------------------- k-means


@dataclass
class PseudoLabels:
    assignments: np.ndarray
    centroids: np.ndarray
    inertia: float
    history: list = field(default_factory=list)

    @property
    def k(self) -> int:
        return self.centroids.shape[0]


def _sq_dists(Z, C):
    d2 = (Z * Z).sum(1)[:, None] - 2 * Z @ C.T + (C * C).sum(1)[None, :]
    return np.maximum(d2, 0.0)


def _kmeans_pp(Z, k, rng):
    n = Z.shape[0]
    centers = [Z[rng.integers(n)]]
    d2 = ((Z - centers[0]) ** 2).sum(1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=d2 / total)
        centers.append(Z[idx])
        d2 = np.minimum(d2, ((Z - Z[idx]) ** 2).sum(1))
    return np.array(centers)


def kmeans_pseudolabels(Z, k: int = 4, seed: int = 0, max_iter: int = 300, tol: float = 1e-6) -> PseudoLabels:
    """Lloyd's algorithm from k-means++ seeds; empty clusters restart at the farthest point."""
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    n = Z.shape[0]
    if k < 2 or n < k:
        raise AlignConfigError(f"k-means needs N >= k >= 2 (N={n}, k={k})")
    rng = np.random.default_rng(seed)
    C = _kmeans_pp(Z, k, rng)
    history = []
    assign = np.argmin(_sq_dists(Z, C), axis=1)
    for _ in range(max_iter):
        d2 = _sq_dists(Z, C)
        assign = np.argmin(d2, axis=1)
        history.append(float(d2[np.arange(n), assign].sum()))
        newC = C.copy()
        for c in range(k):
            members = assign == c
            if members.any():
                newC[c] = Z[members].mean(axis=0)
            else:
                far = int(np.argmax(d2[np.arange(n), assign]))
                newC[c] = Z[far]
                assign[far] = c
        shift = float(np.sqrt(((newC - C) ** 2).sum(1)).max())
        C = newC
        if shift < tol:
            break
    d2 = _sq_dists(Z, C)
    assign = np.argmin(d2, axis=1)
    inertia = float(d2[np.arange(n), assign].sum())
    history.append(inertia)
    return PseudoLabels(assign, C, inertia, history)


def assign_to_centroids(Z, pseudo: PseudoLabels) -> np.ndarray:
    """Nearest-centroid ids for new rows, e.g. target rows under source clusters."""
    return np.argmin(_sq_dists(np.atleast_2d(np.asarray(Z, dtype=np.float64)), pseudo.centroids), axis=1)


# ---------------------------------------------------------------- pairs


@dataclass
class PairSet:
    a: np.ndarray
    b: np.ndarray
    y: np.ndarray  # 0 similar, 1 dissimilar
    domain_a: str = "source"
    domain_b: str = "source"

    def __len__(self):
        return len(self.y)


def build_pairs(labels, n_pos: int, n_neg: int, seed: int = 0, labels_b=None,
                domains=("source", "source")) -> PairSet:
    """Uniformly sample same-class (y=0) and different-class (y=1) index pairs.

    With ``labels_b`` the pairs run across two index spaces (a into ``labels``,
    b into ``labels_b``); otherwise both sides index ``labels`` and self-pairs are
    excluded.
    """
    la = np.asarray(labels)
    cross = labels_b is not None
    lb = np.asarray(labels_b) if cross else la
    rng = np.random.default_rng(seed)
    classes = np.union1d(np.unique(la), np.unique(lb))
    members_a = {c: np.flatnonzero(la == c) for c in classes}
    members_b = {c: np.flatnonzero(lb == c) for c in classes}

    if cross:
        pos_w = np.array([len(members_a[c]) * len(members_b[c]) for c in classes], dtype=float)
    else:
        pos_w = np.array([len(members_a[c]) * (len(members_a[c]) - 1) for c in classes], dtype=float)
    if n_pos > 0 and pos_w.sum() == 0:
        raise SamplingError("no class has enough members to form a positive pair")
    total_pairs = la.size * lb.size
    neg_total = total_pairs - sum(len(members_a[c]) * len(members_b[c]) for c in classes)
    if n_neg > 0 and neg_total == 0:
        raise SamplingError("negative pairs need at least two classes")

    a_idx, b_idx, ys = [], [], []
    if n_pos > 0:
        cls = rng.choice(classes, size=n_pos, p=pos_w / pos_w.sum())
        for c in cls:
            ma, mb = members_a[c], members_b[c]
            i = ma[rng.integers(len(ma))]
            if cross:
                j = mb[rng.integers(len(mb))]
            else:
                j = i
                while j == i:
                    j = ma[rng.integers(len(ma))]
            a_idx.append(i)
            b_idx.append(j)
            ys.append(0)
    drawn = 0
    while drawn < n_neg:
        i = int(rng.integers(la.size))
        j = int(rng.integers(lb.size))
        if la[i] == lb[j]:
            continue
        a_idx.append(i)
        b_idx.append(j)
        ys.append(1)
        drawn += 1
    return PairSet(np.array(a_idx, dtype=int), np.array(b_idx, dtype=int),
                   np.array(ys, dtype=int), *domains)


# ---------------------------------------------------------------- InfoNCE


@dataclass(frozen=True)
class ContrastiveConfig:
    tau: float = 0.1
    delta: float = 0.8
    batch_size: int = 128
    epochs: int = 100
    lr: float = 1e-4
    seed: int = 0
    hard_negative_weight: float = 2.0

    def __post_init__(self):
        if self.tau <= 0:
            raise AlignConfigError("tau must be > 0")
        if not 0.0 < self.delta < 1.0:
            raise AlignConfigError("delta must be in (0, 1)")


def _logsumexp(v):
    mx = np.max(v)
    return mx + np.log(np.exp(v - mx).sum())


def info_nce_loss(anchor, positive, negatives, tau: float = 0.1) -> float:
    """``-log exp(s_p/tau) / (exp(s_p/tau) + sum_k exp(s_k/tau))`` with cosine s."""
    sp = cosine_similarity(anchor, positive) / tau
    sn = [cosine_similarity(anchor, n) / tau for n in negatives]
    return float(_logsumexp(np.array([sp, *sn])) - sp)


def mine_hard_negatives(anchor, candidates, delta: float = 0.8) -> list:
    """Candidates whose cosine similarity to the anchor exceeds ``delta`` (order kept)."""
    return [c for c in candidates if cosine_similarity(anchor, c) > delta]


def batch_info_nce(A, P, cls, tau, delta, hard_weight=2.0):
    """Mean InfoNCE over anchors ``A`` with positives ``P``.

    Negatives of anchor i are the positives P_k of other-cluster anchors in the
    batch; those with cosine above ``delta`` count ``hard_weight`` times in the
    denominator. Returns (loss, dA, dP).
    """
    An, na = _unit_rows(A)
    Pn, np_ = _unit_rows(P)
    S = np.clip(An @ Pn.T, -1.0, 1.0) / tau
    cls = np.asarray(cls)
    neg = cls[:, None] != cls[None, :]
    W = np.where(neg, np.where(S * tau > delta, hard_weight, 1.0), 0.0)
    np.fill_diagonal(W, 1.0)  # the positive itself
    mx = np.max(np.where(W > 0, S, -np.inf), axis=1, keepdims=True)
    E = W * np.exp(S - mx)
    Zs = E.sum(axis=1, keepdims=True)
    diag = np.diag(S)
    losses = (mx[:, 0] + np.log(Zs[:, 0])) - diag
    B = A.shape[0]
    G = E / Zs  # d logsumexp / dS
    G[np.arange(B), np.arange(B)] -= 1.0
    G /= (B * tau)
    dAn = G @ Pn
    dPn = G.T @ An
    return float(losses.mean()), _cos_backward(A, An, na, dAn), _cos_backward(P, Pn, np_, dPn)


def _contrastive_head(h, rng):
    return DenseNet.build([h, 2 * h, h], ["relu", "identity"], rng)


def _positives(cls, rng):
    """For each row, a random other row of the same cluster (itself if alone)."""
    cls = np.asarray(cls)
    out = np.empty(cls.size, dtype=int)
    for c in np.unique(cls):
        idx = np.flatnonzero(cls == c)
        if idx.size == 1:
            out[idx] = idx
            continue
        pick = rng.integers(idx.size - 1, size=idx.size)
        pos_in = np.arange(idx.size)
        pick = pick + (pick >= pos_in)
        out[idx] = idx[pick]
    return out


def contrastive_step_loss(head, Za, Zp, cls, cfg: ContrastiveConfig):
    """Loss and head-parameter gradients for one batch of anchors/positives."""
    B = Za.shape[0]
    out, cache = head.forward(np.vstack([Za, Zp]), train=True)
    loss, dA, dP = batch_info_nce(out[:B], out[B:], cls, cfg.tau, cfg.delta, cfg.hard_negative_weight)
    grads, _ = head.backward(cache, np.vstack([dA, dP]))
    return loss, grads


def info_nce_gradient_check(head, Za, Zp, cls, cfg: ContrastiveConfig = ContrastiveConfig(),
                            n_checks=50, seed=0) -> float:
    params = head.params()
    _, grads = contrastive_step_loss(head, Za, Zp, cls, cfg)

    def loss():
        B = Za.shape[0]
        out = head(np.vstack([Za, Zp]))
        return batch_info_nce(out[:B], out[B:], cls, cfg.tau, cfg.delta, cfg.hard_negative_weight)[0]

    return finite_difference_check(loss, params, grads, n_checks, 1e-5, np.random.default_rng(seed))


def train_contrastive_head(Z, pseudo, cfg: ContrastiveConfig = ContrastiveConfig()):
    """Train an h -> 2h -> h projection head; returns (head, refined unit-norm Z, loss trace)."""
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    cls = pseudo.assignments if isinstance(pseudo, PseudoLabels) else np.asarray(pseudo)
    if np.unique(cls).size < 2:
        raise AlignConfigError("contrastive training needs at least two clusters")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 41]))
    head = _contrastive_head(Z.shape[1], rng)
    opt = Adam(head.params(), cfg.lr)
    n = Z.shape[0]
    b = min(cfg.batch_size, n)

    def full_loss(r):
        pos = _positives(cls, r)
        idx = np.arange(n) if n <= 1024 else r.choice(n, 1024, replace=False)
        out = head(np.vstack([Z[idx], Z[pos[idx]]]))
        return batch_info_nce(out[:idx.size], out[idx.size:], cls[idx], cfg.tau, cfg.delta,
                              cfg.hard_negative_weight)[0]

    eval_rng_seed = np.random.SeedSequence([cfg.seed, 43])
    trace = [full_loss(np.random.default_rng(eval_rng_seed))]
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        pos = _positives(cls, rng)
        for start in range(0, n - b + 1, b):
            idx = perm[start:start + b]
            loss, grads = contrastive_step_loss(head, Z[idx], Z[pos[idx]], cls[idx], cfg)
            if not np.isfinite(loss):
                raise FloatingPointError("non-finite InfoNCE loss")
            opt.step(head.params(), grads)
        trace.append(full_loss(np.random.default_rng(eval_rng_seed)))
    refined, _ = _unit_rows(head(Z))
    return head, refined, trace


def refine(head: DenseNet, Z) -> np.ndarray:
    return _unit_rows(head(np.atleast_2d(np.asarray(Z, dtype=np.float64))))[0]


# ---------------------------------------------------------------- Siamese


BRANCH_WIDTHS = (128, 64, 32, 16)


@dataclass
class SiameseNet:
    """Learned linear adapter (h -> 128) followed by the shared 128-64-32-16 branch."""

    net: DenseNet
    margin: float = 1.0
    lr: float = 1e-3

    @classmethod
    def create(cls, input_dim: int, seed: int = 0, margin: float = 1.0, lr: float = 1e-3) -> "SiameseNet":
        rng = np.random.default_rng(seed)
        widths = [input_dim, 128, *BRANCH_WIDTHS]
        acts = ["identity", "relu", "relu", "relu", "relu"]
        bn = [False, True, True, False, False]
        return cls(DenseNet.build(widths, acts, rng, bn), margin, lr)

    @property
    def input_dim(self) -> int:
        return self.net.input_dim

    def transform(self, Z) -> np.ndarray:
        return self.net(np.atleast_2d(np.asarray(Z, dtype=np.float64)))

    def distance(self, Za, Zb) -> np.ndarray:
        """Pairwise (row-aligned) Euclidean distance; both sides go through one forward pass."""
        Za = np.atleast_2d(np.asarray(Za, dtype=np.float64))
        Zb = np.atleast_2d(np.asarray(Zb, dtype=np.float64))
        H = self.net(np.vstack([Za, Zb]))
        n = Za.shape[0]
        return np.linalg.norm(H[:n] - H[n:], axis=1)


@dataclass(frozen=True)
class SiameseConfig:
    margin: float = 1.0
    lr: float = 1e-3
    epochs: int = 30
    batch_size: int = 128
    pairs_per_setting: int = 512
    seed: int = 0

    def __post_init__(self):
        if self.margin <= 0:
            raise AlignConfigError("margin must be > 0")
        if self.lr <= 0:
            raise AlignConfigError("lr must be > 0")
        if min(self.epochs, self.batch_size, self.pairs_per_setting) < 1:
            raise AlignConfigError("epochs, batch_size and pairs_per_setting must be >= 1")


def siamese_contrastive_loss(D, y, m: float = 1.0):
    """``(1-y) D^2 / 2 + y max(0, m-D)^2 / 2`` (elementwise for arrays)."""
    D = np.asarray(D, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    out = (1 - y) * 0.5 * D ** 2 + y * 0.5 * np.maximum(0.0, m - D) ** 2
    return float(out) if out.ndim == 0 else out


def siamese_step_loss(sn: SiameseNet, Za, Zb, y, train=True):
    """Mean pair loss and gradients (shared parameters receive the sum over both branches)."""
    n = Za.shape[0]
    H, cache = sn.net.forward(np.vstack([Za, Zb]), train=train)
    diff = H[:n] - H[n:]
    D = np.linalg.norm(diff, axis=1)
    y = np.asarray(y, dtype=np.float64)
    loss = float(siamese_contrastive_loss(D, y, sn.margin).mean())
    dD = ((1 - y) * D - y * np.maximum(0.0, sn.margin - D)) / n
    unit = np.divide(diff, D[:, None], out=np.zeros_like(diff), where=D[:, None] > 0)
    dHa = dD[:, None] * unit
    grads, _ = sn.net.backward(cache, np.vstack([dHa, -dHa]))
    return loss, grads, cache


def siamese_gradient_check(sn: SiameseNet, Za, Zb, y, n_checks=50, seed=0) -> float:
    params = sn.net.params()
    _, grads, _ = siamese_step_loss(sn, Za, Zb, y)
    return finite_difference_check(lambda: siamese_step_loss(sn, Za, Zb, y)[0], params, grads,
                                   n_checks, 1e-5, np.random.default_rng(seed))


def domain_pairs(labels_s, labels_t, n_per_setting: int, seed: int) -> dict:
    """Balanced positive/negative PairSets for source, target and cross-domain settings."""
    half = n_per_setting // 2
    root = np.random.SeedSequence(seed).spawn(3)
    out = {}
    specs = {
        "source": (labels_s, None, ("source", "source")),
        "target": (labels_t, None, ("target", "target")),
        "cross": (labels_s, labels_t, ("source", "target")),
    }
    for (name, (la, lb, doms)), ss in zip(specs.items(), root):
        s = int(ss.generate_state(1)[0])
        try:
            out[name] = build_pairs(la, half, n_per_setting - half, s, lb, doms)
        except SamplingError:
            continue
    return out


def train_siamese(Z_source, Z_target, labels_source, labels_target, net: Optional[SiameseNet] = None,
                  cfg: SiameseConfig = SiameseConfig()):
    """Adam on the margin loss over fresh within- and cross-domain pairs each epoch."""
    Zs = np.atleast_2d(np.asarray(Z_source, dtype=np.float64))
    Zt = np.atleast_2d(np.asarray(Z_target, dtype=np.float64))
    if net is None:
        net = SiameseNet.create(Zs.shape[1], cfg.seed, cfg.margin, cfg.lr)
    opt = Adam(net.net.params(), net.lr)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 53]))
    pools = {"source": Zs, "target": Zt}
    trace = []
    for epoch in range(cfg.epochs):
        pairs = domain_pairs(labels_source, labels_target, cfg.pairs_per_setting,
                             int(rng.integers(2 ** 31)))
        if not pairs:
            raise SamplingError("no trainable pairs")
        A = np.vstack([pools[p.domain_a][p.a] for p in pairs.values()])
        Bm = np.vstack([pools[p.domain_b][p.b] for p in pairs.values()])
        Y = np.concatenate([p.y for p in pairs.values()])
        perm = rng.permutation(len(Y))
        bs = min(cfg.batch_size, len(Y))
        losses = []
        for start in range(0, len(Y) - bs + 1, bs):
            idx = perm[start:start + bs]
            loss, grads, cache = siamese_step_loss(net, A[idx], Bm[idx], Y[idx])
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite Siamese loss at epoch {epoch + 1}")
            opt.step(net.net.params(), grads)
            net.net.update_running_stats(cache)
            losses.append(loss)
        trace.append(float(np.mean(losses)))
    return net, trace


def transform_embeddings(net: SiameseNet, Z) -> np.ndarray:
    return net.transform(Z)


def similarity_summary(net: SiameseNet, Z_source, Z_target, pairs: dict, bins: int = 20) -> dict:
    """Cosine and distance statistics of aligned embeddings per setting and pair polarity."""
    H = {"source": net.transform(Z_source), "target": net.transform(Z_target)}
    edges = np.linspace(-1.0, 1.0, bins + 1)
    report, missing = {}, []
    for setting in ("source", "target", "cross"):
        p = pairs.get(setting)
        for polarity, yval in (("positive", 0), ("negative", 1)):
            key = f"{setting}/{polarity}"
            if p is None or not np.any(p.y == yval):
                missing.append(key)
                continue
            sel = p.y == yval
            Ha = H[p.domain_a][p.a[sel]]
            Hb = H[p.domain_b][p.b[sel]]
            cos = np.array([cosine_similarity(u, v) for u, v in zip(Ha, Hb)])
            dist = np.linalg.norm(Ha - Hb, axis=1)
            hist, _ = np.histogram(cos, bins=edges)
            report[key] = {
                "mean": float(cos.mean()),
                "std": float(cos.std()),
                "bins": hist.tolist(),
                "count": int(sel.sum()),
                "mean_distance": float(dist.mean()),
            }
    if missing:
        report["omitted"] = missing
    return report


def write_embeddings(path, blocks) -> None:
    """``blocks``: iterable of (row_ids, domain, stage, matrix). Shorter rows are right-padded."""
    blocks = list(blocks)
    width = max((np.atleast_2d(M).shape[1] for *_, M in blocks), default=0)
    lines = [",".join(["row_id", "domain", "stage"] + [f"v{i + 1}" for i in range(width)])]
    for ids, domain, stage, M in blocks:
        M = np.atleast_2d(M)
        for rid, row in zip(ids, M):
            cells = [repr(float(v)) for v in row] + [""] * (width - row.size)
            lines.append(",".join([rid, domain, stage, *cells]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def siamese_to_json(net: SiameseNet) -> dict:
    return {"version": FORMAT_VERSION, "kind": "siamese", "margin": float(net.margin).hex(),
            "lr": float(net.lr).hex(), "layers": layers_to_json(net.net)}


def siamese_from_json(obj: dict) -> SiameseNet:
    try:
        if obj["version"] != FORMAT_VERSION or obj.get("kind") != "siamese":
            raise ModelLoadError("not a version-1 Siamese model")
        return SiameseNet(layers_from_json(obj["layers"]), float.fromhex(obj["margin"]),
                          float.fromhex(obj["lr"]))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ModelLoadError):
            raise
        raise ModelLoadError(f"malformed Siamese JSON: {exc}") from exc


def head_to_json(head: DenseNet) -> dict:
    return {"version": FORMAT_VERSION, "kind": "contrastive_head", "layers": layers_to_json(head)}
