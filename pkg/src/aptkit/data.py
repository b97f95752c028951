"""Boolean process x event matrices: data model, CSV I/O and a synthetic generator."""

from __future__ import annotations

import re
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

LABEL_COLUMN = "label"
ID_COLUMN = "process_id"
OS_TAGS = ("BSD", "Windows", "Linux", "Android", "Synthetic")
ASPECTS = ("PE", "PX", "PP", "PN", "PA")

_NAME_RE = re.compile(r"^[A-Za-z0-9_./:-]+$")


class SchemaError(ValueError):
    """Column sets or dimensions do not line up."""


class MatrixParseError(ValueError):
    def __init__(self, msg: str, row: int | None = None, col: str | None = None):
        super().__init__(msg)
        self.row = row
        self.col = col


@dataclass(frozen=True, eq=False)
class ProcessEventMatrix:
    row_ids: tuple
    col_names: tuple
    values: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 2:
            values = values.reshape(len(self.row_ids), len(self.col_names))
        values = values.astype(np.uint8, copy=True)
        object.__setattr__(self, "row_ids", tuple(str(r) for r in self.row_ids))
        object.__setattr__(self, "col_names", tuple(str(c) for c in self.col_names))
        if values.shape != (len(self.row_ids), len(self.col_names)):
            raise SchemaError(
                f"values shape {values.shape} does not match "
                f"{len(self.row_ids)} ids x {len(self.col_names)} columns"
            )
        if values.size and values.max() > 1:
            raise SchemaError("values must be 0/1")
        if len(set(self.col_names)) != len(self.col_names):
            raise SchemaError("duplicate column names")
        if len(set(self.row_ids)) != len(self.row_ids):
            raise SchemaError("duplicate row ids")
        if LABEL_COLUMN in self.col_names or ID_COLUMN in self.col_names:
            raise SchemaError("reserved column name used as an event column")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        if self.labels is not None:
            labels = np.asarray(self.labels).astype(np.uint8, copy=True).reshape(-1)
            if labels.shape[0] != values.shape[0]:
                raise SchemaError("labels length differs from row count")
            if labels.size and labels.max() > 1:
                raise SchemaError("labels must be 0/1")
            labels.setflags(write=False)
            object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]

    def X(self) -> np.ndarray:
        """Float64 copy of the values, the form every model consumes."""
        return self.values.astype(np.float64)

    def subset_rows(self, idx) -> "ProcessEventMatrix":
        idx = np.asarray(idx, dtype=int)
        return ProcessEventMatrix(
            row_ids=[self.row_ids[i] for i in idx],
            col_names=self.col_names,
            values=self.values[idx],
            labels=None if self.labels is None else self.labels[idx],
        )

    def subset_cols(self, idx) -> "ProcessEventMatrix":
        idx = np.asarray(idx, dtype=int)
        return ProcessEventMatrix(
            row_ids=self.row_ids,
            col_names=[self.col_names[j] for j in idx],
            values=self.values[:, idx],
            labels=self.labels,
        )

    def __eq__(self, other):
        if not isinstance(other, ProcessEventMatrix):
            return NotImplemented
        if (self.labels is None) != (other.labels is None):
            return False
        return (
            self.row_ids == other.row_ids
            and self.col_names == other.col_names
            and np.array_equal(self.values, other.values)
            and (self.labels is None or np.array_equal(self.labels, other.labels))
        )

    __hash__ = None


@dataclass(frozen=True)
class DatasetMeta:
    os_tag: str = "Synthetic"
    scenario: int = 1
    aspect: str = "PE"

    def __post_init__(self):
        if self.os_tag not in OS_TAGS:
            raise ValueError(f"os_tag must be one of {OS_TAGS}")
        if not 1 <= int(self.scenario) <= 6:
            raise ValueError("scenario must be in [1, 6]")
        if self.aspect not in ASPECTS:
            raise ValueError(f"aspect must be one of {ASPECTS}")


@dataclass(frozen=True)
class SynthConfig:
    """Synthetic generator settings.

    ``domain``, ``shift``, ``n_nuisance`` and ``nuisance_p`` let two calls with the
    same seed produce a source/target pair: both share cluster prototypes and the
    anomaly mechanism, the target perturbs prototype probabilities by ``shift`` and
    turns the trailing ``n_nuisance`` columns into independent noise (they are all
    zero in the source domain).
    """

    n_benign: int = 1000
    n_anomalies: int = 10
    d: int = 30
    n_clusters: int = 4
    anomaly_rarity: float = 0.7
    seed: int = 0
    domain: str = "source"
    shift: float = 0.0
    n_nuisance: int = 0
    nuisance_p: tuple = (0.1, 0.3)
    scenario: int = 1

    def __post_init__(self):
        if self.n_benign < 1 or self.n_anomalies < 0:
            raise ValueError("n_benign must be >= 1 and n_anomalies >= 0")
        if self.n_anomalies / self.n_benign > 0.05:
            raise ValueError("n_anomalies / n_benign must be <= 0.05")
        if self.d < 4:
            raise ValueError("d must be >= 4")
        if self.n_clusters < 1:
            raise ValueError("n_clusters must be >= 1")
        if not 0.0 < self.anomaly_rarity < 1.0:
            raise ValueError("anomaly_rarity must be in (0, 1)")
        if self.domain not in ("source", "target"):
            raise ValueError("domain must be 'source' or 'target'")
        if not 0 <= self.n_nuisance <= self.d - 4:
            raise ValueError("n_nuisance must leave at least 4 core features")
        if not 0.0 <= self.shift <= 1.0:
            raise ValueError("shift must be in [0, 1]")


# ---------------------------------------------------------------- CSV I/O


def _check_name(name: str, what: str) -> None:
    if not _NAME_RE.match(name):
        raise MatrixParseError(f"{what} {name!r} contains characters outside [A-Za-z0-9_./:-]")


def load_matrix(path) -> ProcessEventMatrix:
    path = Path(path)
    with open(path, "r", encoding="utf-8", newline="") as fh:
        text = fh.read()
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or not lines[0].strip():
        raise MatrixParseError(f"{path}: missing header row")
    header = [h.strip() for h in lines[0].rstrip("\r").split(",")]
    if header[0] != ID_COLUMN:
        raise MatrixParseError(f"{path}: first column must be {ID_COLUMN!r}, got {header[0]!r}")
    has_label = header[-1] == LABEL_COLUMN
    cols = header[1:-1] if has_label else header[1:]
    if LABEL_COLUMN in cols:
        raise MatrixParseError(f"{path}: {LABEL_COLUMN!r} must be the last column")
    for c in cols:
        _check_name(c, "column")
    if len(set(cols)) != len(cols):
        raise SchemaError(f"{path}: duplicate column names")

    ids, rows, labels = [], [], []
    width = len(header)
    for lineno, line in enumerate(lines[1:], start=1):
        cells = line.rstrip("\r").split(",")
        if len(cells) != width:
            raise MatrixParseError(
                f"{path}: row {lineno} has {len(cells)} cells, expected {width}", row=lineno
            )
        ids.append(cells[0].strip())
        body = cells[1:-1] if has_label else cells[1:]
        row = []
        for name, cell in zip(cols, body):
            cell = cell.strip()
            if cell not in ("0", "1"):
                raise MatrixParseError(
                    f"{path}: row {lineno}, column {name!r}: {cell!r} is not 0/1",
                    row=lineno,
                    col=name,
                )
            row.append(cell == "1")
        rows.append(row)
        if has_label:
            cell = cells[-1].strip()
            if cell not in ("0", "1"):
                raise MatrixParseError(
                    f"{path}: row {lineno}, column 'label': {cell!r} is not 0/1",
                    row=lineno,
                    col=LABEL_COLUMN,
                )
            labels.append(cell == "1")
    if len(set(ids)) != len(ids):
        raise SchemaError(f"{path}: duplicate process ids")
    values = np.array(rows, dtype=np.uint8).reshape(len(ids), len(cols))
    return ProcessEventMatrix(ids, cols, values, np.array(labels, dtype=np.uint8) if has_label else None)


def matrix_to_csv(m: ProcessEventMatrix) -> str:
    header = [ID_COLUMN, *m.col_names]
    if m.labels is not None:
        header.append(LABEL_COLUMN)
    out = [",".join(header)]
    digits = np.where(m.values == 1, "1", "0")
    for i, rid in enumerate(m.row_ids):
        cells = [rid, *digits[i]]
        if m.labels is not None:
            cells.append(str(int(m.labels[i])))
        out.append(",".join(cells))
    return "\n".join(out) + "\n"


def save_matrix(m: ProcessEventMatrix, path) -> None:
    for c in m.col_names:
        _check_name(c, "column")
    for r in m.row_ids:
        _check_name(r, "row id")
    # binary mode keeps LF endings on every platform
    with open(Path(path), "wb") as fh:
        fh.write(matrix_to_csv(m).encode("utf-8"))


# ---------------------------------------------------------------- generator


def _prototypes(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    """Per-cluster activation probabilities over the core features."""
    d_core = cfg.d - cfg.n_nuisance
    on = rng.random((cfg.n_clusters, d_core)) < 0.35
    hi = rng.uniform(0.6, 0.95, size=on.shape)
    lo = rng.uniform(0.0, 0.08, size=on.shape)
    return np.where(on, hi, lo)


def _shift_prototypes(protos: np.ndarray, shift: float, rng: np.random.Generator) -> np.ndarray:
    if shift <= 0:
        return protos
    moved = rng.random(protos.shape) < shift
    fresh = np.where(rng.random(protos.shape) < 0.35,
                     rng.uniform(0.6, 0.95, protos.shape),
                     rng.uniform(0.0, 0.08, protos.shape))
    # globally rare features stay rare so the anomaly mechanism is shared
    rare = protos.max(axis=0) < 0.1
    moved &= ~rare[None, :]
    return np.where(moved, fresh, protos)


def generate_synthetic(cfg: SynthConfig) -> tuple[ProcessEventMatrix, DatasetMeta]:
    """Draw a severely imbalanced boolean matrix with planted APT-like rows.

    Benign rows are Bernoulli draws from one of ``n_clusters`` prototypes.
    Anomalies start from a prototype draw, switch on each globally rare feature
    (expected frequency below the 10th percentile) with probability
    ``anomaly_rarity`` -- at least one is always switched on -- and switch off one
    active common feature.
    """
    shared = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0]))
    protos = _prototypes(cfg, shared)
    weights = shared.dirichlet(np.full(cfg.n_clusters, 5.0))
    # shift randomness is drawn even for the source so both domains consume the
    # shared stream identically
    shift_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    domain_id = 0 if cfg.domain == "source" else 1
    if domain_id == 1:
        protos = _shift_prototypes(protos, cfg.shift, shift_rng)
        weights = shift_rng.dirichlet(np.full(cfg.n_clusters, 5.0))
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2, domain_id]))

    freq = weights @ protos
    rare = np.flatnonzero(freq < np.percentile(freq, 10))
    if rare.size == 0:
        rare = np.array([int(np.argmin(freq))])
    common_order = np.argsort(-freq, kind="stable")
    common = common_order[: max(1, len(common_order) // 2)]

    n = cfg.n_benign + cfg.n_anomalies
    cluster = rng.choice(cfg.n_clusters, size=n, p=weights)
    core = (rng.random((n, protos.shape[1])) < protos[cluster]).astype(np.uint8)
    labels = np.zeros(n, dtype=np.uint8)
    anomaly_rows = rng.choice(n, size=cfg.n_anomalies, replace=False)
    anomaly_rows.sort()
    for i in anomaly_rows:
        fire = rng.random(rare.size) < cfg.anomaly_rarity
        if not fire.any():
            fire[rng.integers(rare.size)] = True
        core[i, rare[fire]] = 1
        active_common = [j for j in common if core[i, j] == 1]
        if active_common:
            core[i, active_common[rng.integers(len(active_common))]] = 0
        labels[i] = 1

    if cfg.n_nuisance:
        nuis = np.zeros((n, cfg.n_nuisance), dtype=np.uint8)
        if domain_id == 1:
            lo, hi = cfg.nuisance_p
            p = shift_rng.uniform(lo, hi, size=cfg.n_nuisance)
            nuis = (rng.random((n, cfg.n_nuisance)) < p).astype(np.uint8)
        values = np.hstack([core, nuis])
    else:
        values = core

    width = len(str(n))
    tag = "s" if domain_id == 0 else "t"
    ids = [f"{tag}{cfg.seed}_p{i:0{width}d}" for i in range(n)]
    cols = [f"event_{j:03d}" for j in range(cfg.d)]
    meta = DatasetMeta(os_tag="Synthetic", scenario=cfg.scenario, aspect="PE")
    return ProcessEventMatrix(ids, cols, values, labels), meta


# ---------------------------------------------------------------- splits


def train_test_views(m: ProcessEventMatrix, frac: float, seed: int = 0, stratify: bool = True):
    """Row-disjoint (train, test) split; ``frac`` is the train share."""
    if not 0.0 < frac < 1.0:
        raise ValueError("frac must be in (0, 1)")
    if m.n < 2:
        raise ValueError("need at least two rows to split")
    rng = np.random.default_rng(seed)
    n_train = int(round(frac * m.n))
    n_train = min(max(n_train, 1), m.n - 1)
    if n_train != int(round(frac * m.n)):
        warnings.warn(f"split of {m.n} rows at frac={frac} clamped to {n_train}/{m.n - n_train}")

    labels = m.labels
    if stratify and labels is not None and int(labels.sum()) >= 2:
        pos = np.flatnonzero(labels == 1)
        neg = np.flatnonzero(labels == 0)
        rng.shuffle(pos)
        rng.shuffle(neg)
        n_pos_train = int(round(frac * pos.size))
        n_pos_train = min(max(n_pos_train, 0), n_train)
        n_neg_train = n_train - n_pos_train
        if n_neg_train > neg.size:
            n_neg_train = neg.size
            n_pos_train = n_train - n_neg_train
        train = np.concatenate([pos[:n_pos_train], neg[:n_neg_train]])
        test = np.concatenate([pos[n_pos_train:], neg[n_neg_train:]])
    else:
        if stratify and labels is not None:
            warnings.warn("fewer than 2 anomalies: falling back to a plain shuffle split")
        perm = rng.permutation(m.n)
        train, test = perm[:n_train], perm[n_train:]
    return m.subset_rows(np.sort(train)), m.subset_rows(np.sort(test))


def concat_rows(mats: Sequence[ProcessEventMatrix]) -> ProcessEventMatrix:
    cols = mats[0].col_names
    for m in mats[1:]:
        if m.col_names != cols:
            raise SchemaError("matrices have different columns")
    has_labels = all(m.labels is not None for m in mats)
    return ProcessEventMatrix(
        row_ids=[r for m in mats for r in m.row_ids],
        col_names=cols,
        values=np.vstack([m.values for m in mats]),
        labels=np.concatenate([m.labels for m in mats]) if has_labels else None,
    )
