"""Attention-based autoencoder (AAE), its uniform-attention baseline, and transfer fine-tuning."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..data import ProcessEventMatrix, SchemaError
from .core import Adam, DenseNet, batches, finite_difference_check

log = logging.getLogger(__name__)

VARIANTS = ("AAE", "AE")


class TrainingDivergence(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 128
    epochs: int = 100
    seed: int = 0
    validation_fraction: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must be in [0, 1)")


@dataclass
class LossTrace:
    train: list = field(default_factory=list)
    validation: list = field(default_factory=list)
    initial_train: float = float("nan")
    initial_validation: float = float("nan")


def default_latent_dim(d: int) -> int:
    return min(d, max(8, d // 4))


def softmax_rows(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class AttentionAutoencoder:
    """Softmax feature attention in front of a dense encoder/decoder.

    Attention logits are ``w_att * x`` (one learnable weight per feature); the
    encoder sees ``d * alpha * x`` so that uniform attention is the identity map.
    The ``AE`` variant pins alpha to 1/d and carries no attention parameters.
    """

    att_weights: np.ndarray
    encoder: DenseNet
    decoder: DenseNet
    lambda_reg: float = 0.01
    variant: str = "AAE"
    train_attention: bool = True

    @classmethod
    def create(cls, d: int, h: Optional[int] = None, variant: str = "AAE",
               lambda_reg: float = 0.01, seed: int = 0) -> "AttentionAutoencoder":
        if variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        h = default_latent_dim(d) if h is None else int(h)
        if not 1 <= h <= d:
            raise ValueError("latent dim must satisfy 1 <= h <= d")
        rng = np.random.default_rng(seed)
        enc = DenseNet.build([d, 2 * h, h], ["relu", "identity"], rng)
        dec = DenseNet.build([h, 2 * h, d], ["relu", "sigmoid"], rng)
        lam = lambda_reg if variant == "AAE" else 0.0
        return cls(np.zeros(d), enc, dec, lam, variant, variant == "AAE")

    @property
    def d(self) -> int:
        return self.encoder.input_dim

    @property
    def h(self) -> int:
        return self.encoder.output_dim

    def params(self) -> list:
        head = [self.att_weights] if self.variant == "AAE" and self.train_attention else []
        return head + self.encoder.params() + self.decoder.params()

    def copy(self) -> "AttentionAutoencoder":
        return AttentionAutoencoder(self.att_weights.copy(), self.encoder.copy(), self.decoder.copy(),
                                    self.lambda_reg, self.variant, self.train_attention)

    def attention(self, X):
        X = np.atleast_2d(X)
        if self.variant == "AE":
            return np.full(X.shape, 1.0 / X.shape[1])
        return softmax_rows(X * self.att_weights)

    def forward(self, X, train=False, dropout=0.0, rng=None):
        X = np.asarray(X, dtype=np.float64)
        alpha = self.attention(X)
        x_att = (self.d * alpha) * X
        z, enc_cache = self.encoder.forward(x_att, train, dropout, rng)
        xhat, dec_cache = self.decoder.forward(z, train, dropout, rng)
        return xhat, {"X": X, "alpha": alpha, "z": z, "enc": enc_cache, "dec": dec_cache}

    def loss_and_grads(self, X, recon_scale=1.0, penalty_scale=1.0, train=False,
                       dropout=0.0, rng=None, need_grads=True):
        """Weighted objective ``recon_scale*sum||x-xhat||^2 + penalty_scale*lam*sum(alpha-1/d)^2``.

        Returns (loss, grads aligned with :meth:`params`).
        """
        xhat, c = self.forward(X, train, dropout, rng)
        X, alpha = c["X"], c["alpha"]
        d = self.d
        diff = xhat - X
        dev = alpha - 1.0 / d
        loss = recon_scale * float((diff * diff).sum()) + penalty_scale * self.lambda_reg * float((dev * dev).sum())
        if not need_grads:
            return loss, None
        g_dec, dz = self.decoder.backward(c["dec"], 2.0 * recon_scale * diff)
        g_enc, dxatt = self.encoder.backward(c["enc"], dz)
        grads = g_enc + g_dec
        if self.variant == "AAE" and self.train_attention:
            dalpha = dxatt * d * X + 2.0 * penalty_scale * self.lambda_reg * dev
            dlogits = alpha * (dalpha - (dalpha * alpha).sum(axis=1, keepdims=True))
            grads = [(dlogits * X).sum(axis=0)] + grads
        return loss, grads

    def mean_loss(self, X) -> float:
        """Per-row training objective: MSE over features plus lambda * attention deviation."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        n = X.shape[0]
        if n == 0:
            return float("nan")
        loss, _ = self.loss_and_grads(X, 1.0 / (n * self.d), 1.0 / n, need_grads=False)
        return loss


def _as_array(m) -> np.ndarray:
    if isinstance(m, ProcessEventMatrix):
        return m.X()
    return np.atleast_2d(np.asarray(m, dtype=np.float64))


def attention_weights(aae: AttentionAutoencoder, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != aae.d:
        raise SchemaError(f"expected {aae.d} features, got {x.shape[-1]}")
    return aae.attention(x.reshape(1, -1))[0]


def _check_finite(loss, epoch, last_ok):
    if not np.isfinite(loss):
        raise TrainingDivergence(
            f"non-finite loss at epoch {epoch}; last finite epoch: {last_ok}"
        )


def _split_validation(n, frac, rng):
    n_val = int(round(frac * n)) if n >= 10 else 0
    perm = rng.permutation(n)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def _run_epochs(model, cfg, steps, eval_fn, dropout, rng):
    """Shared Adam loop. ``steps(rng)`` yields per-batch (recon_scale, penalty_scale, X) lists."""
    opt = Adam(model.params(), cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    trace = LossTrace()
    trace.initial_train, trace.initial_validation = eval_fn()
    last_ok = 0
    for epoch in range(1, cfg.epochs + 1):
        for parts in steps(rng):
            total_grads = None
            for recon_scale, penalty_scale, Xb in parts:
                loss, grads = model.loss_and_grads(Xb, recon_scale, penalty_scale, True, dropout, rng)
                _check_finite(loss, epoch, last_ok)
                if total_grads is None:
                    total_grads = grads
                else:
                    total_grads = [a + b for a, b in zip(total_grads, grads)]
            opt.step(model.params(), total_grads)
        tr, va = eval_fn()
        _check_finite(tr, epoch, last_ok)
        trace.train.append(tr)
        trace.validation.append(va)
        last_ok = epoch
    return trace


def train_autoencoder(m, variant: str = "AAE", h: Optional[int] = None,
                      cfg: TrainConfig = TrainConfig(), lambda_reg: float = 0.01,
                      dropout: float = 0.0, train_attention: bool = True):
    """Mini-batch Adam on the AAE objective; returns (model, LossTrace)."""
    X = _as_array(m)
    n, d = X.shape
    if n == 0:
        raise ValueError("cannot train on an empty matrix")
    model = AttentionAutoencoder.create(d, h, variant, lambda_reg, cfg.seed)
    model.train_attention = train_attention and variant == "AAE"
    return _train_model(model, X, cfg, dropout)


def _train_model(model, X, cfg, dropout=0.0):
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 17]))
    tr_idx, va_idx = _split_validation(X.shape[0], cfg.validation_fraction, rng)
    Xtr, Xva = X[tr_idx], X[va_idx]
    b, d = cfg.batch_size, model.d

    def steps(r):
        for idx in batches(len(Xtr), b, r):
            yield [(1.0 / (b * d), 1.0 / b, Xtr[idx])]

    def eval_fn():
        tr = model.mean_loss(Xtr)
        return tr, (model.mean_loss(Xva) if len(Xva) else tr)

    trace = _run_epochs(model, cfg, steps, eval_fn, dropout, rng)
    return model, trace


def continue_training(model: AttentionAutoencoder, m, cfg: TrainConfig, dropout: float = 0.0):
    """Further Adam epochs on ``m`` starting from a copy of ``model``."""
    return _train_model(model.copy(), _as_array(m), cfg, dropout)


def fine_tune_transfer(model: AttentionAutoencoder, source, target, lambda_src: float = 1.0,
                       cfg: TrainConfig = TrainConfig(), dropout: float = 0.0):
    """Continue training on ``L_target + lambda_src * L_source``.

    Each step pairs a target batch with a source batch (source batches cycle);
    the returned LossTrace records the joint per-row objective.
    """
    if lambda_src < 0:
        raise ValueError("lambda_src must be >= 0")
    Xs, Xt = _as_array(source), _as_array(target)
    for X, what in ((Xs, "source"), (Xt, "target")):
        if X.shape[1] != model.d:
            raise SchemaError(f"{what} has {X.shape[1]} features, model expects {model.d}")
    model = model.copy()
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 29]))
    t_tr, t_va = _split_validation(len(Xt), cfg.validation_fraction, rng)
    Xt_tr, Xt_va = Xt[t_tr], Xt[t_va]
    b, d = cfg.batch_size, model.d

    def steps(r):
        src_iter = iter(())
        for idx in batches(len(Xt_tr), b, r):
            parts = [(1.0 / (b * d), 1.0 / b, Xt_tr[idx])]
            if lambda_src > 0:
                s_idx = next(src_iter, None)
                if s_idx is None:
                    src_iter = batches(len(Xs), b, r)
                    s_idx = next(src_iter)
                parts.append((lambda_src / (b * d), lambda_src / b, Xs[s_idx]))
            yield parts

    def joint(Xtarget):
        loss = model.mean_loss(Xtarget)
        if lambda_src > 0:
            loss += lambda_src * model.mean_loss(Xs)
        return loss

    def eval_fn():
        tr = joint(Xt_tr)
        return tr, (joint(Xt_va) if len(Xt_va) else tr)

    trace = _run_epochs(model, cfg, steps, eval_fn, dropout, rng)
    return model, trace


def encode(model: AttentionAutoencoder, m) -> np.ndarray:
    X = _as_array(m)
    if X.size == 0:
        return np.zeros((0, model.h))
    if X.shape[1] != model.d:
        raise SchemaError(f"expected {model.d} features, got {X.shape[1]}")
    alpha = model.attention(X)
    return model.encoder((model.d * alpha) * X)


def reconstruct(model: AttentionAutoencoder, m) -> np.ndarray:
    X = _as_array(m)
    if X.shape[1] != model.d:
        raise SchemaError(f"expected {model.d} features, got {X.shape[1]}")
    return model.forward(X)[0]


def reconstruction_errors(model: AttentionAutoencoder, m) -> np.ndarray:
    X = _as_array(m)
    if X.size == 0:
        return np.zeros(0)
    return np.linalg.norm(X - reconstruct(model, X), axis=1)


def gradient_check(model: AttentionAutoencoder, batch, n_checks: int = 50, step: float = 1e-5,
                   seed: int = 0) -> float:
    """Max relative error of the analytic gradient of the summed AAE loss vs central differences."""
    X = _as_array(batch)
    params = model.params()
    _, grads = model.loss_and_grads(X)
    return finite_difference_check(lambda: model.loss_and_grads(X, need_grads=False)[0],
                                   params, grads, n_checks, step, np.random.default_rng(seed))


def transfer_gradient_check(model: AttentionAutoencoder, target_batch, source_batch,
                            lambda_src: float = 1.0, n_checks: int = 50, step: float = 1e-5,
                            seed: int = 0) -> float:
    """Same check for the joint objective ``L(target) + lambda_src * L(source)``."""
    Xt, Xs = _as_array(target_batch), _as_array(source_batch)
    params = model.params()

    def full(need):
        lt, gt = model.loss_and_grads(Xt, need_grads=need)
        ls, gs = model.loss_and_grads(Xs, lambda_src, lambda_src, need_grads=need)
        grads = [a + b for a, b in zip(gt, gs)] if need else None
        return lt + ls, grads

    _, grads = full(True)
    return finite_difference_check(lambda: full(False)[0], params, grads, n_checks, step,
                                   np.random.default_rng(seed))
