"""Synthetic attack scenarios from a VAE or a conditional GAN trained on a real one.

Scenarios 3-6 are derived from the two real scenarios with a fixed mapping:
3 = CGAN on 1, 4 = CGAN on 2, 5 = VAE on 1, 6 = VAE on 2.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .data import ProcessEventMatrix, SchemaError
from .nn.core import Adam, DenseNet, batches, sigmoid
from .nn.io import FORMAT_VERSION, ModelLoadError, layers_from_json, layers_to_json

GENERATOR_KINDS = ("VAE", "CGAN")


class GeneratorConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ScenarioSpec:
    target_scenario: int
    source_scenario: int
    kind: str


SCENARIO_SPECS = {
    3: ScenarioSpec(3, 1, "CGAN"),
    4: ScenarioSpec(4, 2, "CGAN"),
    5: ScenarioSpec(5, 1, "VAE"),
    6: ScenarioSpec(6, 2, "VAE"),
}


@dataclass(frozen=True)
class AugmentConfig:
    latent_dim: int = 8
    epochs: int = 200
    learning_rate: float = 3e-3
    batch_size: int = 64
    seed: int = 0
    n_samples: Optional[int] = None  # None -> size of the training matrix

    def __post_init__(self):
        if self.latent_dim < 2:
            raise GeneratorConfigError("latent_dim must be >= 2")
        if self.epochs < 1 or self.batch_size < 1:
            raise GeneratorConfigError("epochs and batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise GeneratorConfigError("learning_rate must be > 0")


@dataclass
class GeneratorModel:
    kind: str
    networks: dict  # VAE: encoder, decoder; CGAN: generator, discriminator
    latent_dim: int
    class_conditioning: bool
    col_names: list
    class_ratio: float = 0.0
    trace: list = field(default_factory=list)  # VAE: loss per epoch; CGAN: (d_loss, g_loss)

    @property
    def d(self) -> int:
        return len(self.col_names)


def _hidden(d: int) -> int:
    return max(16, d)


def _bce_logits(logits, target):
    # log(1 + e^z) - t z, stable for large |z|
    return np.logaddexp(0.0, logits) - target * logits


def _with_label(X, y, on: bool):
    return np.hstack([X, y[:, None]]) if on else X


# ------------------------------------------------------------------ VAE


def _vae_step(enc, dec, xb, yb, cond, L, rng):
    """Mean negative ELBO over the batch and its gradients (encoder + decoder params)."""
    B = xb.shape[0]
    h, enc_cache = enc.forward(_with_label(xb, yb, cond), train=True)
    mu, logvar = h[:, :L], np.clip(h[:, L:], -20.0, 20.0)
    std = np.exp(0.5 * logvar)
    eps = rng.standard_normal(mu.shape)
    z = mu + std * eps
    logits, dec_cache = dec.forward(_with_label(z, yb, cond), train=True)
    rec = _bce_logits(logits, xb).sum()
    kl = -0.5 * (1.0 + logvar - mu ** 2 - np.exp(logvar)).sum()
    loss = (rec + kl) / B
    dlogits = (sigmoid(logits) - xb) / B
    dgrads, dzin = dec.backward(dec_cache, dlogits)
    dz = dzin[:, :L]
    dmu = dz + mu / B
    dlogvar = dz * eps * 0.5 * std + 0.5 * (np.exp(logvar) - 1.0) / B
    egrads, _ = enc.backward(enc_cache, np.hstack([dmu, dlogvar]))
    return loss, egrads + dgrads


def _train_vae(X, y, cfg: AugmentConfig, cond: bool):
    d, L, H = X.shape[1], cfg.latent_dim, _hidden(X.shape[1])
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 61]))
    extra = 1 if cond else 0
    enc = DenseNet.build([d + extra, H, H, 2 * L], ["relu", "relu", "identity"], rng)
    dec = DenseNet.build([L + extra, H, H, d], ["relu", "relu", "identity"], rng)
    params = enc.params() + dec.params()
    opt = Adam(params, cfg.learning_rate)
    eval_rng_seed = np.random.SeedSequence([cfg.seed, 67])

    def full_loss():
        return _vae_step(enc, dec, X, y, cond, L, np.random.default_rng(eval_rng_seed))[0]

    trace = [full_loss()]
    bs = min(cfg.batch_size, X.shape[0])
    for epoch in range(cfg.epochs):
        for idx in batches(X.shape[0], bs, rng):
            loss, grads = _vae_step(enc, dec, X[idx], y[idx], cond, L, rng)
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite VAE loss at epoch {epoch + 1}")
            opt.step(params, grads)
        trace.append(full_loss())
    return {"encoder": enc, "decoder": dec}, trace


# ------------------------------------------------------------------ CGAN


def _train_cgan(X, y, cfg: AugmentConfig):
    d, L, H = X.shape[1], cfg.latent_dim, _hidden(X.shape[1])
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 71]))
    G = DenseNet.build([L + 1, H, H, d], ["relu", "relu", "identity"], rng)
    D = DenseNet.build([d + 1, H, H, 1], ["relu", "relu", "identity"], rng)
    g_opt = Adam(G.params(), cfg.learning_rate, beta1=0.5)
    d_opt = Adam(D.params(), cfg.learning_rate, beta1=0.5)
    bs = min(cfg.batch_size, X.shape[0])
    trace = []
    for epoch in range(cfg.epochs):
        d_losses, g_losses = [], []
        for idx in batches(X.shape[0], bs, rng):
            xb, yb = X[idx], y[idx]
            B = len(idx)
            # discriminator: real -> 1, fake -> 0
            z = rng.standard_normal((B, L))
            fake = sigmoid(G(np.hstack([z, yb[:, None]])))
            inp = np.vstack([np.hstack([xb, yb[:, None]]), np.hstack([fake, yb[:, None]])])
            t = np.concatenate([np.ones(B), np.zeros(B)])[:, None]
            logit, cache = D.forward(inp, train=True)
            d_loss = _bce_logits(logit, t).sum() / B
            dgrads, _ = D.backward(cache, (sigmoid(logit) - t) / B)
            d_opt.step(D.params(), dgrads)
            # generator: non-saturating loss, fake -> 1
            z = rng.standard_normal((B, L))
            g_logits, g_cache = G.forward(np.hstack([z, yb[:, None]]), train=True)
            fake = sigmoid(g_logits)
            logit, cache = D.forward(np.hstack([fake, yb[:, None]]), train=True)
            g_loss = _bce_logits(logit, 1.0).sum() / B
            _, dinp = D.backward(cache, (sigmoid(logit) - 1.0) / B)
            dfake = dinp[:, :d] * fake * (1.0 - fake)
            ggrads, _ = G.backward(g_cache, dfake)
            g_opt.step(G.params(), ggrads)
            if not (np.isfinite(d_loss) and np.isfinite(g_loss)):
                raise FloatingPointError(f"non-finite CGAN loss at epoch {epoch + 1}")
            d_losses.append(d_loss)
            g_losses.append(g_loss)
        trace.append((float(np.mean(d_losses)), float(np.mean(g_losses))))
    return {"generator": G, "discriminator": D}, trace


# ------------------------------------------------------------------ public API


def train_generator(kind: str, m: ProcessEventMatrix, cfg: AugmentConfig = AugmentConfig()) -> GeneratorModel:
    """Fit a VAE or CGAN on ``m``.

    The VAE conditions on the label bit too whenever ``m`` carries both classes,
    so sampled anomalies keep their own structure; otherwise it is unconditional.
    """
    if kind not in GENERATOR_KINDS:
        raise GeneratorConfigError(f"unknown generator kind {kind!r}")
    if m.n < 50:
        raise GeneratorConfigError("generator training needs at least 50 rows")
    X = m.X()
    both = m.labels is not None and 0 < int(m.labels.sum()) < m.n
    y = m.labels.astype(np.float64) if m.labels is not None else np.zeros(m.n)
    ratio = float(y.mean())
    if kind == "CGAN":
        if not both:
            raise GeneratorConfigError("CGAN needs labels with both classes present")
        nets, trace = _train_cgan(X, y, cfg)
        return GeneratorModel("CGAN", nets, cfg.latent_dim, True, list(m.col_names), ratio, trace)
    nets, trace = _train_vae(X, y, cfg, both)
    return GeneratorModel("VAE", nets, cfg.latent_dim, both, list(m.col_names), ratio, trace)


def generator_probabilities(g: GeneratorModel, z, labels) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.float64)
    net = g.networks["generator" if g.kind == "CGAN" else "decoder"]
    return sigmoid(net(_with_label(np.asarray(z, dtype=np.float64), labels, g.class_conditioning)))


def binarize(p) -> np.ndarray:
    """Threshold at 0.5; exactly 0.5 becomes 1."""
    return (np.asarray(p) >= 0.5).astype(np.uint8)


def sample_generator(g: GeneratorModel, n: int, class_bit: Union[int, str] = "mixture", seed: int = 0,
                     id_prefix: str = "g") -> ProcessEventMatrix:
    """Draw ``n`` binary rows; ``class_bit`` is 0, 1 or ``"mixture"`` (training class ratio)."""
    if n < 1:
        raise GeneratorConfigError("n must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 79]))
    if class_bit == "mixture":
        labels = np.zeros(n, dtype=np.uint8)
        n_pos = int(round(g.class_ratio * n))
        labels[rng.choice(n, size=n_pos, replace=False)] = 1
    elif class_bit in (0, 1):
        labels = np.full(n, class_bit, dtype=np.uint8)
    else:
        raise GeneratorConfigError("class_bit must be 0, 1 or 'mixture'")
    z = rng.standard_normal((n, g.latent_dim))
    values = binarize(generator_probabilities(g, z, labels))
    width = len(str(n))
    ids = [f"{id_prefix}_p{i:0{width}d}" for i in range(n)]
    return ProcessEventMatrix(ids, list(g.col_names), values, labels)


def derive_scenarios(s1: ProcessEventMatrix, s2: ProcessEventMatrix,
                     cfg: AugmentConfig = AugmentConfig(), return_models: bool = False):
    """Scenarios 3-6 keyed by number; see ``SCENARIO_SPECS`` for the kind/source pairing.

    With ``return_models`` the trained generators come back as a second dict.
    """
    if s1.col_names != s2.col_names:
        raise SchemaError("scenario 1 and 2 have different columns")
    sources = {1: s1, 2: s2}
    out, models = {}, {}
    for num, spec in SCENARIO_SPECS.items():
        src = sources[spec.source_scenario]
        g = train_generator(spec.kind, src, cfg)
        n = cfg.n_samples or src.n
        out[num] = sample_generator(g, n, "mixture", cfg.seed + num, id_prefix=f"sc{num}")
        models[num] = g
    return (out, models) if return_models else out


def marginal_l1(a, b) -> float:
    """Mean absolute difference of per-column activation frequencies."""
    fa = np.asarray(a.X() if isinstance(a, ProcessEventMatrix) else a, dtype=np.float64).mean(axis=0)
    fb = np.asarray(b.X() if isinstance(b, ProcessEventMatrix) else b, dtype=np.float64).mean(axis=0)
    return float(np.abs(fa - fb).mean())


def generator_to_json(g: GeneratorModel) -> dict:
    return {
        "version": FORMAT_VERSION,
        "kind": g.kind,
        "latent_dim": g.latent_dim,
        "class_conditioning": g.class_conditioning,
        "class_ratio": float(g.class_ratio).hex(),
        "col_names": list(g.col_names),
        "networks": {name: layers_to_json(net) for name, net in g.networks.items()},
    }


def generator_from_json(obj: dict) -> GeneratorModel:
    try:
        if obj["version"] != FORMAT_VERSION:
            raise ModelLoadError(f"unsupported model version {obj['version']}")
        nets = {name: layers_from_json(v) for name, v in obj["networks"].items()}
        return GeneratorModel(obj["kind"], nets, int(obj["latent_dim"]), bool(obj["class_conditioning"]),
                              list(obj["col_names"]), float.fromhex(obj["class_ratio"]))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ModelLoadError):
            raise
        raise ModelLoadError(f"malformed generator JSON: {exc}") from exc
