import json
from decimal import Decimal, getcontext

import numpy as np
import pytest

from aptkit.data import SynthConfig, generate_synthetic
from aptkit.nn import (
    AttentionAutoencoder, ModelLoadError, TrainConfig, TrainingDivergence, attention_weights,
    continue_training, default_latent_dim, encode, fine_tune_transfer, gradient_check, load_model,
    reconstruct, reconstruction_errors, save_model, train_autoencoder, transfer_gradient_check,
)
from aptkit.nn.autoencoder import softmax_rows
from aptkit.nn.core import Adam, DenseNet, sigmoid
from conftest import fd_max_rel_error


def _model(d=8, seed=0, **kw):
    return AttentionAutoencoder.create(d, seed=seed, **kw)


def test_latent_dim_rule():
    assert default_latent_dim(30) == 8
    assert default_latent_dim(100) == 25
    assert default_latent_dim(5) == 5


def test_uniform_attention_for_equal_logits():
    m = _model(6)
    a = attention_weights(m, np.ones(6))
    np.testing.assert_allclose(a, 1 / 6, atol=0)


def test_attention_saturation():
    logits = np.zeros((1, 5))
    logits[0, 2] = 1000.0
    assert softmax_rows(logits)[0, 2] >= 1 - 1e-6


def test_softmax_against_high_precision(rng):
    getcontext().prec = 50
    for _ in range(20):
        z = rng.normal(scale=5, size=7)
        exact = [Decimal(float(v)).exp() for v in z]
        tot = sum(exact)
        ref = np.array([float(e / tot) for e in exact])
        np.testing.assert_allclose(softmax_rows(z[None, :])[0], ref, rtol=0, atol=1e-12)


def test_attention_is_a_distribution(rng):
    m = _model(10)
    m.att_weights[:] = rng.normal(size=10) * 3
    A = m.attention(rng.random((50, 10)))
    assert np.all(A >= 0)
    np.testing.assert_allclose(A.sum(axis=1), 1.0, atol=1e-9)


def test_rank_one_data_is_learned():
    X = np.tile(np.array([1, 0, 1, 1, 0, 0], dtype=float), (64, 1))
    model, trace = train_autoencoder(X, "AAE", h=1, cfg=TrainConfig(learning_rate=1e-2, epochs=200,
                                                                     batch_size=32, validation_fraction=0))
    assert ((reconstruct(model, X) - X) ** 2).mean() < 1e-3


def test_huge_penalty_keeps_attention_uniform(rng):
    X = (rng.random((200, 8)) < 0.3).astype(float)
    model, _ = train_autoencoder(X, "AAE", cfg=TrainConfig(learning_rate=1e-2, epochs=30), lambda_reg=1e6)
    A = model.attention(X)
    assert np.abs(A - 1 / 8).max() < 1e-3


def test_training_reduces_loss_fivefold():
    for seed in range(5):
        m, _ = generate_synthetic(SynthConfig(n_benign=990, n_anomalies=10, d=30, seed=seed))
        _, trace = train_autoencoder(m, "AAE", cfg=TrainConfig(learning_rate=3e-3, epochs=100, seed=seed))
        assert trace.train[-1] <= trace.initial_train / 5


def test_gradient_check_fresh_model(rng):
    m = _model(9, seed=1)
    m.att_weights[:] = rng.normal(size=9)
    X = (rng.random((16, 9)) < 0.4).astype(float)
    assert gradient_check(m, X, n_checks=80) < 1e-4
    _, grads = m.loss_and_grads(X)
    err, n = fd_max_rel_error(lambda: m.loss_and_grads(X, need_grads=False)[0], m.params(), grads,
                              n_checks=60, seed=3)
    assert n == 60 and err < 1e-4


def test_gradient_check_zero_batch():
    m = _model(6, seed=2)
    X = np.zeros((5, 6))
    _, grads = m.loss_and_grads(X)
    bias = m.decoder.layers[-1].b
    k = next(i for i, p in enumerate(m.params()) if p is bias)
    err, _ = fd_max_rel_error(lambda: m.loss_and_grads(X, need_grads=False)[0], [bias], [grads[k]],
                              n_checks=6)
    assert err < 1e-4


def test_duplicated_rows_double_gradient(rng):
    m = _model(7, seed=4)
    x = (rng.random((1, 7)) < 0.5).astype(float)
    _, g1 = m.loss_and_grads(x)
    _, g2 = m.loss_and_grads(np.vstack([x, x]))
    for a, b in zip(g1, g2):
        np.testing.assert_allclose(b, 2 * a, rtol=1e-12, atol=1e-15)


def test_transfer_gradient(rng):
    m = _model(8, seed=5)
    m.att_weights[:] = rng.normal(size=8)
    Xt = (rng.random((10, 8)) < 0.3).astype(float)
    Xs = (rng.random((12, 8)) < 0.5).astype(float)
    assert transfer_gradient_check(m, Xt, Xs, lambda_src=0.7, n_checks=60) < 1e-4


def test_encode_shapes_and_determinism(rng):
    m = _model(8)
    assert encode(m, np.zeros((0, 8))).shape == (0, m.h)
    x = (rng.random(8) < 0.5).astype(float)
    Z = encode(m, np.vstack([x, x]))
    assert np.array_equal(Z[0], Z[1])


def test_encode_matches_manual_forward(rng):
    m = _model(8, seed=3)
    m.att_weights[:] = rng.normal(size=8)
    x = (rng.random(8) < 0.5).astype(float)
    a = attention_weights(m, x)
    h = 8 * a * x
    for L in m.encoder.layers:
        h = h @ L.W + L.b
        h = np.maximum(h, 0) if L.activation == "relu" else h
    np.testing.assert_allclose(encode(m, x[None, :])[0], h, rtol=1e-12, atol=1e-12)


def _constant_decoder_model(d, bias):
    m = _model(d)
    last = m.decoder.layers[-1]
    last.W[:] = 0.0
    last.b[:] = bias
    return m


def test_perfect_reconstruction_scores_zero():
    m = _constant_decoder_model(5, 0.0)  # sigmoid(0) = 0.5 everywhere
    x = np.full((1, 5), 0.5)
    assert reconstruction_errors(m, x)[0] == 0.0


def test_unit_difference_scores_one():
    b = np.zeros(5)
    b[0] = -1000.0
    m = _constant_decoder_model(5, b)
    x = np.full((1, 5), 0.5)
    x[0, 0] = 1.0
    assert reconstruction_errors(m, x)[0] == 1.0


def test_reconstruction_matches_direct_norm(rng):
    m = _model(10, seed=9)
    X = (rng.random((40, 10)) < 0.3).astype(float)
    direct = np.sqrt(((X - reconstruct(m, X)) ** 2).sum(axis=1))
    np.testing.assert_allclose(reconstruction_errors(m, X), direct, atol=1e-10, rtol=0)


def test_transfer_lambda_zero_is_continued_training(rng):
    X = (rng.random((300, 10)) < 0.3).astype(float)
    base, _ = train_autoencoder(X, cfg=TrainConfig(learning_rate=3e-3, epochs=5))
    _, trace = fine_tune_transfer(base, X, X, lambda_src=0.0, cfg=TrainConfig(learning_rate=1e-3, epochs=20))
    t = np.array(trace.train)
    assert t[-1] <= trace.initial_train
    assert np.polyfit(np.arange(t.size), t, 1)[0] <= 0


def test_transfer_huge_lambda_source_dominates():
    s, _ = generate_synthetic(SynthConfig(n_benign=300, n_anomalies=3, d=16, seed=2))
    t, _ = generate_synthetic(SynthConfig(n_benign=300, n_anomalies=3, d=16, seed=2, domain="target", shift=0.5))
    # Adam is scale-free, so "source dominates" only shows once the source is near its optimum
    base, _ = train_autoencoder(s, cfg=TrainConfig(learning_rate=3e-3, epochs=150))
    before = base.mean_loss(t.X())
    cfg = TrainConfig(epochs=10)
    heavy, _ = fine_tune_transfer(base, s, t, lambda_src=1e6, cfg=cfg)
    free, _ = fine_tune_transfer(base, s, t, lambda_src=0.0, cfg=cfg)
    heavy_change = abs(heavy.mean_loss(t.X()) - before) / before
    assert heavy_change < 0.01
    assert abs(free.mean_loss(t.X()) - before) / before > 3 * heavy_change


def test_transfer_lambda_one_lowers_target_error():
    gains = []
    for seed in range(5):
        s, _ = generate_synthetic(SynthConfig(n_benign=500, n_anomalies=5, d=20, seed=seed))
        t, _ = generate_synthetic(SynthConfig(n_benign=500, n_anomalies=5, d=20, seed=seed,
                                              domain="target", shift=0.4))
        base, _ = train_autoencoder(s, cfg=TrainConfig(learning_rate=3e-3, epochs=40, seed=seed))
        tuned, _ = fine_tune_transfer(base, s, t, 1.0, TrainConfig(learning_rate=1e-3, epochs=20, seed=seed))
        gains.append(reconstruction_errors(base, t).mean() - reconstruction_errors(tuned, t).mean())
    assert np.mean(gains) >= 0


def test_transfer_rejects_wrong_width(rng):
    m = _model(6)
    with pytest.raises(ValueError):
        fine_tune_transfer(m, np.zeros((5, 6)), np.zeros((5, 7)))


def test_model_round_trip(tmp_path, rng):
    m, _ = train_autoencoder((rng.random((100, 12)) < 0.3).astype(float), cfg=TrainConfig(epochs=3))
    save_model(m, tmp_path / "m.json")
    back = load_model(tmp_path / "m.json")
    X = rng.random((100, 12))
    assert np.array_equal(encode(m, X), encode(back, X))
    assert np.array_equal(reconstruct(m, X), reconstruct(back, X))


def test_truncated_model_file(tmp_path):
    save_model(_model(5), tmp_path / "m.json")
    text = (tmp_path / "m.json").read_text()
    (tmp_path / "bad.json").write_text(text[: len(text) // 2])
    with pytest.raises(ModelLoadError):
        load_model(tmp_path / "bad.json")


def test_model_version_checked(tmp_path):
    save_model(_model(5), tmp_path / "m.json")
    obj = json.loads((tmp_path / "m.json").read_text())
    obj["version"] = 99
    (tmp_path / "v.json").write_text(json.dumps(obj))
    with pytest.raises(ModelLoadError):
        load_model(tmp_path / "v.json")


def test_divergence_is_reported():
    X = np.ones((20, 4))
    with pytest.raises(TrainingDivergence, match="last finite epoch"):
        train_autoencoder(X * np.nan, cfg=TrainConfig(epochs=2))


def test_ae_variant_has_no_attention_params():
    m = _model(6, variant="AE")
    assert len(m.params()) == len(m.encoder.params()) + len(m.decoder.params())
    assert m.lambda_reg == 0.0


def test_continue_training_leaves_original(rng):
    X = (rng.random((80, 6)) < 0.3).astype(float)
    m, _ = train_autoencoder(X, cfg=TrainConfig(epochs=2))
    before = [p.copy() for p in m.params()]
    continue_training(m, X, TrainConfig(epochs=2), dropout=0.2)
    for a, b in zip(before, m.params()):
        assert np.array_equal(a, b)


def test_sigmoid_extremes():
    v = sigmoid(np.array([-1000.0, 0.0, 1000.0]))
    assert v.tolist() == [0.0, 0.5, 1.0]


def test_adam_minimises_quadratic():
    w = np.array([5.0, -3.0])
    opt = Adam([w], lr=0.1)
    for _ in range(500):
        opt.step([w], [2 * w])
    assert np.abs(w).max() < 1e-2


def test_densenet_batchnorm_gradient(rng):
    net = DenseNet.build([5, 7, 3], ["relu", "identity"], rng, [True, False])
    X = rng.normal(size=(9, 5))
    T = rng.normal(size=(9, 3))

    def loss():
        out, _ = net.forward(X, train=True)
        return float(((out - T) ** 2).sum())

    out, cache = net.forward(X, train=True)
    grads, _ = net.backward(cache, 2 * (out - T))
    err, _ = fd_max_rel_error(loss, net.params(), grads, n_checks=40)
    assert err < 1e-4
