import numpy as np
import pytest

from aptkit.data import ProcessEventMatrix, SynthConfig, generate_synthetic


def random_matrix(rng, n=30, d=6, labels=True, p=0.3):
    values = (rng.random((n, d)) < p).astype(np.uint8)
    ids = [f"p{i}" for i in range(n)]
    cols = [f"e{j}" for j in range(d)]
    y = None
    if labels:
        y = np.zeros(n, dtype=np.uint8)
        y[rng.choice(n, size=max(1, n // 10), replace=False)] = 1
    return ProcessEventMatrix(ids, cols, values, y)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def synth_small():
    m, meta = generate_synthetic(SynthConfig(n_benign=200, n_anomalies=4, d=12, seed=3))
    return m


def fd_max_rel_error(loss_fn, params, grads, n_checks=50, step=1e-5, seed=0, floor=1e-6):
    """Independent central-difference check over ``n_checks`` random scalar parameters.

    ``loss_fn()`` must read ``params`` in place. Relative error uses
    ``max(|analytic|, |numeric|, floor)`` as the denominator.
    """
    rng = np.random.default_rng(seed)
    slots = [(k, j) for k, p in enumerate(params) for j in range(p.size)]
    pick = rng.choice(len(slots), size=min(n_checks, len(slots)), replace=False)
    worst = 0.0
    for s in pick:
        k, j = slots[s]
        flat = params[k].reshape(-1)
        keep = flat[j]
        flat[j] = keep + step
        up = loss_fn()
        flat[j] = keep - step
        down = loss_fn()
        flat[j] = keep
        num = (up - down) / (2 * step)
        ana = grads[k].reshape(-1)[j]
        worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), floor))
    return worst, len(pick)
