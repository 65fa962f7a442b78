import numpy as np
import pytest

from nextitnet.model import ModelConfig, NextItNet
from nextitnet.training import TrainConfig, train


def numeric_grad(f, arr: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every entry of ``arr`` (in place)."""
    g = np.zeros_like(arr)
    flat = arr.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        a = f()
        flat[i] = old - h
        b = f()
        flat[i] = old
        g.reshape(-1)[i] = (a - b) / (2 * h)
    return g


def grad_errors(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8, noise: float = 0.0):
    """(max relative error over |analytic| >= floor, max abs error elsewhere).

    Entries whose absolute difference is within ``noise`` (the finite-difference
    round-off floor) count as exact.
    """
    a, n = analytic.reshape(-1), numeric.reshape(-1)
    big = np.abs(a) >= floor
    diff = np.abs(a - n)
    rel = np.where(diff[big] <= noise, 0.0, diff[big] / np.maximum(np.abs(a[big]), np.abs(n[big])))
    ab = diff[~big]
    return (rel.max() if rel.size else 0.0), (ab.max() if ab.size else 0.0)


def assert_grad_close(analytic, numeric, rtol=1e-4, atol=1e-8, noise=0.0):
    rel, ab = grad_errors(analytic, numeric, atol, noise)
    assert rel < rtol, f"max relative error {rel:.3e}"
    assert ab < atol, f"max absolute error {ab:.3e} on near-zero entries"


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def cycle_windows(num: int, t: int, cycle=(1, 2, 3), seed: int = 0) -> np.ndarray:
    """Windows that follow ``cycle`` exactly, starting at random phases."""
    r = np.random.default_rng(seed)
    c = np.array(cycle)
    starts = r.integers(0, len(c), size=num)
    return c[(starts[:, None] + np.arange(t)[None, :]) % len(c)]


@pytest.fixture(scope="session")
def cycle_model():
    """Small model trained on the deterministic cycle 1 -> 2 -> 3 -> 1."""
    w = cycle_windows(256, 6)
    model = NextItNet(ModelConfig(vocab_size=4, embedding_width=8, dilations=(1, 2), seed=1))
    train(model, w, w[:32], TrainConfig(max_epochs=15, batch_size=16, learning_rate=0.01, patience=0, seed=1))
    return model
