"""Seeded synthetic datasets with known structure."""

import numpy as np

from .data import TabularDataset, TimeSeriesDataset


def regression_1d(n=50, noise=0.1, seed=0):
    """y = sin(2x) + 0.3x + ε on x ~ U(-3, 3)."""
    rng = np.random.default_rng(seed)
    X = rng.uniform(-3.0, 3.0, (n, 1))
    y = np.sin(2.0 * X) + 0.3 * X + noise * rng.standard_normal((n, 1))
    return TabularDataset(X, y, ["x"], ["y"])


def correlated_noise_regression(n=300, seed=0, noise=0.05, amplitude=0.5):
    """3-D inputs, two targets with state-dependent correlated noise.

    With b = (1, -1, 0)/√2, c = (1, 1, -2)/√6, u = b·x and v = c·x:

        y₁ = sin(1.5u) + 0.5v + e,    y₂ = 0.5u + cos(1.5v) + e,

    where the shared term e = s(x)·ξ/√2 with s(x) = amplitude·σ(2u) correlates
    the two targets, plus independent N(0, noise²) terms. The targets ignore
    the direction a = (1, 1, 1)/√3: a correlated diffusion can perturb the
    inputs along a without disturbing the fit, while a diagonal one cannot.
    """
    rng = np.random.default_rng(seed)
    b = np.array([1.0, -1.0, 0.0]) / np.sqrt(2.0)
    c = np.array([1.0, 1.0, -2.0]) / np.sqrt(6.0)
    X = rng.uniform(-2.0, 2.0, (n, 3))
    u, v = X @ b, X @ c
    s = amplitude / (1.0 + np.exp(-2.0 * u))
    shared = (s * rng.standard_normal(n))[:, None] / np.sqrt(2.0)
    Y = np.stack([np.sin(1.5 * u) + 0.5 * v, 0.5 * u + np.cos(1.5 * v)], axis=1)
    Y = Y + shared + noise * rng.standard_normal((n, 2))
    return TabularDataset(X, Y, ["x1", "x2", "x3"], ["y1", "y2"])


def correlated_ou(length=400, dt=1.0, theta=0.1, scale=0.3, correlation=0.9,
                  obs_noise=0.05, seed=0, substeps=10):
    """2-D Ornstein-Uhlenbeck series dx = -θx dt + C dW with correlated C."""
    rng = np.random.default_rng(seed)
    cov = scale ** 2 * np.array([[1.0, correlation], [correlation, 1.0]])
    C = np.linalg.cholesky(cov)
    h = dt / substeps
    x = np.zeros(2)
    out = np.empty((length, 2))
    for t in range(length):
        out[t] = x
        for _ in range(substeps):
            x = x - theta * x * h + np.sqrt(h) * C @ rng.standard_normal(2)
    Y = out + obs_noise * rng.standard_normal(out.shape)
    return TimeSeriesDataset(dt * np.arange(length), Y, ["y1", "y2"])
