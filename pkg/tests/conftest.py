import numpy as np
import pytest


def numeric_grad(f, x, eps=1e-5):
    """Central finite differences of scalar f at every entry of x."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + eps
        hi = f(x)
        x[i] = old - eps
        lo = f(x)
        x[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def assert_grad_close(analytic, numeric, tol=1e-4):
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    err = np.abs(analytic - numeric) / (1.0 + np.abs(numeric))
    assert err.max() <= tol, f"max relative error {err.max():.3g}"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
