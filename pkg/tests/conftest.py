import numpy as np
import pytest

from warpflow import autodiff as ad


def numeric_grad(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar-valued f at x (64-bit)."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        xp = x.astype(np.float64).copy()
        xm = xp.copy()
        xp[i] += eps
        xm[i] -= eps
        g[i] = (f(xp) - f(xm)) / (2 * eps)
    return g


def check_grad(build, x: np.ndarray, eps: float = 1e-5, rtol: float = 1e-4):
    """Assert the analytic gradient of a weighted sum of build(x) matches FD.

    build maps a Tensor to a Tensor; the scalarizer uses fixed random weights
    so sign errors and transposed gradients are not masked by symmetry.
    """
    out0 = build(ad.Tensor(x.astype(np.float64)))
    weights = np.random.default_rng(99).standard_normal(out0.shape)

    def f(arr):
        return float((build(ad.Tensor(arr)).data * weights).sum())

    t = ad.Tensor(x.astype(np.float64), requires_grad=True)
    loss = (build(t) * ad.Tensor(weights)).sum()
    loss.backward()
    numeric = numeric_grad(f, x, eps)
    scale = np.maximum(np.abs(numeric), 1.0)
    err = np.abs(t.grad - numeric) / scale
    assert err.max() <= rtol, f"gradient mismatch: max rel err {err.max():.3g}"
    return float(err.max())


@pytest.fixture
def rng():
    return np.random.default_rng(0)
