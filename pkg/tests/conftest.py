import numpy as np
import pytest

from dyadsynth.tensor import Tensor, backward, mul, tsum


def finite_difference_grads(fn, arrays, h=1e-3):
    """Central-difference gradients of a scalar array function, in float64."""
    grads = []
    for k, base in enumerate(arrays):
        g = np.zeros_like(base, dtype=np.float64)
        flat = base.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn(arrays)
            flat[i] = orig - h
            fm = fn(arrays)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def gradcheck(build_loss, shapes, rng, h=1e-3, tol=1e-3, scale=1.0):
    """Compare analytic gradients against central finite differences.

    build_loss takes a list of Tensors and returns a scalar Tensor. Inputs
    are float64 so the finite-difference oracle is trustworthy at h=1e-3.
    Error metric per input: max|analytic - numeric| / (max|numeric| + 1e-8).
    """
    arrays = [scale * rng.standard_normal(s) for s in shapes]
    tensors = [Tensor(a.copy(), requires_grad=True, dtype=np.float64) for a in arrays]
    loss = build_loss(tensors)
    backward(loss)
    analytic = [t.grad.copy() for t in tensors]

    def scalar_fn(arrs):
        ts = [Tensor(a, dtype=np.float64) for a in arrs]
        return float(build_loss(ts).data)

    numeric = finite_difference_grads(scalar_fn, arrays, h=h)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.abs(n).max() + 1e-8
        rel = np.abs(a - n).max() / denom
        worst = max(worst, rel)
    assert worst < tol, f"gradcheck failed: relative error {worst:.3e} >= {tol}"
    return worst


def weighted_sum(out, weights: np.ndarray):
    """Scalar probe of a non-scalar op output with pre-drawn weights."""
    return tsum(mul(out, Tensor(weights, dtype=np.float64)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
