import numpy as np
import pytest

from lunggan.tensor import Graph, Tensor, precision


def numerical_grad(f, arrays, index, eps=1e-6):
    """Central finite differences of scalar ``f(*arrays)`` w.r.t. ``arrays[index]``."""
    base = [a.copy() for a in arrays]
    target = base[index]
    grad = np.zeros_like(target)
    it = np.nditer(target, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = target[i]
        target[i] = old + eps
        fp = f(*base)
        target[i] = old - eps
        fm = f(*base)
        target[i] = old
        grad[i] = (fp - fm) / (2 * eps)
    return grad


def max_rel_error(a, b):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), 1e-8)))


def gradcheck(build, arrays, eps=1e-6):
    """Compare analytic gradients of ``build(*tensors) -> scalar Tensor`` to finite differences.

    Runs in float64. Returns the worst relative error over all inputs.
    """
    with precision(np.float64):
        arrays = [np.asarray(a, np.float64) for a in arrays]
        tensors = [Tensor(a, requires_grad=True) for a in arrays]
        with Graph() as g:
            loss = build(*tensors)
        g.backward(loss)
        analytic = [t.grad for t in tensors]

        def f(*arrs):
            return build(*[Tensor(a) for a in arrs]).item()

        return max(max_rel_error(analytic[i], numerical_grad(f, arrays, i, eps)) for i in range(len(arrays)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
