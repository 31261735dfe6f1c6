import numpy as np
import pytest

from semdiff import autodiff as ad


def central_difference(f, arrays, index, h=1e-5):
    """d f / d arrays[index], element by element."""
    x = arrays[index]
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        up = f(*arrays)
        x[i] = old - h
        down = f(*arrays)
        x[i] = old
        grad[i] = (up - down) / (2 * h)
    return grad


def rel_error(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12))


def check_op_gradient(op, *shapes, seed=0, h=1e-5, positive=False, arrays=None):
    """Autodiff gradients of ``sum(op(*xs) * R)`` against central differences.

    Returns the worst relative error over all inputs.
    """
    rng = np.random.default_rng(seed)
    if arrays is None:
        arrays = [rng.standard_normal(s) for s in shapes]
        if positive:
            arrays = [np.abs(a) + 0.5 for a in arrays]
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    probe_shape = op(*[ad.Tensor(a) for a in arrays]).shape
    R = rng.standard_normal(probe_shape)

    def scalar(*xs):
        return float(np.sum(op(*[ad.Tensor(x) for x in xs]).data * R))

    leaves = [ad.Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = op(*leaves)
    ad.tsum(ad.mul(out, ad.Tensor(R))).backward()
    worst = 0.0
    for i, leaf in enumerate(leaves):
        num = central_difference(scalar, arrays, i, h)
        worst = max(worst, rel_error(leaf.grad, num))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
