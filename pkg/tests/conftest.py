import numpy as np
import pytest

from flowgen.rng import RngStream
from flowgen.tensor import Tensor, gradient_of


@pytest.fixture
def rng():
    return RngStream(20240817)


def directional_fd(loss_fn, x, direction, h=1e-5):
    """Central finite difference of a scalar loss along one direction."""
    x = np.asarray(x, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    f_plus = loss_fn(Tensor(x + h * d))
    f_minus = loss_fn(Tensor(x - h * d))
    return (float(f_plus.data) - float(f_minus.data)) / (2.0 * h)


def check_gradient(loss_fn, x, rng, n_directions=4, rtol=1e-4, h=1e-5):
    """Compare reverse-mode gradients against central finite differences.

    Checks random directional derivatives plus a few random coordinates;
    returns the worst relative error so tests can assert on it.
    """
    x = np.asarray(x, dtype=np.float64)
    g = gradient_of(loss_fn, Tensor(x)).data.ravel()
    worst = 0.0
    for _ in range(n_directions):
        d = rng.normal(x.shape)
        d /= np.linalg.norm(d.ravel())
        fd = directional_fd(loss_fn, x, d, h)
        an = float(g @ d.ravel())
        err = abs(fd - an) / max(abs(fd), abs(an), 1e-10)
        worst = max(worst, err)
    for idx in rng.generator().choice(x.size, size=min(3, x.size), replace=False):
        d = np.zeros(x.size)
        d[idx] = 1.0
        fd = directional_fd(loss_fn, x, d.reshape(x.shape), h)
        an = float(g[idx])
        err = abs(fd - an) / max(abs(fd), abs(an), 1e-8)
        worst = max(worst, err)
    assert worst < rtol, f"gradient mismatch: relative error {worst:.3e} >= {rtol}"
    return worst
