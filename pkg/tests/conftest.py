import numpy as np
import pytest

from analog_dam.core import DenseAMModel


def random_model(rng, n_h, n_v, beta=1.0, tau_v=1.0, tau_h=0.1, distance=False, scale=1.0):
    xi = scale * rng.normal(size=(n_h, n_v))
    b = -0.5 * np.sum(xi**2, axis=1) if distance else rng.normal(size=n_h)
    a = np.zeros(n_v) if distance else rng.normal(size=n_v)
    return DenseAMModel(xi=xi, a=a, b=b, tau_v=tau_v, tau_h=tau_h, beta=beta)


def central_grad(fn, x, step=1e-6):
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = step
        g[i] = (fn(x + e) - fn(x - e)) / (2 * step)
    return g


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
