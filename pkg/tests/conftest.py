import numpy as np
import pytest

from modalsde.nn import DenseNet
from modalsde.rng import child_rng


def central_difference(f, params: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Gradient of scalar f(params) by central differences, coordinate by coordinate."""
    grad = np.zeros_like(params)
    for i in range(params.size):
        orig = params[i]
        params[i] = orig + h
        up = f()
        params[i] = orig - h
        down = f()
        params[i] = orig
        grad[i] = (up - down) / (2.0 * h)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-3) -> float:
    """Worst per-coordinate relative error, with a floor so near-zero gradients
    are judged on absolute terms."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def relu_net_away_from_kinks(widths, rng: np.random.Generator, x: np.ndarray,
                             margin: float = 1e-2, tries: int = 50) -> DenseNet:
    """A relu net whose pre-activations on x stay at least `margin` from zero.

    Central differences are only valid where the loss is differentiable; a
    pre-activation within h of a relu kink would poison the check. Resampling
    the initialization is the honest fix (the gradient at a kink does not
    exist, so nothing is being hidden).
    """
    for _ in range(tries):
        net = DenseNet.create(widths, "relu", rng)
        _, cache = net.forward(x, want_cache=True)
        closest = min(float(np.min(np.abs(z))) for z in cache.pre)
        if closest > margin:
            return net
    raise AssertionError("could not find a kink-free relu test case")


@pytest.fixture
def rng():
    return child_rng(1234, "tests")
