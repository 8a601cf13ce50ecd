"""Central finite differences used as a gradient oracle in tests."""

from typing import Callable, Union

import numpy as np

DEFAULT_STEP = 1e-5
DEFAULT_EPS = 1e-12


def numerical_gradient(f: Callable[[np.ndarray], float], point: np.ndarray, step: float = DEFAULT_STEP) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat float64 vector."""
    if not step > 0:
        raise ValueError(f"step must be positive, got {step}")
    x = np.array(point, dtype=np.float64).ravel()
    grad = np.zeros_like(x)
    for i in range(x.size):
        original = x[i]
        x[i] = original + step
        f_plus = f(x.copy())
        x[i] = original - step
        f_minus = f(x.copy())
        x[i] = original
        grad[i] = (f_plus - f_minus) / (2.0 * step)
    return grad


def finite_diff_check(
    f: Callable[[np.ndarray], float],
    analytic: Union[np.ndarray, Callable[[np.ndarray], np.ndarray]],
    point: np.ndarray,
    step: float = DEFAULT_STEP,
    eps: float = DEFAULT_EPS,
) -> float:
    """
    Max over coordinates of |analytic - central| / (|analytic| + |central| + eps).

    Args:
        f: Scalar function of the parameter vector
        analytic: Gradient at point, or a callable returning it
        point: Parameter vector
        step: Finite-difference step
        eps: Guard for coordinates where both gradients vanish
    """
    x = np.array(point, dtype=np.float64).ravel()
    grad = analytic(x.copy()) if callable(analytic) else analytic
    grad = np.asarray(grad, dtype=np.float64).ravel()
    central = numerical_gradient(f, x, step)
    error = np.abs(grad - central) / (np.abs(grad) + np.abs(central) + eps)
    return float(error.max()) if error.size else 0.0
