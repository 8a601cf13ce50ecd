from typing import Tuple

import numpy as np

from utils.exceptions import ShapeError


def mse_loss(prediction: np.ndarray, target: np.ndarray) -> Tuple[float, np.ndarray]:
    """
    Mean squared error over all elements and its gradient 2(pred - target)/N.

    Raises:
        ShapeError: If the shapes differ
    """
    if prediction.shape != target.shape:
        raise ShapeError(f"prediction shape {prediction.shape} does not match target shape {target.shape}")
    diff = prediction - target
    count = diff.size
    loss = float(np.mean(np.square(diff), dtype=np.float64)) if count else 0.0
    grad = diff * (2.0 / max(count, 1))
    return loss, grad.astype(prediction.dtype, copy=False)
