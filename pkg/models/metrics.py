"""Image quality metrics on [0, 1] images."""

import math

import numpy as np
from scipy import ndimage

from utils.exceptions import ShapeError

PSNR_CAP_DB = 100.0
SSIM_SIGMA = 1.5
SSIM_TRUNCATE = 3.5  # 11x11 window at sigma 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_BORDER = 5


def _check_pair(prediction: np.ndarray, target: np.ndarray) -> None:
    if prediction.shape != target.shape:
        raise ShapeError(f"prediction shape {prediction.shape} does not match target shape {target.shape}")
    if prediction.size == 0:
        raise ShapeError("cannot score empty images")


def psnr(prediction: np.ndarray, target: np.ndarray, data_range: float = 1.0) -> float:
    """
    Peak signal-to-noise ratio in dB; the prediction is clamped to [0, data_range] first.

    A perfect prediction reports PSNR_CAP_DB instead of infinity.
    """
    _check_pair(prediction, target)
    pred = np.clip(prediction.astype(np.float64), 0.0, data_range)
    mse = float(np.mean(np.square(pred - target.astype(np.float64))))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(data_range ** 2 / mse))


def _ssim_channel(x: np.ndarray, y: np.ndarray, data_range: float) -> float:
    def blur(img):
        return ndimage.gaussian_filter(img, sigma=SSIM_SIGMA, truncate=SSIM_TRUNCATE, mode='reflect')

    mu_x, mu_y = blur(x), blur(y)
    var_x = blur(x * x) - mu_x * mu_x
    var_y = blur(y * y) - mu_y * mu_y
    cov_xy = blur(x * y) - mu_x * mu_y
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    numerator = (2 * mu_x * mu_y + c1) * (2 * cov_xy + c2)
    denominator = (mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2)
    ssim_map = numerator / denominator
    b = SSIM_BORDER
    return float(ssim_map[b:-b, b:-b].mean())


def ssim(prediction: np.ndarray, target: np.ndarray, data_range: float = 1.0) -> float:
    """
    Structural similarity of (channels, H, W) images, averaged over channels.

    Gaussian window sigma 1.5 (11x11), K1=0.01, K2=0.03, 5 px border excluded.
    """
    _check_pair(prediction, target)
    if prediction.ndim != 3:
        raise ShapeError(f"ssim expects (channels, H, W) images, got shape {prediction.shape}")
    if min(prediction.shape[1:]) <= 2 * SSIM_BORDER:
        raise ShapeError(f"images must be larger than {2 * SSIM_BORDER} px for ssim, got {prediction.shape}")
    pred = np.clip(prediction.astype(np.float64), 0.0, data_range)
    ref = target.astype(np.float64)
    return float(np.mean([_ssim_channel(pred[c], ref[c], data_range) for c in range(pred.shape[0])]))


def mean_psnr(predictions: np.ndarray, targets: np.ndarray) -> float:
    """Mean per-image PSNR over a (batch, channels, H, W) stack."""
    _check_pair(predictions, targets)
    return float(np.mean([psnr(p, t) for p, t in zip(predictions, targets)]))


def mean_ssim(predictions: np.ndarray, targets: np.ndarray) -> float:
    _check_pair(predictions, targets)
    return float(np.mean([ssim(p, t) for p, t in zip(predictions, targets)]))
