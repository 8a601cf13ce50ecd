"""
Dense 2-D convolution on (batch, channels, height, width) arrays.

Cross-correlation convention (no kernel flip), stride 1, zero "same" padding. The naive
path is the reference implementation; the im2col path is what training uses and has to
agree with it to 1e-6 relative.
"""

import logging
from typing import Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from utils.exceptions import ShapeError

METHOD_IM2COL = 'im2col'
METHOD_NAIVE = 'naive'
METHODS = (METHOD_IM2COL, METHOD_NAIVE)

logger = logging.getLogger('cmc_restore.conv')


class MacCounter:
    """Counts multiply-accumulates performed by the naive convolution."""

    def __init__(self) -> None:
        self.macs = 0

    def add(self, count: int) -> None:
        self.macs += int(count)


def same_padding(kernel_size: int) -> Tuple[int, int]:
    """(before, after) padding that preserves spatial size; asymmetric for even kernels."""
    return (kernel_size - 1) // 2, kernel_size // 2


def _validate(x: np.ndarray, kernel: np.ndarray, bias: Optional[np.ndarray], allow_even: bool) -> None:
    if x.ndim != 4:
        raise ShapeError(f"input must be 4-D (batch, channels, height, width), got shape {x.shape}")
    if kernel.ndim != 4:
        raise ShapeError(f"kernel must be 4-D (k_out, k_in, n, n), got shape {kernel.shape}")
    k_out, k_in, kh, kw = kernel.shape
    if kh != kw:
        raise ShapeError(f"kernel must be square, got {kh}x{kw}")
    if x.shape[1] != k_in:
        raise ShapeError(f"input has {x.shape[1]} channels but kernel expects k_in={k_in}")
    if kh % 2 == 0 and not allow_even:
        raise ShapeError(f"even kernel size {kh} is only supported for benchmarking")
    if bias is not None and bias.shape != (k_out,):
        raise ShapeError(f"bias must have shape ({k_out},), got {bias.shape}")


def _pad(x: np.ndarray, kernel_size: int) -> np.ndarray:
    before, after = same_padding(kernel_size)
    if before == 0 and after == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (before, after), (before, after)))


def _correlate_im2col(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    n = kernel.shape[-1]
    windows = sliding_window_view(_pad(x, n), (n, n), axis=(2, 3))
    out = np.tensordot(windows, kernel, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _correlate_naive(x: np.ndarray, kernel: np.ndarray, counter: Optional[MacCounter]) -> np.ndarray:
    batch, _, height, width = x.shape
    k_out, k_in, n, _ = kernel.shape
    xp = _pad(x, n)
    out = np.zeros((batch, k_out, height, width), dtype=np.result_type(x, kernel))
    for o in range(k_out):
        for c in range(k_in):
            for i in range(n):
                for j in range(n):
                    out[:, o] += kernel[o, c, i, j] * xp[:, c, i:i + height, j:j + width]
                    if counter is not None:
                        counter.add(batch * height * width)
    return out


def conv2d_forward(
    x: np.ndarray,
    kernel: np.ndarray,
    bias: Optional[np.ndarray] = None,
    method: str = METHOD_IM2COL,
    allow_even: bool = False,
    counter: Optional[MacCounter] = None,
) -> np.ndarray:
    """
    Same-padded, stride-1 cross-correlation plus per-output-channel bias.

    Args:
        x: Input of shape (batch, k_in, height, width)
        kernel: Kernel of shape (k_out, k_in, n, n)
        bias: Optional vector of length k_out
        method: 'im2col' (default) or 'naive'
        allow_even: Accept even n with asymmetric padding (benchmarks only)
        counter: MacCounter filled in by the naive path

    Returns:
        Array of shape (batch, k_out, height, width)

    Raises:
        ShapeError: If shapes are inconsistent
    """
    _validate(x, kernel, bias, allow_even)
    if method == METHOD_IM2COL:
        out = _correlate_im2col(x, kernel)
    elif method == METHOD_NAIVE:
        out = _correlate_naive(x, kernel, counter)
    else:
        raise ValueError(f"unknown convolution method '{method}', expected one of {METHODS}")
    if bias is not None:
        out += bias.astype(out.dtype, copy=False)[None, :, None, None]
    return out


def conv2d_backward(
    x: np.ndarray,
    kernel: np.ndarray,
    grad_output: np.ndarray,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Exact adjoint of conv2d_forward for odd kernels.

    Returns:
        (grad_input, grad_kernel, grad_bias)
    """
    _validate(x, kernel, None, allow_even=False)
    k_out, _, n, _ = kernel.shape
    expected = (x.shape[0], k_out, x.shape[2], x.shape[3])
    if grad_output.shape != expected:
        raise ShapeError(f"grad_output must have shape {expected}, got {grad_output.shape}")

    windows = sliding_window_view(_pad(x, n), (n, n), axis=(2, 3))
    grad_kernel = np.tensordot(grad_output, windows, axes=([0, 2, 3], [0, 2, 3]))
    # full correlation with the spatially flipped, channel-transposed kernel
    flipped = np.ascontiguousarray(kernel[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    grad_input = _correlate_im2col(grad_output, flipped)
    grad_bias = grad_output.sum(axis=(0, 2, 3))
    return grad_input, grad_kernel, grad_bias


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(grad: np.ndarray, pre_activation: np.ndarray) -> np.ndarray:
    return grad * (pre_activation > 0)
