"""
Synthetic degradations on (3, H, W) images in [0, 1].

Every generator is a pure function of (clean image, parameters, sample seed); clamping to
[0, 1] is always the last operation.
"""

import dataclasses
import logging
from dataclasses import dataclass
from typing import Any, Dict, Tuple

import numpy as np
from scipy import fft as sp_fft
from scipy import ndimage
from skimage.draw import line_aa

from utils.exceptions import ShapeError, ValidationError

KIND_NOISE = 'gaussian_noise'
KIND_BLUR = 'gaussian_blur'
KIND_BLOCK = 'block_artifact'
KIND_RAIN = 'rain_streaks'
KINDS = (KIND_NOISE, KIND_BLUR, KIND_BLOCK, KIND_RAIN)

PIXEL_LEVELS = 255.0
BLOCK_SIZE = 8
DCT_LEVEL_SHIFT = 128.0
MIN_BLUR_SIGMA = 1e-3
RANGE_TOLERANCE = 1e-6

# Standard JPEG luminance quantization table (ITU-T T.81, Annex K)
LUMINANCE_TABLE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)

logger = logging.getLogger('cmc_restore.degradations')


@dataclass(frozen=True)
class Degradation:
    """
    One degradation kind with its parameters.

    Noise sigma is on the 0..255 scale. Ranges are inclusive (low, high) pairs sampled
    uniformly per image. Rain angles are degrees from the horizontal axis, so 90 is vertical.
    """
    kind: str
    sigma: float = 50.0
    kernel_size: int = 15
    sigma_range: Tuple[float, float] = (0.2, 3.0)
    quality_range: Tuple[int, int] = (10, 70)
    density: float = 0.002
    length_range: Tuple[int, int] = (8, 20)
    angle_range: Tuple[float, float] = (70.0, 110.0)
    intensity_range: Tuple[float, float] = (0.15, 0.4)
    eval_blur_sigma: float = 2.5
    eval_quality: int = 20

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValidationError(f"unknown degradation kind '{self.kind}', expected one of {KINDS}")
        for name in ('sigma_range', 'quality_range', 'length_range', 'angle_range', 'intensity_range'):
            value = tuple(getattr(self, name))
            if len(value) != 2 or value[0] > value[1]:
                raise ValidationError(f"{self.kind}: {name} must be an ordered (low, high) pair, got {value}")
            object.__setattr__(self, name, value)
        if self.sigma < 0:
            raise ValidationError(f"{self.kind}: noise sigma must be non-negative, got {self.sigma}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValidationError(f"{self.kind}: blur kernel size must be a positive odd integer, got {self.kernel_size}")
        if self.sigma_range[0] < 0:
            raise ValidationError(f"{self.kind}: blur sigma range must be non-negative, got {self.sigma_range}")
        if not 1 <= self.quality_range[0] <= self.quality_range[1] <= 100 or not 1 <= self.eval_quality <= 100:
            raise ValidationError(f"{self.kind}: quality must lie in [1, 100], got {self.quality_range}/{self.eval_quality}")
        if self.density < 0 or self.length_range[0] < 1:
            raise ValidationError(f"{self.kind}: rain density must be >= 0 and lengths >= 1")
        if self.intensity_range[0] < 0:
            raise ValidationError(f"{self.kind}: rain intensity must be non-negative, got {self.intensity_range}")

    def for_evaluation(self) -> 'Degradation':
        """Test-time variant: fixed blur sigma and fixed blocking quality."""
        if self.kind == KIND_BLUR:
            return dataclasses.replace(self, sigma_range=(self.eval_blur_sigma, self.eval_blur_sigma))
        if self.kind == KIND_BLOCK:
            return dataclasses.replace(self, quality_range=(self.eval_quality, self.eval_quality))
        return self

    def to_dict(self) -> Dict[str, Any]:
        data = dataclasses.asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in data.items()}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'Degradation':
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValidationError(f"unknown degradation keys: {sorted(unknown)}")
        if 'kind' not in data:
            raise ValidationError("degradation needs a 'kind'")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in data.items()})


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    """Normalised 2-D Gaussian; degenerates to a centred delta below MIN_BLUR_SIGMA."""
    kernel = np.zeros((size, size), dtype=np.float64)
    centre = size // 2
    if sigma < MIN_BLUR_SIGMA:
        kernel[centre, centre] = 1.0
        return kernel
    axis = np.arange(size, dtype=np.float64) - centre
    kernel = np.exp(-(axis[:, None] ** 2 + axis[None, :] ** 2) / (2.0 * sigma ** 2))
    return kernel / kernel.sum()


def quantization_table(quality: int) -> np.ndarray:
    """Luminance table scaled by the IJG quality convention, entries clamped to [1, 255]."""
    quality = int(np.clip(quality, 1, 100))
    scale = 5000 // quality if quality < 50 else 200 - 2 * quality
    table = np.floor((LUMINANCE_TABLE * scale + 50) / 100)
    return np.clip(table, 1, 255)


def _add_noise(clean: np.ndarray, d: Degradation, rng: np.random.Generator) -> np.ndarray:
    if d.sigma == 0:
        return clean.copy()
    return clean + rng.normal(0.0, d.sigma / PIXEL_LEVELS, size=clean.shape)


def _blur(clean: np.ndarray, d: Degradation, rng: np.random.Generator) -> np.ndarray:
    sigma = rng.uniform(*d.sigma_range)
    kernel = gaussian_kernel(d.kernel_size, sigma)
    return ndimage.correlate(clean, kernel[None, :, :], mode='reflect')


def _block_artifacts(clean: np.ndarray, d: Degradation, rng: np.random.Generator) -> np.ndarray:
    quality = int(rng.integers(d.quality_range[0], d.quality_range[1] + 1))
    table = quantization_table(quality)
    channels, height, width = clean.shape
    pad_h = -height % BLOCK_SIZE
    pad_w = -width % BLOCK_SIZE
    # the encoder sees 8-bit samples
    padded = np.pad(np.round(clean * PIXEL_LEVELS) - DCT_LEVEL_SHIFT, ((0, 0), (0, pad_h), (0, pad_w)), mode='edge')

    bh, bw = padded.shape[1] // BLOCK_SIZE, padded.shape[2] // BLOCK_SIZE
    blocks = padded.reshape(channels, bh, BLOCK_SIZE, bw, BLOCK_SIZE).transpose(0, 1, 3, 2, 4)
    coefficients = sp_fft.dctn(blocks, axes=(-2, -1), norm='ortho')
    quantized = np.round(coefficients / table) * table
    restored = sp_fft.idctn(quantized, axes=(-2, -1), norm='ortho')
    restored = restored.transpose(0, 1, 3, 2, 4).reshape(padded.shape)[:, :height, :width]
    # decoded output is 8-bit
    return np.round(np.clip(restored + DCT_LEVEL_SHIFT, 0, PIXEL_LEVELS)) / PIXEL_LEVELS


def _rain(clean: np.ndarray, d: Degradation, rng: np.random.Generator) -> np.ndarray:
    _, height, width = clean.shape
    streaks = int(round(d.density * height * width))
    layer = np.zeros((height, width), dtype=np.float64)
    for _ in range(streaks):
        r0 = int(rng.integers(0, height))
        c0 = int(rng.integers(0, width))
        angle = np.deg2rad(rng.uniform(*d.angle_range))
        length = int(rng.integers(d.length_range[0], d.length_range[1] + 1))
        intensity = rng.uniform(*d.intensity_range)
        r1 = int(round(r0 + length * np.sin(angle)))
        c1 = int(round(c0 + length * np.cos(angle)))
        rr, cc, val = line_aa(r0, c0, r1, c1)
        inside = (rr >= 0) & (rr < height) & (cc >= 0) & (cc < width)
        rr, cc = rr[inside], cc[inside]
        layer[rr, cc] = np.maximum(layer[rr, cc], val[inside] * intensity)
    return clean + layer[None, :, :]


_GENERATORS = {
    KIND_NOISE: _add_noise,
    KIND_BLUR: _blur,
    KIND_BLOCK: _block_artifacts,
    KIND_RAIN: _rain,
}


def degrade(clean: np.ndarray, d: Degradation, sample_seed) -> np.ndarray:
    """
    Apply one degradation to a clean (3, H, W) image.

    Args:
        clean: Image with values in [0, 1]
        d: Degradation parameters
        sample_seed: Seed (int or SeedSequence) for every random choice of this sample

    Returns:
        Degraded image clamped to [0, 1], same dtype as the input

    Raises:
        ShapeError: If the image is not (channels, H, W)
        ValidationError: If the image leaves [0, 1]
    """
    if clean.ndim != 3:
        raise ShapeError(f"degrade expects a (channels, H, W) image, got shape {clean.shape}")
    if clean.size and (clean.min() < -RANGE_TOLERANCE or clean.max() > 1.0 + RANGE_TOLERANCE):
        raise ValidationError(f"clean image must lie in [0, 1], got [{clean.min()}, {clean.max()}]")
    rng = np.random.default_rng(sample_seed)
    degraded = _GENERATORS[d.kind](clean.astype(np.float64), d, rng)
    return np.clip(degraded, 0.0, 1.0).astype(clean.dtype, copy=False)
