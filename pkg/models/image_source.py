"""
Clean images and (degraded, clean) patch streams.

Images are (3, H, W) float64 arrays in [0, 1]. Procedural images are a pure function of
(seed, index); a directory source reads 8-bit RGB PNGs with Pillow.
"""

import logging
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np
from PIL import Image
from scipy import ndimage
from skimage.draw import disk, polygon, rectangle

from models.degradations import Degradation, degrade
from utils.exceptions import ValidationError

SOURCE_PROCEDURAL = 'procedural'
SOURCE_DIRECTORY = 'directory'
PATTERNS = ('gradient', 'checkerboard', 'filtered_noise', 'shapes')
IMAGE_EXTENSIONS = ('.png',)

# Seed-sequence tags keep the image, stream and eval-set random streams apart
TAG_IMAGE = 11
TAG_STREAM = 23
TAG_EVAL = 37
EVAL_IMAGE_OFFSET = 1_000_000

logger = logging.getLogger('cmc_restore.image_source')

Batch = Tuple[np.ndarray, np.ndarray]


class CleanImageSource:
    """
    Deterministic supply of clean images.

    Generated and loaded images are cached; the cache is shared by worker threads.
    """

    def __init__(self, kind: str = SOURCE_PROCEDURAL, image_size: int = 64, seed: int = 0,
                 directory: Optional[str] = None) -> None:
        if kind not in (SOURCE_PROCEDURAL, SOURCE_DIRECTORY):
            raise ValidationError(f"unknown image source '{kind}'")
        if image_size < 8:
            raise ValidationError(f"image size must be at least 8, got {image_size}")
        self.kind = kind
        self.image_size = image_size
        self.seed = seed
        self.directory = directory
        self._files: List[str] = []
        self._cache: Dict[int, np.ndarray] = {}
        self._cache_lock = threading.Lock()
        if kind == SOURCE_DIRECTORY:
            self._files = self._list_directory(directory)

    @staticmethod
    def _list_directory(directory: Optional[str]) -> List[str]:
        if not directory or not os.path.isdir(directory):
            raise ValidationError(f"image directory not found: {directory}")
        files = sorted(
            os.path.join(directory, name) for name in os.listdir(directory)
            if name.lower().endswith(IMAGE_EXTENSIONS)
        )
        if not files:
            raise ValidationError(f"no PNG images in {directory}")
        logger.info(f"found {len(files)} images in {directory}")
        return files

    def image(self, index: int) -> np.ndarray:
        with self._cache_lock:
            cached = self._cache.get(index)
        if cached is not None:
            return cached
        if self.kind == SOURCE_PROCEDURAL:
            img = self._procedural(index)
        else:
            img = self._load(self._files[index % len(self._files)])
        img.flags.writeable = False
        with self._cache_lock:
            self._cache.setdefault(index, img)
        return img

    def _load(self, path: str) -> np.ndarray:
        with Image.open(path) as handle:
            rgb = np.asarray(handle.convert('RGB'), dtype=np.float64) / 255.0
        if min(rgb.shape[:2]) < self.image_size:
            raise ValidationError(f"{path} is smaller than the configured image size {self.image_size}")
        return np.ascontiguousarray(rgb.transpose(2, 0, 1))

    def _procedural(self, index: int) -> np.ndarray:
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, TAG_IMAGE, index]))
        pattern = PATTERNS[int(rng.integers(len(PATTERNS)))]
        size = self.image_size
        if pattern == 'gradient':
            img = _gradient(rng, size)
        elif pattern == 'checkerboard':
            img = _checkerboard(rng, size)
        elif pattern == 'filtered_noise':
            img = _filtered_noise(rng, size)
        else:
            img = _shapes(rng, size)
        return np.clip(img, 0.0, 1.0)


def _gradient(rng: np.random.Generator, size: int) -> np.ndarray:
    angle = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    ramp = np.cos(angle) * xx + np.sin(angle) * yy
    ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-12)
    start, end = rng.uniform(0, 1, size=(2, 3, 1, 1))
    return start * (1 - ramp) + end * ramp


def _checkerboard(rng: np.random.Generator, size: int) -> np.ndarray:
    cell = int(rng.integers(4, 17))
    yy, xx = np.mgrid[0:size, 0:size]
    board = ((yy // cell + xx // cell) % 2).astype(np.float64)
    first, second = rng.uniform(0, 1, size=(2, 3, 1, 1))
    return first * board + second * (1 - board)


def _filtered_noise(rng: np.random.Generator, size: int) -> np.ndarray:
    sigma = rng.uniform(1.0, 4.0)
    img = ndimage.gaussian_filter(rng.normal(size=(3, size, size)), sigma=(0, sigma, sigma))
    low = img.min(axis=(1, 2), keepdims=True)
    span = np.maximum(img.max(axis=(1, 2), keepdims=True) - low, 1e-12)
    return (img - low) / span


def _shapes(rng: np.random.Generator, size: int) -> np.ndarray:
    img = np.ones((3, size, size)) * rng.uniform(0, 1, size=(3, 1, 1))
    for _ in range(int(rng.integers(3, 9))):
        color = rng.uniform(0, 1, size=3)
        shape = int(rng.integers(3))
        if shape == 0:
            rr, cc = disk(tuple(rng.integers(0, size, size=2)), rng.uniform(2, size / 4), shape=(size, size))
        elif shape == 1:
            start = rng.integers(0, size - 2, size=2)
            extent = rng.integers(2, max(3, size // 2), size=2)
            rr, cc = rectangle(tuple(start), extent=tuple(extent), shape=(size, size))
        else:
            rr, cc = polygon(rng.uniform(0, size, 3), rng.uniform(0, size, 3), shape=(size, size))
        img[:, rr, cc] = color[:, None] if np.ndim(rr) == 1 else color[:, None, None]
    return img


def _crop(img: np.ndarray, patch_size: int, rng: np.random.Generator) -> np.ndarray:
    _, height, width = img.shape
    if patch_size > min(height, width):
        raise ValidationError(f"patch size {patch_size} exceeds image size {height}x{width}")
    top = int(rng.integers(0, height - patch_size + 1))
    left = int(rng.integers(0, width - patch_size + 1))
    return img[:, top:top + patch_size, left:left + patch_size]


class PairStream:
    """
    Infinite deterministic stream of (degraded, clean) patch batches.

    batch(i) depends only on (seed, i); prefetching on worker threads returns batches in
    order, so it cannot change results.
    """

    def __init__(self, source: CleanImageSource, degradation: Degradation, patch_size: int,
                 batch_size: int = 8, seed: int = 0, pool_images: int = 64, dtype=np.float32) -> None:
        if patch_size < 1 or batch_size < 1 or pool_images < 1:
            raise ValidationError("patch_size, batch_size and pool_images must be positive")
        self.source = source
        self.degradation = degradation
        self.patch_size = patch_size
        self.batch_size = batch_size
        self.seed = seed
        self.pool_images = pool_images
        self.dtype = np.dtype(dtype)

    def batch(self, index: int) -> Batch:
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, TAG_STREAM, index]))
        degraded, clean = [], []
        for _ in range(self.batch_size):
            img = self.source.image(int(rng.integers(self.pool_images)))
            crop = _crop(img, self.patch_size, rng)
            sample_seed = np.random.SeedSequence(int(rng.integers(2 ** 63)))
            clean.append(crop)
            degraded.append(degrade(crop, self.degradation, sample_seed))
        return (np.stack(degraded).astype(self.dtype), np.stack(clean).astype(self.dtype))

    def batches(self, start: int, count: int, workers: int = 0) -> Iterator[Batch]:
        """Batches start..start+count-1 in order, optionally synthesised on a thread pool."""
        indices = range(start, start + count)
        if workers <= 0:
            for index in indices:
                yield self.batch(index)
            return
        with ThreadPoolExecutor(max_workers=workers) as pool:
            yield from pool.map(self.batch, indices)

    def __iter__(self) -> Iterator[Batch]:
        index = 0
        while True:
            yield self.batch(index)
            index += 1


def make_pair_stream(source: CleanImageSource, degradation: Degradation, patch_size: int, seed: int,
                     batch_size: int = 8, pool_images: int = 64, dtype=np.float32) -> PairStream:
    return PairStream(source, degradation, patch_size, batch_size, seed, pool_images, dtype)


@dataclass
class EvalSet:
    degraded: np.ndarray
    clean: np.ndarray

    def __len__(self) -> int:
        return int(self.clean.shape[0])


def make_eval_set(source: CleanImageSource, degradation: Degradation, count: int, seed: int,
                  patch_size: int, dtype=np.float32) -> EvalSet:
    """
    Fixed evaluation pairs under the test-time variant of the degradation.

    Eval images start at EVAL_IMAGE_OFFSET. For procedural sources that range is disjoint from
    the training pool; a directory source wraps indices modulo its file count, so eval images
    can repeat training files there.
    """
    if count < 1:
        raise ValidationError(f"eval set needs at least one image, got {count}")
    test_time = degradation.for_evaluation()
    rng = np.random.default_rng(np.random.SeedSequence([seed, TAG_EVAL]))
    degraded, clean = [], []
    for i in range(count):
        crop = _crop(source.image(EVAL_IMAGE_OFFSET + i), patch_size, rng)
        clean.append(crop)
        degraded.append(degrade(crop, test_time, np.random.SeedSequence(int(rng.integers(2 ** 63)))))
    return EvalSet(np.stack(degraded).astype(dtype), np.stack(clean).astype(dtype))
