import logging
import time
from typing import List, Optional, Sequence

import numpy as np

from models.cmc_layer import CmcLayer
from models.conv import conv2d_forward
from models.cost_model import (
    STRATEGY_CMC, STRATEGY_PLAIN,
    BenchReport, LayerCostModel, model_cost, parse_strategy,
)
from utils.exceptions import AppError, BenchmarkError
from utils.logging import log_exception
from utils.monitoring import performance_monitor

# Constants
DEFAULT_SHAPE = (64, 64, 3, 1000, 1000)  # k_in, k_out, n, H, W
DEFAULT_STRATEGIES = ('plain', 'type1:4', 'type1:6', 'type2:1', 'type2:3', 'cmc:5', 'cmc:10', 'cmc:20')
DEFAULT_TIME_SIZE = 64
DEFAULT_REPEATS = 5
DEFAULT_WARMUP = 1
BENCH_SEED = 0
CMC_BENCH_FRACTION = 0.2
NS_PER_MS = 1e6

logger = logging.getLogger('cmc_restore.bench')


class BenchTiming:
    """Wall-clock samples of one benchmark, in milliseconds."""

    def __init__(self, samples_ms: List[float]):
        self.samples_ms = samples_ms

    @property
    def median_ms(self) -> float:
        return float(np.median(self.samples_ms))


class BenchController:
    """
    Times inference of each growth strategy at a desk-scale spatial size.

    The CMC path materialises the kernel of a frozen task once and then times the plain
    convolution, as a deployed network would.
    """

    def __init__(self, warmup: int = DEFAULT_WARMUP, seed: int = BENCH_SEED):
        self.warmup = warmup
        self.seed = seed

    def _kernels(self, model: LayerCostModel, rng: np.random.Generator) -> List[np.ndarray]:
        if model.strategy == STRATEGY_CMC:
            layer = CmcLayer(model.k_in, model.k_out, model.n, capacity=model.param, name=model.label)
            layer.begin_task(1, CMC_BENCH_FRACTION, self.seed)
            layer.freeze_task(1)
            return [layer.estimate_kernel(1)]
        n = model.kernel_size
        return [
            rng.standard_normal((model.k_out, model.k_in, n, n)).astype(np.float32)
            for _ in range(model.depth)
        ]

    def bench_forward(self, model: LayerCostModel, repeats: int = DEFAULT_REPEATS,
                      time_size: int = DEFAULT_TIME_SIZE) -> BenchTiming:
        """
        Median wall time of the layer's forward pass over repeats, after warmup runs.

        Raises:
            BenchmarkError: Invalid repeat count or allocation failure
        """
        if repeats < 1:
            raise BenchmarkError(f"repeats must be >= 1, got {repeats}")
        if time_size < 1:
            raise BenchmarkError(f"time size must be >= 1, got {time_size}")
        rng = np.random.default_rng(self.seed)
        try:
            x = rng.standard_normal((1, model.k_in, time_size, time_size)).astype(np.float32)
            kernels = self._kernels(model, rng)
        except MemoryError as e:
            log_exception(e, {'model': model.label})
            raise BenchmarkError(f"not enough memory to set up {model.label} at {time_size}x{time_size}")

        def run():
            out = x
            for kernel in kernels:
                out = conv2d_forward(out, kernel, allow_even=True)
            return out

        samples = []
        try:
            for i in range(self.warmup + repeats):
                start = time.perf_counter_ns()
                run()
                elapsed = (time.perf_counter_ns() - start) / NS_PER_MS
                if i >= self.warmup:
                    samples.append(elapsed)
        except MemoryError as e:
            log_exception(e, {'model': model.label})
            raise BenchmarkError(f"out of memory while timing {model.label}")
        for sample in samples:
            performance_monitor.record_timing(f"bench_{model.label}", sample / 1e3)
        return BenchTiming(samples)

    def bench_table(self, models: Sequence[LayerCostModel], repeats: int = DEFAULT_REPEATS,
                    time_size: Optional[int] = DEFAULT_TIME_SIZE) -> List[BenchReport]:
        """
        Analytic costs for every model plus measured timings when time_size is set.

        Time ratios are against the first plain model in the list.
        """
        rows = []
        try:
            for model in models:
                report = model_cost(model)
                if time_size:
                    report.median_ms = self.bench_forward(model, repeats, time_size).median_ms
                    report.rss_bytes = performance_monitor.sample_rss()
                rows.append(report)
                logger.info(f"{report.label}: {report.gmac:.3f} GMac, median {report.median_ms} ms")
        except AppError:
            raise
        except Exception as e:
            log_exception(e)
            raise BenchmarkError(f"benchmark failed: {e}")

        base = next((r for r, m in zip(rows, models) if m.strategy == STRATEGY_PLAIN), None)
        if base is not None and base.median_ms:
            for report in rows:
                if report.median_ms is not None:
                    report.time_ratio = report.median_ms / base.median_ms
        return rows


def build_models(shape: Sequence[int], strategies: Sequence[str]) -> List[LayerCostModel]:
    """LayerCostModels for one base shape (k_in, k_out, n, H, W) and strategy strings."""
    if len(shape) != 5:
        raise BenchmarkError(f"shape must be k_in,k_out,n,H,W, got {list(shape)}")
    k_in, k_out, n, height, width = shape
    models = []
    for text in strategies:
        strategy, param = parse_strategy(text)
        models.append(LayerCostModel(k_in, k_out, n, height, width, strategy, param))
    return models

