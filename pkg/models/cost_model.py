"""
Closed-form cost of one convolution layer under different growth strategies.

    plain          the base k_in -> k_out, n x n layer
    type1(n')      kernel enlarged to n' x n'
    type2(L)       L extra layers of the base shape stacked after it
    cmc(t)         CMC layer with t memory rows; the kernel stays n x n
"""

from dataclasses import dataclass
from typing import Optional, Tuple

from utils.exceptions import ValidationError

STRATEGY_PLAIN = 'plain'
STRATEGY_TYPE1 = 'type1'
STRATEGY_TYPE2 = 'type2'
STRATEGY_CMC = 'cmc'
STRATEGIES = (STRATEGY_PLAIN, STRATEGY_TYPE1, STRATEGY_TYPE2, STRATEGY_CMC)

DEFAULT_CMC_BASE_T = 5
GIGA = 1e9


@dataclass(frozen=True)
class LayerCostModel:
    """
    Geometry of the base layer plus the growth strategy.

    param is n' for type1, the number of added layers for type2 and t for cmc.
    """
    k_in: int
    k_out: int
    n: int
    height: int
    width: int
    strategy: str = STRATEGY_PLAIN
    param: Optional[int] = None
    cmc_base_t: int = DEFAULT_CMC_BASE_T
    itemsize: int = 4

    def __post_init__(self) -> None:
        if min(self.k_in, self.k_out, self.n, self.height, self.width) < 1:
            raise ValidationError(f"layer dimensions must be positive, got {self}")
        if self.strategy not in STRATEGIES:
            raise ValidationError(f"unknown strategy '{self.strategy}', expected one of {STRATEGIES}")
        if self.strategy != STRATEGY_PLAIN and (self.param is None or self.param < 1):
            raise ValidationError(f"strategy '{self.strategy}' needs a positive parameter, got {self.param}")
        if self.strategy == STRATEGY_TYPE2 and self.k_in != self.k_out:
            raise ValidationError("type2 stacking needs k_in == k_out")

    @property
    def label(self) -> str:
        if self.strategy == STRATEGY_PLAIN:
            return f"plain {self.n}x{self.n}"
        if self.strategy == STRATEGY_TYPE1:
            return f"type1 {self.param}x{self.param}"
        if self.strategy == STRATEGY_TYPE2:
            return f"type2 +{self.param}"
        return f"cmc-{self.param}"

    @property
    def m(self) -> int:
        return self.k_in * self.k_out * self.n * self.n

    @property
    def kernel_size(self) -> int:
        return self.param if self.strategy == STRATEGY_TYPE1 else self.n

    @property
    def depth(self) -> int:
        return 1 + self.param if self.strategy == STRATEGY_TYPE2 else 1


@dataclass
class BenchReport:
    label: str
    trainable_params: int
    kernel_params: int
    macs: int
    estimation_macs: int
    trainable_ratio: float
    kernel_ratio: float
    mac_ratio: float
    working_set_bytes: int
    median_ms: Optional[float] = None
    time_ratio: Optional[float] = None
    rss_bytes: Optional[int] = None

    @property
    def gmac(self) -> float:
        return self.macs / GIGA


def conv_macs(k_in: int, k_out: int, n: int, height: int, width: int) -> int:
    """Multiply-accumulates of one same-padded stride-1 convolution."""
    return k_out * k_in * n * n * height * width


def model_cost(model: LayerCostModel) -> BenchReport:
    """
    Analytic parameters, MACs and working set.

    Kernel and MAC ratios are against the plain layer. The trainable ratio of a CMC layer is
    against CMC with cmc_base_t rows, of every other strategy against the plain layer.
    Kernel estimation (t*m MACs) happens once per weight update and is reported separately.
    """
    base_kernel = model.m
    base_macs = conv_macs(model.k_in, model.k_out, model.n, model.height, model.width)
    kernel_params = model.depth * model.k_in * model.k_out * model.kernel_size ** 2
    macs = model.depth * conv_macs(model.k_in, model.k_out, model.kernel_size, model.height, model.width)

    if model.strategy == STRATEGY_CMC:
        trainable = model.param * model.m
        estimation = model.param * model.m
        trainable_ratio = model.param / model.cmc_base_t
    else:
        trainable = kernel_params
        estimation = 0
        trainable_ratio = trainable / base_kernel

    activations = (model.k_in + model.depth * model.k_out) * model.height * model.width
    stored = kernel_params + (trainable if model.strategy == STRATEGY_CMC else 0)
    return BenchReport(
        label=model.label,
        trainable_params=trainable,
        kernel_params=kernel_params,
        macs=macs,
        estimation_macs=estimation,
        trainable_ratio=trainable_ratio,
        kernel_ratio=kernel_params / base_kernel,
        mac_ratio=macs / base_macs,
        working_set_bytes=(activations + stored) * model.itemsize,
    )


def parse_strategy(text: str) -> Tuple[str, Optional[int]]:
    """'plain', 'type1:6', 'type2:1', 'cmc:20' -> (strategy, param)."""
    name, _, value = text.strip().partition(':')
    if name not in STRATEGIES:
        raise ValidationError(f"unknown strategy '{name}', expected one of {STRATEGIES}")
    if name == STRATEGY_PLAIN:
        if value:
            raise ValidationError("strategy 'plain' takes no parameter")
        return name, None
    try:
        param = int(value)
    except ValueError:
        raise ValidationError(f"strategy '{name}' needs an integer parameter, e.g. '{name}:2', got '{text}'")
    return name, param
