"""
Continual memory of one convolution layer.

The memory is a (t, m) weight matrix shared by every task the layer has learned. Each task
owns a random, pairwise-disjoint subset of the entries (its mask); entries owned by frozen
tasks never change again and entries owned by nobody are free for future tasks.
"""

import logging
from typing import Dict, List, Optional, Union

import numpy as np

from utils.exceptions import CapacityExhausted, FrozenParameterError, ProtocolError, ValidationError

logger = logging.getLogger('cmc_restore.continual_memory')

SeedLike = Union[int, np.random.SeedSequence, np.random.Generator]


def derive_seed(global_seed: int, layer_index: int, task_id: int, stream: int = 0) -> np.random.SeedSequence:
    """Per-(layer, task) seed; stream 0 drives mask sampling, stream 1 initialisation."""
    return np.random.SeedSequence([int(global_seed), int(layer_index), int(task_id), int(stream)])


def requested_count(fraction: float, total: int) -> int:
    """fraction * total rounded to the nearest integer, ties to even."""
    return int(np.rint(fraction * total))


class TaskMask:
    """Binary (t, m) selection of memory entries owned by one task."""

    def __init__(self, task_id: int, bits: np.ndarray, fraction: float) -> None:
        self.task_id = int(task_id)
        self.bits = np.asarray(bits, dtype=bool)
        self.fraction = float(fraction)

    @property
    def popcount(self) -> int:
        return int(np.count_nonzero(self.bits))

    def padded(self, extra_rows: int) -> 'TaskMask':
        extra = np.zeros((extra_rows, self.bits.shape[1]), dtype=bool)
        return TaskMask(self.task_id, np.vstack([self.bits, extra]), self.fraction)

    def __repr__(self) -> str:
        return f"TaskMask(task_id={self.task_id}, popcount={self.popcount}, shape={self.bits.shape})"


class TaskVector:
    """Length-t task-specific weights; read-only once the task is frozen."""

    def __init__(self, task_id: int, values: np.ndarray) -> None:
        self.task_id = int(task_id)
        self.values = np.array(values)
        self.frozen = False

    def freeze(self) -> None:
        self.frozen = True
        self.values.flags.writeable = False

    def write(self, values: np.ndarray) -> None:
        if self.frozen:
            raise FrozenParameterError(f"task vector of task {self.task_id} is frozen")
        if values.shape != self.values.shape:
            raise ValidationError(f"task vector expects shape {self.values.shape}, got {values.shape}")
        self.values[...] = values

    def padded(self, extra_rows: int) -> None:
        """Zero-pad in place to length t + extra_rows, keeping the frozen flag."""
        padded = np.concatenate([self.values, np.zeros(extra_rows, dtype=self.values.dtype)])
        self.values = padded
        if self.frozen:
            self.values.flags.writeable = False

    def __len__(self) -> int:
        return int(self.values.shape[0])


class ContinualMemory:
    """
    The layer knowledge base: weights, per-task masks and the freeze boundary.

    Attributes:
        name: Layer name used in error messages
        weights: (t, m) matrix
        masks: task_id -> TaskMask, in allocation order
        frozen_through: Highest frozen task id (0 when nothing is frozen)
    """

    def __init__(self, rows: int, columns: int, dtype=np.float32, name: str = 'layer') -> None:
        if rows < 1 or columns < 1:
            raise ValidationError(f"memory dimensions must be positive, got t={rows}, m={columns}")
        self.name = name
        self.weights = np.zeros((rows, columns), dtype=dtype)
        self.masks: Dict[int, TaskMask] = {}
        self.frozen_through = 0

    @property
    def t(self) -> int:
        return int(self.weights.shape[0])

    @property
    def m(self) -> int:
        return int(self.weights.shape[1])

    @property
    def size(self) -> int:
        return self.t * self.m

    @property
    def active_task_id(self) -> Optional[int]:
        """Allocated but not yet frozen task, if any."""
        pending = [task_id for task_id in self.masks if task_id > self.frozen_through]
        return pending[0] if pending else None

    def task_ids(self) -> List[int]:
        return sorted(self.masks)

    def used_mask(self) -> np.ndarray:
        used = np.zeros(self.weights.shape, dtype=bool)
        for mask in self.masks.values():
            used |= mask.bits
        return used

    def free_mask(self) -> np.ndarray:
        return ~self.used_mask()

    def free_count(self) -> int:
        return self.size - sum(mask.popcount for mask in self.masks.values())

    def owner_map(self) -> np.ndarray:
        """Task id owning each entry, 0 for free entries."""
        owners = np.zeros(self.weights.shape, dtype=np.int32)
        for task_id, mask in self.masks.items():
            owners[mask.bits] = task_id
        return owners

    def register(self, mask: TaskMask) -> None:
        if mask.bits.shape != self.weights.shape:
            raise ValidationError(f"mask shape {mask.bits.shape} does not match memory {self.weights.shape}")
        if mask.task_id in self.masks:
            raise ProtocolError(f"layer '{self.name}' already has a mask for task {mask.task_id}")
        if np.any(mask.bits & self.used_mask()):
            raise ProtocolError(f"mask of task {mask.task_id} overlaps an existing mask in layer '{self.name}'")
        self.masks[mask.task_id] = mask

    def remove(self, task_id: int) -> None:
        """Drop an unfrozen task's mask; its entries become free again."""
        if task_id <= self.frozen_through:
            raise FrozenParameterError(f"task {task_id} is frozen in layer '{self.name}' and cannot be removed")
        self.masks.pop(task_id, None)

    def masked(self, task_id: int) -> np.ndarray:
        """M ⊙ H for one task; entries outside the mask are exactly zero."""
        return np.where(self.masks[task_id].bits, self.weights, 0).astype(self.weights.dtype, copy=False)

    def values(self, task_id: int) -> np.ndarray:
        """Masked entries of one task in row-major mask order (a copy)."""
        return self.weights[self.masks[task_id].bits]

    def write(self, task_id: int, values: np.ndarray) -> None:
        if task_id not in self.masks:
            raise ProtocolError(f"layer '{self.name}' has no mask for task {task_id}")
        if task_id <= self.frozen_through:
            raise FrozenParameterError(f"memory region of task {task_id} in layer '{self.name}' is frozen")
        bits = self.masks[task_id].bits
        if values.shape != (int(np.count_nonzero(bits)),):
            raise ValidationError(f"expected {np.count_nonzero(bits)} values for task {task_id}, got shape {values.shape}")
        self.weights[bits] = values

    def freeze(self, task_id: int) -> None:
        if task_id != self.frozen_through + 1:
            raise ProtocolError(
                f"layer '{self.name}': cannot freeze task {task_id}, next task to freeze is {self.frozen_through + 1}"
            )
        if task_id not in self.masks:
            raise ProtocolError(f"layer '{self.name}' has no mask for task {task_id}")
        self.frozen_through = task_id

    def expand(self, extra_rows: int) -> None:
        """Append free rows; existing masks are zero-padded."""
        if extra_rows < 0:
            raise ValidationError(f"extra_rows must be non-negative, got {extra_rows}")
        if extra_rows == 0:
            return
        new_rows = np.zeros((extra_rows, self.m), dtype=self.weights.dtype)
        self.weights = np.vstack([self.weights, new_rows])
        self.masks = {task_id: mask.padded(extra_rows) for task_id, mask in self.masks.items()}


def allocate_mask(memory: ContinualMemory, task_id: int, fraction: float, rng_seed: SeedLike) -> TaskMask:
    """
    Sample a mask uniformly without replacement from the free entries and register it.

    Raises:
        ValidationError: If fraction is outside (0, 1]
        ProtocolError: If task_id is not the next task or another task is still active
        CapacityExhausted: If too few free entries remain
    """
    if not 0.0 < fraction <= 1.0:
        raise ValidationError(f"mask fraction must be in (0, 1], got {fraction}")
    if memory.active_task_id is not None:
        raise ProtocolError(
            f"layer '{memory.name}': task {memory.active_task_id} is still active, freeze it before allocating task {task_id}"
        )
    if task_id != memory.frozen_through + 1:
        raise ProtocolError(
            f"layer '{memory.name}': next task id is {memory.frozen_through + 1}, got {task_id}"
        )

    count = requested_count(fraction, memory.size)
    free = memory.free_mask().ravel()
    free_total = int(np.count_nonzero(free))
    if count > free_total:
        raise CapacityExhausted(memory.name, count, free_total, memory.size)
    if count == 0:
        logger.warning(f"layer '{memory.name}': fraction {fraction} of {memory.size} rounds to zero entries for task {task_id}")

    rng = np.random.default_rng(rng_seed)
    chosen = rng.choice(np.flatnonzero(free), size=count, replace=False)
    bits = np.zeros(memory.size, dtype=bool)
    bits[chosen] = True
    mask = TaskMask(task_id, bits.reshape(memory.weights.shape), fraction)
    memory.register(mask)
    logger.debug(f"layer '{memory.name}': task {task_id} allocated {count} entries, {memory.free_count()} free")
    return mask
