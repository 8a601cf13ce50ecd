"""
Convolution layer whose kernel is estimated from the continual memory.

For task n the kernel is

    K_n = sum_{i<n} T_i . (M ⊙ H_i)  +  T_n . (M ⊙ H_n)

reshaped to (k_out, k_in, n, n). The first sum (K_old) is built from frozen parameters and
carries no gradient; it is dropped entirely when knowledge sharing is off for the task.
"""

import logging
import math
from typing import Dict, Optional, Tuple

import numpy as np

from models.continual_memory import ContinualMemory, TaskMask, TaskVector, allocate_mask, derive_seed
from models.conv import conv2d_backward, conv2d_forward
from utils.exceptions import CapacityExhausted, FrozenParameterError, ProtocolError, ValidationError

# Composed-kernel variance is matched to Kaiming fan-in: 2 / (k_in * n * n)
KAIMING_GAIN = 2.0
TASK_VECTOR_RELATIVE_STD = 0.1

PARAM_VECTOR = 'vector'
PARAM_MEMORY = 'memory'
PARAM_BIAS = 'bias'

logger = logging.getLogger('cmc_restore.cmc_layer')


class CmcLayer:
    """
    One convolution layer backed by a ContinualMemory.

    Attributes:
        name: Layer name, e.g. 'head' or 'block0.conv1'
        layer_index: Position in the network, used for seed derivation
        geometry: (k_in, k_out, n)
        memory: The layer knowledge base
        task_vectors: task_id -> TaskVector
        biases: task_id -> per-output-channel bias
        knowledge_sharing: task_id -> whether K_old is part of that task's kernel
        cached_old_kernel: K_old of the active task, flat, when sharing is on
    """

    def __init__(
        self,
        k_in: int,
        k_out: int,
        kernel_size: int,
        capacity: int,
        name: str = 'layer',
        layer_index: int = 0,
        dtype=np.float32,
        debug_checks: bool = False,
    ) -> None:
        if kernel_size < 1 or kernel_size % 2 == 0:
            raise ValidationError(f"layer '{name}': kernel size must be a positive odd integer, got {kernel_size}")
        if k_in < 1 or k_out < 1:
            raise ValidationError(f"layer '{name}': channel counts must be positive, got k_in={k_in}, k_out={k_out}")
        self.name = name
        self.layer_index = layer_index
        self.geometry = (int(k_in), int(k_out), int(kernel_size))
        self.dtype = np.dtype(dtype)
        self.memory = ContinualMemory(capacity, k_in * k_out * kernel_size * kernel_size, self.dtype, name)
        self.task_vectors: Dict[int, TaskVector] = {}
        self.biases: Dict[int, np.ndarray] = {}
        self.knowledge_sharing: Dict[int, bool] = {}
        self.cached_old_kernel: Optional[np.ndarray] = None
        self.debug_checks = debug_checks
        self.grads: Dict[str, np.ndarray] = {}
        self._cache: Optional[Tuple[int, np.ndarray, np.ndarray]] = None

    @property
    def t(self) -> int:
        return self.memory.t

    @property
    def m(self) -> int:
        return self.memory.m

    @property
    def kernel_shape(self) -> Tuple[int, int, int, int]:
        k_in, k_out, n = self.geometry
        return k_out, k_in, n, n

    @property
    def active_task_id(self) -> Optional[int]:
        return self.memory.active_task_id

    # ------------------------------------------------------------------ lifecycle

    def begin_task(
        self,
        task_id: int,
        fraction: float,
        global_seed: int,
        knowledge_sharing: bool = True,
        auto_expand_rows: int = 0,
    ) -> TaskMask:
        """
        Allocate the task's mask, initialise its parameters and cache K_old.

        Raises:
            CapacityExhausted: If the layer is full and auto expansion is off
        """
        seed = derive_seed(global_seed, self.layer_index, task_id, 0)
        try:
            mask = allocate_mask(self.memory, task_id, fraction, seed)
        except CapacityExhausted as exc:
            if auto_expand_rows <= 0:
                raise
            logger.warning(f"{exc}; expanding by {auto_expand_rows} rows and retrying")
            self.expand_capacity(auto_expand_rows)
            mask = allocate_mask(self.memory, task_id, fraction, seed)

        self._initialise_task(task_id, mask, fraction, global_seed)
        self.knowledge_sharing[task_id] = bool(knowledge_sharing)
        self.cached_old_kernel = self._old_kernel(task_id) if knowledge_sharing else None
        return mask

    def _initialise_task(self, task_id: int, mask: TaskMask, fraction: float, global_seed: int) -> None:
        k_in, k_out, n = self.geometry
        rng = np.random.default_rng(derive_seed(global_seed, self.layer_index, task_id, 1))
        target_variance = KAIMING_GAIN / (k_in * n * n)
        mean_t = 1.0 / (fraction * self.t)
        std_t = TASK_VECTOR_RELATIVE_STD * mean_t
        std_m = math.sqrt(target_variance * fraction * self.t / (1.0 + TASK_VECTOR_RELATIVE_STD ** 2))

        self.memory.write(task_id, rng.normal(0.0, std_m, size=mask.popcount).astype(self.dtype))
        self.task_vectors[task_id] = TaskVector(task_id, rng.normal(mean_t, std_t, size=self.t).astype(self.dtype))
        self.biases[task_id] = np.zeros(k_out, dtype=self.dtype)

    def freeze_task(self, task_id: int) -> None:
        """
        Make the task's vector, bias and memory region immutable.

        Raises:
            ProtocolError: If task_id is not the next task to freeze
        """
        self.memory.freeze(task_id)
        self.task_vectors[task_id].freeze()
        self.biases[task_id].flags.writeable = False
        self.cached_old_kernel = None
        self._cache = None
        self.grads = {}

    def discard_active_task(self) -> Optional[int]:
        """Forget an allocated but unfrozen task; returns its id."""
        task_id = self.active_task_id
        if task_id is None:
            return None
        self.memory.remove(task_id)
        self.task_vectors.pop(task_id, None)
        self.biases.pop(task_id, None)
        self.knowledge_sharing.pop(task_id, None)
        self.cached_old_kernel = None
        self._cache = None
        self.grads = {}
        return task_id

    def expand_capacity(self, extra_rows: int) -> None:
        """
        Grow the memory to t + extra_rows rows; every existing kernel stays bit-identical.

        Raises:
            ProtocolError: If a task is mid-training
        """
        if extra_rows == 0:
            return
        if self.active_task_id is not None:
            raise ProtocolError(f"layer '{self.name}': cannot expand while task {self.active_task_id} is active")
        self.memory.expand(extra_rows)
        for vector in self.task_vectors.values():
            vector.padded(extra_rows)
        logger.info(f"layer '{self.name}' expanded to t={self.t}")

    # ------------------------------------------------------------------ kernels

    def _task_term(self, task_id: int) -> np.ndarray:
        """T_i . (M ⊙ H_i), accumulated row by row so zero-padded rows add exact zeros."""
        vector = self.task_vectors[task_id].values
        masked = self.memory.masked(task_id)
        term = np.zeros(self.m, dtype=self.dtype)
        for row in range(self.t):
            term = term + vector[row] * masked[row]
        return term

    def _old_kernel(self, task_id: int) -> np.ndarray:
        old = np.zeros(self.m, dtype=self.dtype)
        for previous in sorted(self.task_vectors):
            if previous < task_id:
                old = old + self._task_term(previous)
        return old

    def _check_task(self, task_id: int) -> None:
        if task_id not in self.task_vectors:
            raise ProtocolError(f"layer '{self.name}' has no task {task_id}")
        if self.memory.frozen_through < task_id - 1:
            raise ProtocolError(
                f"layer '{self.name}': task {task_id} needs tasks 1..{task_id - 1} frozen, "
                f"frozen through {self.memory.frozen_through}"
            )

    def old_kernel(self, task_id: int) -> np.ndarray:
        """Freshly computed K_old for a task, shaped like the kernel."""
        self._check_task(task_id)
        return self._old_kernel(task_id).reshape(self.kernel_shape)

    def estimate_kernel(self, task_id: int) -> np.ndarray:
        """
        Kernel of one task, shape (k_out, k_in, n, n).

        Raises:
            ProtocolError: Unknown task or unfrozen predecessor
        """
        self._check_task(task_id)
        term = self._task_term(task_id)
        if not self.knowledge_sharing[task_id]:
            return term.reshape(self.kernel_shape)

        if task_id == self.active_task_id and self.cached_old_kernel is not None:
            old = self.cached_old_kernel
            if self.debug_checks and not np.array_equal(old, self._old_kernel(task_id)):
                raise ProtocolError(f"layer '{self.name}': cached K_old diverged from recomputation")
        else:
            old = self._old_kernel(task_id)
        return (old + term).reshape(self.kernel_shape)

    # ------------------------------------------------------------------ forward / backward

    def forward(self, x: np.ndarray, task_id: int, training: bool = False) -> np.ndarray:
        """
        Convolve with the task's estimated kernel and bias.

        With training=True the task must be the active one; the input and kernel are kept
        for backward_masked.
        """
        kernel = self.estimate_kernel(task_id)
        if training:
            if task_id != self.active_task_id:
                raise ProtocolError(f"layer '{self.name}': task {task_id} is not the active task")
            self._cache = (task_id, x, kernel)
        return conv2d_forward(x, kernel, self.biases[task_id])

    def project_kernel_gradient(self, task_id: int, grad_kernel: np.ndarray) -> Dict[str, np.ndarray]:
        """Chain rule from dL/dK to the task vector and the task's masked memory entries."""
        flat = grad_kernel.reshape(-1)
        vector = self.task_vectors[task_id].values
        return {
            PARAM_VECTOR: self.memory.masked(task_id) @ flat,
            PARAM_MEMORY: np.outer(vector, flat)[self.memory.masks[task_id].bits],
        }

    def memory_gradient_dense(self, task_id: int, grad_kernel: np.ndarray) -> np.ndarray:
        """dL/dM as a full (t, m) matrix; zero outside the task's mask."""
        dense = np.zeros_like(self.memory.weights)
        bits = self.memory.masks[task_id].bits
        dense[bits] = self.project_kernel_gradient(task_id, grad_kernel)[PARAM_MEMORY]
        return dense

    def backward_masked(self, grad_output: np.ndarray) -> np.ndarray:
        """
        Back-propagate through the last training forward.

        Fills self.grads with gradients of the active task's vector, bias and masked memory
        entries and returns the gradient with respect to the layer input. Frozen parameters
        receive nothing.
        """
        if self._cache is None:
            raise ProtocolError(f"layer '{self.name}': backward called without a training forward")
        task_id, x, kernel = self._cache
        grad_input, grad_kernel, grad_bias = conv2d_backward(x, kernel, grad_output)
        grads = self.project_kernel_gradient(task_id, grad_kernel)
        grads[PARAM_BIAS] = grad_bias
        self.grads = {k: v.astype(self.dtype, copy=False) for k, v in grads.items()}
        return grad_input

    # ------------------------------------------------------------------ optimizer view

    def gather_active(self) -> Dict[str, np.ndarray]:
        task_id = self._require_active()
        return {
            PARAM_VECTOR: self.task_vectors[task_id].values.copy(),
            PARAM_MEMORY: self.memory.values(task_id),
            PARAM_BIAS: self.biases[task_id].copy(),
        }

    def write_active(self, values: Dict[str, np.ndarray]) -> None:
        """
        Write optimizer results back into the active task's parameters.

        Raises:
            FrozenParameterError: If no task is active
        """
        task_id = self._require_active()
        self.task_vectors[task_id].write(values[PARAM_VECTOR])
        self.memory.write(task_id, values[PARAM_MEMORY])
        bias = self.biases[task_id]
        if values[PARAM_BIAS].shape != bias.shape:
            raise ValidationError(f"bias expects shape {bias.shape}, got {values[PARAM_BIAS].shape}")
        bias[...] = values[PARAM_BIAS]

    def _require_active(self) -> int:
        task_id = self.active_task_id
        if task_id is None:
            raise FrozenParameterError(f"layer '{self.name}' has no active task; every task is frozen")
        return task_id

    # ------------------------------------------------------------------ accounting

    def trainable_parameter_count(self) -> int:
        """Memory entries plus all task vectors and biases."""
        vectors = sum(len(v) for v in self.task_vectors.values())
        biases = sum(b.size for b in self.biases.values())
        return self.memory.size + vectors + biases

    def __repr__(self) -> str:
        k_in, k_out, n = self.geometry
        return (f"CmcLayer(name={self.name!r}, k_in={k_in}, k_out={k_out}, n={n}, t={self.t}, "
                f"tasks={sorted(self.task_vectors)}, frozen_through={self.memory.frozen_through})")
