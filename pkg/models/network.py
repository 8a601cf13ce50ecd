"""
Residual restoration network built entirely from CMC layers.

    head (3 -> C)
    B x [ h + s * conv2(relu(conv1(h))) ]
    tail (C -> 3)
    y = x + s * tail(h)        (global residual; y = tail(h) when disabled)
"""

import logging
from typing import Dict, List, Optional, Tuple

import numpy as np

from models.cmc_layer import CmcLayer
from models.continual_memory import TaskMask
from models.conv import relu_backward, relu_forward
from utils.exceptions import ProtocolError, ShapeError, ValidationError

IMAGE_CHANNELS = 3
HEAD = 'head'
TAIL = 'tail'
PARAM_SEPARATOR = '/'

logger = logging.getLogger('cmc_restore.network')


def block_layer_name(block: int, conv: int) -> str:
    return f"block{block}.conv{conv}"


class RestorationNet:
    """
    Attributes:
        channels: Feature channels C
        blocks: Number of residual blocks B
        kernel_size: Spatial kernel size n (odd)
        residual_scale: Scale s applied to every residual branch
        global_residual: Add the input to the output
        layers: Ordered list of CmcLayer (head, blocks, tail)
    """

    def __init__(
        self,
        channels: int = 8,
        blocks: int = 2,
        kernel_size: int = 3,
        capacity: int = 5,
        layer_capacities: Optional[Dict[str, int]] = None,
        residual_scale: float = 0.1,
        global_residual: bool = True,
        dtype=np.float32,
        debug_checks: bool = False,
    ) -> None:
        if channels < 1 or blocks < 0:
            raise ValidationError(f"invalid geometry: channels={channels}, blocks={blocks}")
        self.channels = channels
        self.blocks = blocks
        self.kernel_size = kernel_size
        self.residual_scale = float(residual_scale)
        self.global_residual = bool(global_residual)
        self.dtype = np.dtype(dtype)

        plan = [(HEAD, IMAGE_CHANNELS, channels)]
        for b in range(blocks):
            plan.append((block_layer_name(b, 1), channels, channels))
            plan.append((block_layer_name(b, 2), channels, channels))
        plan.append((TAIL, channels, IMAGE_CHANNELS))

        overrides = dict(layer_capacities or {})
        unknown = set(overrides) - {name for name, _, _ in plan}
        if unknown:
            raise ValidationError(f"capacity overrides for unknown layers: {sorted(unknown)}")

        self.layers: List[CmcLayer] = [
            CmcLayer(k_in, k_out, kernel_size, overrides.get(name, capacity), name=name,
                     layer_index=index, dtype=self.dtype, debug_checks=debug_checks)
            for index, (name, k_in, k_out) in enumerate(plan)
        ]
        self._by_name = {layer.name: layer for layer in self.layers}
        self._cache: Optional[Tuple] = None

    # ------------------------------------------------------------------ structure

    def layer_names(self) -> List[str]:
        return [layer.name for layer in self.layers]

    def layer(self, name: str) -> CmcLayer:
        try:
            return self._by_name[name]
        except KeyError:
            raise ValidationError(f"unknown layer '{name}', expected one of {self.layer_names()}")

    @property
    def head(self) -> CmcLayer:
        return self.layers[0]

    @property
    def tail(self) -> CmcLayer:
        return self.layers[-1]

    def _block(self, b: int) -> Tuple[CmcLayer, CmcLayer]:
        return self.layers[1 + 2 * b], self.layers[2 + 2 * b]

    @property
    def active_task_id(self) -> Optional[int]:
        return self.head.active_task_id

    @property
    def frozen_through(self) -> int:
        return self.head.memory.frozen_through

    def task_ids(self) -> List[int]:
        return sorted(self.head.task_vectors)

    def capacities(self) -> Dict[str, int]:
        return {layer.name: layer.t for layer in self.layers}

    # ------------------------------------------------------------------ task lifecycle

    def begin_task(
        self,
        task_id: int,
        fraction: float,
        global_seed: int,
        knowledge_sharing: bool = True,
        layer_fractions: Optional[Dict[str, float]] = None,
        auto_expand_rows: int = 0,
    ) -> Dict[str, TaskMask]:
        """
        Allocate masks and initialise parameters for a new task in every layer.

        A failure in any layer rolls back the layers already allocated, so the network is
        left exactly as it was.
        """
        overrides = dict(layer_fractions or {})
        unknown = set(overrides) - set(self._by_name)
        if unknown:
            raise ValidationError(f"fraction overrides for unknown layers: {sorted(unknown)}")

        masks: Dict[str, TaskMask] = {}
        try:
            for layer in self.layers:
                masks[layer.name] = layer.begin_task(
                    task_id, overrides.get(layer.name, fraction), global_seed,
                    knowledge_sharing=knowledge_sharing, auto_expand_rows=auto_expand_rows,
                )
        except Exception:
            for name in masks:
                self._by_name[name].discard_active_task()
            raise
        logger.info(f"task {task_id} allocated in {len(self.layers)} layers (sharing={knowledge_sharing})")
        return masks

    def freeze_task(self, task_id: int) -> None:
        for layer in self.layers:
            layer.freeze_task(task_id)
        self._cache = None
        logger.info(f"task {task_id} frozen")

    def discard_active_task(self) -> Optional[int]:
        discarded = None
        for layer in self.layers:
            discarded = layer.discard_active_task()
        self._cache = None
        if discarded is not None:
            logger.info(f"discarded unfrozen task {discarded}")
        return discarded

    def expand_capacity(self, extra_rows: int, layer_names: Optional[List[str]] = None) -> None:
        """Widen the named layers (all when None) by extra_rows memory rows."""
        targets = self.layers if layer_names is None else [self.layer(name) for name in layer_names]
        for layer in targets:
            layer.expand_capacity(extra_rows)

    def trainable_parameter_count(self) -> int:
        return sum(layer.trainable_parameter_count() for layer in self.layers)

    # ------------------------------------------------------------------ forward / backward

    def forward(self, x: np.ndarray, task_id: int, training: bool = False) -> np.ndarray:
        """
        Restore a batch of images (batch, 3, H, W) with the given task's kernels.

        Raises:
            ShapeError: If the input does not have 3 channels
        """
        if x.ndim != 4 or x.shape[1] != IMAGE_CHANNELS:
            raise ShapeError(f"network input must be (batch, {IMAGE_CHANNELS}, H, W), got {x.shape}")
        x = x.astype(self.dtype, copy=False)
        s = self.dtype.type(self.residual_scale)

        h = self.head.forward(x, task_id, training)
        pre_activations = []
        for b in range(self.blocks):
            conv1, conv2 = self._block(b)
            pre = conv1.forward(h, task_id, training)
            pre_activations.append(pre)
            h = h + s * conv2.forward(relu_forward(pre), task_id, training)
        out = self.tail.forward(h, task_id, training)
        y = x + s * out if self.global_residual else out

        if training:
            self._cache = (task_id, pre_activations)
        return y

    def backward(self, grad_output: np.ndarray) -> np.ndarray:
        """Back-propagate through the last training forward; fills every layer's grads."""
        if self._cache is None:
            raise ProtocolError("backward called without a training forward")
        _, pre_activations = self._cache
        s = self.dtype.type(self.residual_scale)

        grad_x = grad_output if self.global_residual else np.zeros_like(grad_output)
        grad_tail = s * grad_output if self.global_residual else grad_output
        grad_h = self.tail.backward_masked(grad_tail)
        for b in reversed(range(self.blocks)):
            conv1, conv2 = self._block(b)
            grad_act = conv2.backward_masked(s * grad_h)
            grad_pre = relu_backward(grad_act, pre_activations[b])
            grad_h = grad_h + conv1.backward_masked(grad_pre)
        return grad_x + self.head.backward_masked(grad_h)

    # ------------------------------------------------------------------ optimizer view

    def gather_active(self) -> Dict[str, np.ndarray]:
        """Active task parameters of every layer, keyed '<layer>/<param>'."""
        params = {}
        for layer in self.layers:
            for key, value in layer.gather_active().items():
                params[f"{layer.name}{PARAM_SEPARATOR}{key}"] = value
        return params

    def write_active(self, params: Dict[str, np.ndarray]) -> None:
        for layer in self.layers:
            prefix = f"{layer.name}{PARAM_SEPARATOR}"
            layer.write_active({k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)})

    def active_gradients(self) -> Dict[str, np.ndarray]:
        grads = {}
        for layer in self.layers:
            if not layer.grads:
                raise ProtocolError(f"layer '{layer.name}' has no gradients; run backward first")
            for key, value in layer.grads.items():
                grads[f"{layer.name}{PARAM_SEPARATOR}{key}"] = value
        return grads

    def __repr__(self) -> str:
        return (f"RestorationNet(channels={self.channels}, blocks={self.blocks}, n={self.kernel_size}, "
                f"capacities={self.capacities()}, tasks={self.task_ids()})")
