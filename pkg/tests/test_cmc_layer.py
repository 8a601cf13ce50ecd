"""Tests for kernel estimation, freezing, knowledge sharing and capacity expansion of one layer."""

import os

import numpy as np
import pytest

from models.cmc_layer import PARAM_BIAS, PARAM_MEMORY, PARAM_VECTOR, CmcLayer
from models.continual_memory import requested_count
from models.conv import conv2d_forward
from models.gradcheck import finite_diff_check
from tests.conftest import flatten, unflatten
from utils.exceptions import CapacityExhausted, FrozenParameterError, ProtocolError, ValidationError


def perturb_active(layer, rng, scale=0.1):
    params = layer.gather_active()
    layer.write_active({k: (v + scale * rng.standard_normal(v.shape)).astype(v.dtype) for k, v in params.items()})


def test_kernel_shape_and_memory_geometry():
    layer = CmcLayer(3, 4, 3, capacity=5, name='head')
    assert layer.kernel_shape == (4, 3, 3, 3)
    assert (layer.t, layer.m) == (5, 108)
    layer.begin_task(1, 0.2, global_seed=0)
    assert layer.estimate_kernel(1).shape == (4, 3, 3, 3)


def test_even_kernel_rejected():
    with pytest.raises(ValidationError):
        CmcLayer(3, 4, 4, capacity=5)


def test_first_task_kernel_is_its_own_term():
    layer = CmcLayer(2, 2, 3, capacity=4, dtype=np.float64)
    layer.begin_task(1, 0.25, global_seed=1)
    vector = layer.task_vectors[1].values
    expected = (vector[:, None] * layer.memory.masked(1)).sum(axis=0)
    np.testing.assert_allclose(layer.estimate_kernel(1).ravel(), expected, rtol=1e-12, atol=1e-15)


def test_initialisation_statistics():
    layer = CmcLayer(32, 32, 3, capacity=5, dtype=np.float64)
    layer.begin_task(1, 0.2, global_seed=0)
    vector = layer.task_vectors[1].values
    assert vector.mean() == pytest.approx(1.0 / (0.2 * 5), rel=0.25)
    np.testing.assert_array_equal(layer.biases[1], 0.0)
    memory_variance = 2.0 / (32 * 9) * (0.2 * 5) / 1.01
    # each entry is owned with probability 0.2; the composed variance follows the drawn vector
    expected = 0.2 * float(np.sum(vector ** 2)) * memory_variance
    assert layer.estimate_kernel(1).var() == pytest.approx(expected, rel=0.15)
    assert expected == pytest.approx(2.0 / (32 * 9), rel=0.5)


def test_initialisation_is_seeded():
    first, second = CmcLayer(3, 4, 3, 5, layer_index=2), CmcLayer(3, 4, 3, 5, layer_index=2)
    first.begin_task(1, 0.2, global_seed=9)
    second.begin_task(1, 0.2, global_seed=9)
    np.testing.assert_array_equal(first.memory.weights, second.memory.weights)
    np.testing.assert_array_equal(first.task_vectors[1].values, second.task_vectors[1].values)
    other = CmcLayer(3, 4, 3, 5, layer_index=3)
    other.begin_task(1, 0.2, global_seed=9)
    assert not np.array_equal(first.memory.masks[1].bits, other.memory.masks[1].bits)


def test_frozen_kernel_unchanged_by_later_tasks():
    rng = np.random.default_rng(0)
    layer = CmcLayer(3, 4, 3, capacity=5)
    layer.begin_task(1, 0.2, global_seed=0)
    perturb_active(layer, rng)
    layer.freeze_task(1)
    frozen = layer.estimate_kernel(1).copy()
    weights_before = layer.memory.weights.copy()

    for task_id in (2, 3):
        layer.begin_task(task_id, 0.2, global_seed=0)
        for _ in range(3):
            perturb_active(layer, rng)
        layer.freeze_task(task_id)

    np.testing.assert_array_equal(layer.estimate_kernel(1), frozen)
    owned = layer.memory.masks[1].bits
    np.testing.assert_array_equal(layer.memory.weights[owned], weights_before[owned])


def test_knowledge_sharing_adds_old_kernel():
    rng = np.random.default_rng(1)
    layer = CmcLayer(2, 3, 3, capacity=5, dtype=np.float64)
    layer.begin_task(1, 0.2, global_seed=0)
    perturb_active(layer, rng)
    layer.freeze_task(1)
    old = layer.estimate_kernel(1)

    layer.begin_task(2, 0.2, global_seed=0, knowledge_sharing=True)
    own = layer._task_term(2).reshape(layer.kernel_shape)
    np.testing.assert_allclose(layer.estimate_kernel(2), old + own, rtol=1e-12)
    np.testing.assert_array_equal(layer.old_kernel(2), old)


def test_sharing_off_uses_own_term_only():
    layer = CmcLayer(2, 3, 3, capacity=5, dtype=np.float64)
    layer.begin_task(1, 0.2, global_seed=0)
    layer.freeze_task(1)
    layer.begin_task(2, 0.2, global_seed=0, knowledge_sharing=False)
    assert layer.cached_old_kernel is None
    np.testing.assert_array_equal(layer.estimate_kernel(2).ravel(), layer._task_term(2))


def test_cached_old_kernel_matches_recomputation():
    rng = np.random.default_rng(2)
    layer = CmcLayer(3, 3, 3, capacity=5, debug_checks=True)
    for task_id in (1, 2):
        layer.begin_task(task_id, 0.2, global_seed=4)
        perturb_active(layer, rng)
        layer.freeze_task(task_id)
    layer.begin_task(3, 0.2, global_seed=4)
    np.testing.assert_array_equal(layer.cached_old_kernel, layer._old_kernel(3))
    layer.estimate_kernel(3)  # debug check passes


def test_expansion_keeps_every_kernel_bit_identical():
    rng = np.random.default_rng(3)
    layer = CmcLayer(3, 4, 3, capacity=3)
    for task_id in (1, 2):
        layer.begin_task(task_id, 0.3, global_seed=0)
        perturb_active(layer, rng)
        layer.freeze_task(task_id)
    before = {task_id: layer.estimate_kernel(task_id).copy() for task_id in (1, 2)}
    layer.expand_capacity(4)
    assert layer.t == 7
    for task_id, kernel in before.items():
        np.testing.assert_array_equal(layer.estimate_kernel(task_id), kernel)
        assert len(layer.task_vectors[task_id]) == 7


def test_expand_while_active_is_refused():
    layer = CmcLayer(2, 2, 3, capacity=3)
    layer.begin_task(1, 0.2, global_seed=0)
    with pytest.raises(ProtocolError):
        layer.expand_capacity(1)


def test_capacity_exhausted_and_auto_expansion():
    layer = CmcLayer(2, 2, 3, capacity=1)
    layer.begin_task(1, 1.0, global_seed=0)
    layer.freeze_task(1)
    with pytest.raises(CapacityExhausted):
        layer.begin_task(2, 0.5, global_seed=0)
    assert layer.active_task_id is None

    mask = layer.begin_task(2, 0.5, global_seed=0, auto_expand_rows=1)
    assert layer.t == 2
    assert mask.popcount == layer.m
    assert not mask.bits[0].any()


def test_training_forward_requires_active_task():
    layer = CmcLayer(2, 2, 3, capacity=5)
    layer.begin_task(1, 0.2, global_seed=0)
    layer.freeze_task(1)
    layer.begin_task(2, 0.2, global_seed=0)
    x = np.zeros((1, 2, 5, 5), dtype=np.float32)
    layer.forward(x, 1)
    with pytest.raises(ProtocolError):
        layer.forward(x, 1, training=True)


def test_unknown_task_is_a_protocol_error():
    layer = CmcLayer(2, 2, 3, capacity=5)
    with pytest.raises(ProtocolError):
        layer.estimate_kernel(1)


def test_backward_without_forward():
    layer = CmcLayer(2, 2, 3, capacity=5)
    layer.begin_task(1, 0.2, global_seed=0)
    with pytest.raises(ProtocolError):
        layer.backward_masked(np.zeros((1, 2, 4, 4)))


def test_writes_after_freeze_are_refused():
    layer = CmcLayer(2, 2, 3, capacity=5)
    layer.begin_task(1, 0.2, global_seed=0)
    params = layer.gather_active()
    layer.freeze_task(1)
    with pytest.raises(FrozenParameterError):
        layer.write_active(params)
    with pytest.raises(ValueError):
        layer.biases[1][0] = 1.0


def test_discard_active_task_frees_memory():
    layer = CmcLayer(2, 2, 3, capacity=5)
    layer.begin_task(1, 0.2, global_seed=0)
    layer.freeze_task(1)
    layer.begin_task(2, 0.2, global_seed=0)
    assert layer.discard_active_task() == 2
    assert layer.memory.free_count() == layer.memory.size - layer.memory.masks[1].popcount
    assert layer.task_vectors.keys() == {1}
    assert layer.discard_active_task() is None


def test_trainable_parameter_count():
    layer = CmcLayer(2, 3, 3, capacity=4)
    layer.begin_task(1, 0.2, global_seed=0)
    assert layer.trainable_parameter_count() == 4 * 54 + 4 + 3


def test_masked_gradients_match_finite_differences():
    rng = np.random.default_rng(5)
    layer = CmcLayer(2, 3, 3, capacity=4, dtype=np.float64)
    layer.begin_task(1, 0.25, global_seed=0)
    perturb_active(layer, rng)
    layer.freeze_task(1)
    layer.begin_task(2, 0.25, global_seed=0)
    perturb_active(layer, rng)

    x = rng.standard_normal((2, 2, 5, 5))
    weights = rng.standard_normal((2, 3, 5, 5))
    start = layer.gather_active()

    layer.forward(x, 2, training=True)
    layer.backward_masked(weights)
    analytic = flatten(layer.grads)

    def loss(vector):
        layer.write_active(unflatten(vector, start))
        return float(np.sum(layer.forward(x, 2) * weights))

    assert finite_diff_check(loss, analytic, flatten(start)) < 1e-6
    layer.write_active(start)


def test_memory_gradient_is_zero_outside_mask():
    rng = np.random.default_rng(6)
    layer = CmcLayer(2, 2, 3, capacity=5, dtype=np.float64)
    layer.begin_task(1, 0.2, global_seed=0)
    dense = layer.memory_gradient_dense(1, rng.standard_normal(layer.kernel_shape))
    assert np.all(dense[~layer.memory.masks[1].bits] == 0)
    projected = layer.project_kernel_gradient(1, np.ones(layer.kernel_shape))
    assert set(projected) == {PARAM_VECTOR, PARAM_MEMORY}
    assert projected[PARAM_MEMORY].shape == (layer.memory.masks[1].popcount,)
    assert PARAM_BIAS == 'bias'


def dense_oracle(layer, task_id):
    """Explicit sum over tasks of T_i (M * H_i), computed with a plain matrix product."""
    total = np.zeros(layer.m)
    for i in sorted(layer.task_vectors):
        if i > task_id or (i < task_id and not layer.knowledge_sharing[task_id]):
            continue
        masked = layer.memory.weights * layer.memory.masks[i].bits
        total = total + layer.task_vectors[i].values @ masked
    return total.reshape(layer.kernel_shape)


def test_estimate_kernel_matches_dense_oracle_on_random_layers():
    rng = np.random.default_rng(2024)
    for instance in range(100):
        k_in, k_out = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        tasks = int(rng.integers(1, 5))
        layer = CmcLayer(k_in, k_out, 3, capacity=int(rng.integers(tasks, tasks + 3)), dtype=np.float64)
        for task_id in range(1, tasks + 1):
            layer.begin_task(task_id, 1.0 / (tasks + 1), global_seed=instance,
                             knowledge_sharing=bool(rng.integers(2)))
            perturb_active(layer, rng)
            if task_id < tasks:
                layer.freeze_task(task_id)
        for task_id in range(1, tasks + 1):
            np.testing.assert_allclose(layer.estimate_kernel(task_id), dense_oracle(layer, task_id),
                                       rtol=1e-12, atol=1e-14)


def test_trivial_kernels():
    layer = CmcLayer(1, 1, 3, capacity=1, dtype=np.float64)
    layer.begin_task(1, 1.0, global_seed=0)
    weights = layer.memory.values(1)
    layer.write_active({PARAM_VECTOR: np.ones(1), PARAM_MEMORY: weights, PARAM_BIAS: np.zeros(1)})
    np.testing.assert_array_equal(layer.estimate_kernel(1).ravel(), layer.memory.weights[0])
    layer.write_active({PARAM_VECTOR: np.zeros(1), PARAM_MEMORY: weights, PARAM_BIAS: np.zeros(1)})
    assert not np.any(layer.estimate_kernel(1))


def test_forward_equals_convolution_with_materialised_kernel():
    rng = np.random.default_rng(8)
    layer = CmcLayer(2, 3, 3, capacity=5, dtype=np.float64)
    layer.begin_task(1, 0.2, global_seed=0)
    perturb_active(layer, rng)
    x = rng.standard_normal((2, 2, 6, 6))
    expected = conv2d_forward(x, layer.estimate_kernel(1).copy(), layer.biases[1].copy())
    np.testing.assert_array_equal(layer.forward(x, 1), expected)


def test_zero_input_and_zero_bias_give_zero_output():
    layer = CmcLayer(2, 3, 3, capacity=5, dtype=np.float64)
    layer.begin_task(1, 0.2, global_seed=0)
    assert not np.any(layer.forward(np.zeros((1, 2, 4, 4)), 1))


def test_random_allocation_sequences_keep_masks_disjoint():
    rng = np.random.default_rng(99)
    for sequence in range(1000 if os.environ.get('CMC_SLOW') else 200):
        layer = CmcLayer(1, 1, 3, capacity=int(rng.integers(1, 6)))
        used = 0
        for task_id in range(1, 8):
            fraction = float(rng.uniform(0.05, 0.6))
            wanted = requested_count(fraction, layer.memory.size)
            free = layer.memory.size - used
            if wanted > free:
                with pytest.raises(CapacityExhausted):
                    layer.begin_task(task_id, fraction, global_seed=sequence)
                break
            layer.begin_task(task_id, fraction, global_seed=sequence)
            layer.freeze_task(task_id)
            used += wanted
            assert layer.memory.free_count() == layer.memory.size - used
            owners = layer.memory.owner_map()
            assert np.count_nonzero(owners) == used


def test_expansion_from_five_to_twenty_rows():
    rng = np.random.default_rng(10)
    layer = CmcLayer(3, 3, 3, capacity=5)
    layer.begin_task(1, 0.2, global_seed=0)
    perturb_active(layer, rng)
    layer.freeze_task(1)
    kernel = layer.estimate_kernel(1).copy()
    x = rng.standard_normal((1, 3, 6, 6)).astype(np.float32)
    output = layer.forward(x, 1)
    size = layer.memory.size

    layer.expand_capacity(15)
    assert layer.memory.size == 4 * size
    assert layer.kernel_shape == (3, 3, 3, 3)
    np.testing.assert_array_equal(layer.estimate_kernel(1), kernel)
    np.testing.assert_array_equal(layer.forward(x, 1), output)


def test_frozen_region_receives_no_gradient():
    rng = np.random.default_rng(12)
    layer = CmcLayer(2, 2, 3, capacity=5, dtype=np.float64)
    layer.begin_task(1, 0.2, global_seed=0)
    layer.freeze_task(1)
    layer.begin_task(2, 0.2, global_seed=0)
    dense = layer.memory_gradient_dense(2, rng.standard_normal(layer.kernel_shape))
    assert not np.any(dense[layer.memory.masks[1].bits])


def test_projection_commutes_with_masking():
    rng = np.random.default_rng(13)
    layer = CmcLayer(2, 2, 3, capacity=4, dtype=np.float64)
    layer.begin_task(1, 0.3, global_seed=0)
    grad_kernel = rng.standard_normal(layer.kernel_shape)
    full = np.outer(layer.task_vectors[1].values, grad_kernel.ravel())
    bits = layer.memory.masks[1].bits
    np.testing.assert_array_equal(layer.memory_gradient_dense(1, grad_kernel), np.where(bits, full, 0.0))
