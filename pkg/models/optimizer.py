"""
Adam over named parameter arrays.

The state is single-owner: exactly one trainer updates it. adam_step does not mutate its
inputs; it returns the updated parameters and a new state.
"""

from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np

from utils.exceptions import NumericError, ShapeError, ValidationError

DEFAULT_BETA1 = 0.9
DEFAULT_BETA2 = 0.999
DEFAULT_EPSILON = 1e-8

ParamDict = Dict[str, np.ndarray]


@dataclass
class AdamState:
    """First/second moment accumulators keyed like the parameters, plus the step counter."""
    first_moment: ParamDict = field(default_factory=dict)
    second_moment: ParamDict = field(default_factory=dict)
    step: int = 0
    beta1: float = DEFAULT_BETA1
    beta2: float = DEFAULT_BETA2
    epsilon: float = DEFAULT_EPSILON

    @classmethod
    def create(cls, params: ParamDict, beta1: float = DEFAULT_BETA1, beta2: float = DEFAULT_BETA2,
               epsilon: float = DEFAULT_EPSILON) -> 'AdamState':
        return cls(
            first_moment={k: np.zeros_like(v) for k, v in params.items()},
            second_moment={k: np.zeros_like(v) for k, v in params.items()},
            step=0,
            beta1=beta1,
            beta2=beta2,
            epsilon=epsilon,
        )


def _check_inputs(params: ParamDict, grads: ParamDict, state: AdamState, lr: float) -> None:
    if not lr > 0:
        raise ValidationError(f"learning rate must be positive, got {lr}")
    if set(params) != set(grads):
        raise ShapeError(f"parameter names {sorted(params)} do not match gradient names {sorted(grads)}")
    if set(params) != set(state.first_moment):
        raise ShapeError("optimizer state was created for a different parameter set")
    for name, value in params.items():
        if grads[name].shape != value.shape:
            raise ShapeError(f"gradient for '{name}' has shape {grads[name].shape}, parameter has {value.shape}")
        if state.first_moment[name].shape != value.shape:
            raise ShapeError(f"moment for '{name}' has shape {state.first_moment[name].shape}, parameter has {value.shape}")
        if not np.all(np.isfinite(grads[name])):
            raise NumericError(f"non-finite gradient for parameter '{name}' at optimizer step {state.step + 1}")


def adam_step(params: ParamDict, grads: ParamDict, state: AdamState, lr: float) -> Tuple[ParamDict, AdamState]:
    """
    One Adam update with bias correction.

    Raises:
        ValidationError: If lr is not positive
        ShapeError: If parameter, gradient or moment shapes disagree
        NumericError: If any gradient entry is not finite
    """
    _check_inputs(params, grads, state, lr)
    step = state.step + 1
    correction1 = 1.0 - state.beta1 ** step
    correction2 = 1.0 - state.beta2 ** step

    new_params: ParamDict = {}
    first: ParamDict = {}
    second: ParamDict = {}
    for name, value in params.items():
        grad = grads[name]
        m = state.beta1 * state.first_moment[name] + (1.0 - state.beta1) * grad
        v = state.beta2 * state.second_moment[name] + (1.0 - state.beta2) * np.square(grad)
        m_hat = m / correction1
        v_hat = v / correction2
        update = lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
        new_params[name] = (value - update).astype(value.dtype, copy=False)
        first[name] = m.astype(value.dtype, copy=False)
        second[name] = v.astype(value.dtype, copy=False)

    return new_params, AdamState(first, second, step, state.beta1, state.beta2, state.epsilon)
