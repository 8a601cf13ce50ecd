"""Shared fixtures: small networks, task specs and configurations that train in seconds."""

import logging

import numpy as np
import pytest

from models.degradations import Degradation
from models.image_source import CleanImageSource
from models.network import RestorationNet
from models.task_spec import TaskSpec, TrainSchedule
from utils.config_loader import ConfigLoader, config_from_dict
from utils.logging import LOGGER_NAME


def flatten(params):
    return np.concatenate([params[k].astype(np.float64).ravel() for k in sorted(params)])


def unflatten(vector, like):
    out, offset = {}, 0
    for key in sorted(like):
        size = like[key].size
        out[key] = vector[offset:offset + size].reshape(like[key].shape).astype(like[key].dtype)
        offset += size
    return out


def tiny_config_dict(output_dir, tasks=2, sharing=True, epochs=2):
    sigmas = [10, 25, 40, 55]
    return {
        'seed': 3,
        'output_dir': str(output_dir),
        'eval_batch_size': 4,
        'network': {'channels': 4, 'blocks': 1, 'capacity': 5},
        'schedule': {'base_lr': 1e-3, 'halve_every': 1},
        'data': {'image_size': 24, 'eval_count': 2, 'pool_images': 4},
        'task_defaults': {
            'fraction': 0.2, 'epochs': epochs, 'batches_per_epoch': 2,
            'batch_size': 2, 'patch_size': 16, 'knowledge_sharing': sharing,
        },
        'tasks': [
            {'name': f"noise{sigmas[i]}", 'degradation': {'kind': 'gaussian_noise', 'sigma': sigmas[i]}}
            for i in range(tasks)
        ],
    }


@pytest.fixture(autouse=True)
def clear_config_cache():
    ConfigLoader.clear_cache()
    yield
    ConfigLoader.clear_cache()


@pytest.fixture(autouse=True)
def detach_file_handlers():
    package_logger = logging.getLogger(LOGGER_NAME)
    before = list(package_logger.handlers)
    yield
    for handler in list(package_logger.handlers):
        if handler not in before:
            package_logger.removeHandler(handler)
            handler.close()


@pytest.fixture
def tiny_config(tmp_path):
    return config_from_dict(tiny_config_dict(tmp_path / 'run'))


@pytest.fixture
def small_net():
    return RestorationNet(channels=4, blocks=1, capacity=5, dtype=np.float64)


@pytest.fixture
def source():
    return CleanImageSource(image_size=24, seed=0)


@pytest.fixture
def noise_task():
    return TaskSpec(1, 'noise25', Degradation('gaussian_noise', sigma=25), fraction=0.2,
                    epochs=2, batches_per_epoch=2, batch_size=2, patch_size=16)


@pytest.fixture
def schedule():
    return TrainSchedule(base_lr=1e-3, halve_every=1)
