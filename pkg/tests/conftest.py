import math

import numpy as np
import pytest

from harmask.data import sample_batch
from harmask.envs import PointTaskSpec, gen_dataset
from harmask.model import ModelConfig, build_layout, init_params


def tiny_config(**kw) -> ModelConfig:
    base = dict(n_layers=1, n_heads=2, embed_dim=8, context_K=3, prompt_Kstar=2, state_dim=4,
                action_dim=2, max_timestep=16, dropout=0.0)
    base.update(kw)
    return ModelConfig(**base)


def dir_suite(n=4):
    return [PointTaskSpec(f"dir_{i}", "dir", angle=2 * math.pi * i / n, horizon=12)
            for i in range(n)]


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture
def tiny_theta(tiny_cfg):
    # larger scale than the default init so every path carries signal
    rng = np.random.default_rng(11)
    return rng.normal(0.0, 0.3, build_layout(tiny_cfg).total)


@pytest.fixture(scope="session")
def small_datasets():
    return [gen_dataset(s, 6, "near_optimal", [5, i]) for i, s in enumerate(dir_suite())]


@pytest.fixture
def tiny_batch(tiny_cfg, small_datasets):
    return sample_batch(small_datasets[0], tiny_cfg.context_K, tiny_cfg.prompt_Kstar, 3,
                        np.random.default_rng(2))
