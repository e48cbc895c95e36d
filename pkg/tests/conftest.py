import os

import numpy as np
import pytest
import torch
from hypothesis import settings

from scenegan.config import DiscConfig, ExperimentConfig, TrainConfig
from scenegan.dataset import SceneDataset, ToySceneSpec, build_dataset
from scenegan.generator import GeneratorConfig

torch.set_num_threads(int(os.environ.get("CC3D_NUM_THREADS", "1")))
settings.register_profile("repo", deadline=None, max_examples=60)
settings.load_profile("repo")


def tiny_config(**train) -> ExperimentConfig:
    """A config small enough for unit-level training runs."""
    cfg = ExperimentConfig(
        generator=GeneratorConfig(resolution=16, field_channels=8, style_dim=16, class_count=4,
                                  base_channels=16, channel_multipliers=(1, 2, 2), upsampler_channels=16),
        discriminator=DiscConfig(base_channels=8, max_channels=32),
        train=TrainConfig(**{**dict(batch_size=4, total_images=16, render_resolution=16, n_coarse=6, n_fine=6,
                                    checkpoint_every=8), **train}),
    )
    cfg.dataset.n_scenes = 16
    return cfg


@pytest.fixture(scope="session")
def toy_dataset_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy_data")
    build_dataset(ToySceneSpec(resolution=16, tau=2.0), 16, 40, root, seed=3, image_size=32)
    return root


@pytest.fixture(scope="session")
def toy_dataset(toy_dataset_dir):
    return SceneDataset(toy_dataset_dir, ToySceneSpec(resolution=16, tau=2.0))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
