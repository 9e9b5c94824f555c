import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from advcp.data import SceneConfig, generate, write_dataset

settings.register_profile(
    "suite",
    deadline=None,
    max_examples=25,
    suppress_health_check=[HealthCheck.too_slow],
    derandomize=True,
)
settings.load_profile("suite")


TINY_SCENE = SceneConfig(
    image_size=32,
    object_size=(6, 10),
    distractor_size=(2, 4),
    texture_cells=2,
    train_size=24,
    val_size=8,
    test_size=8,
    seed=7,
)


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    """A miniature on-disk benchmark shared across the suite."""
    root = tmp_path_factory.mktemp("tiny_data")
    for split in ("train", "val", "test"):
        write_dataset(generate(TINY_SCENE, split), root / split, with_masks=True)
    return root


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
