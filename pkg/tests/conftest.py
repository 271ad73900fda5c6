import numpy as np
import pytest

from dissectprune.concept_data import MicroBrodenSpec, generate_micro_broden, load_concept_dataset


@pytest.fixture(scope="session")
def small_spec():
    return MicroBrodenSpec(image_size=(16, 16), n_images={"dissect": 12, "extra": 4}, seed=7)


@pytest.fixture(scope="session")
def micro_broden(tmp_path_factory, small_spec):
    root = tmp_path_factory.mktemp("mb")
    generate_micro_broden(small_spec, root)
    return load_concept_dataset(root)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
