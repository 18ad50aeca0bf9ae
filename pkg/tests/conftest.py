import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from editbank import SyntheticDatasetSpec, create_toy_backend, make_synthetic_suite


@pytest.fixture(scope="session")
def backend():
    return create_toy_backend(0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def shift_suite(tmp_path_factory):
    """Global channel-shift fixture: 4 train / 2 test pairs at 32x32."""
    root = tmp_path_factory.mktemp("shift-suite")
    return make_synthetic_suite(
        root,
        [
            SyntheticDatasetSpec(
                name="red_shift",
                category="global",
                effect="channel_shift",
                instruction="add a red tint",
                train_pairs=4,
                test_pairs=2,
                resolution=(32, 32),
                amount=0.3,
            )
        ],
        seed=7,
    )


@pytest.fixture(scope="session")
def two_dataset_suite(tmp_path_factory):
    """One global grayscale + one local region dataset, 4+2 pairs each."""
    root = tmp_path_factory.mktemp("two-suite")
    return make_synthetic_suite(
        root,
        [
            SyntheticDatasetSpec(
                name="gray_world",
                category="global",
                effect="grayscale",
                instruction="make it a black and white photo",
                train_pairs=4,
                test_pairs=2,
                resolution=(32, 32),
            ),
            SyntheticDatasetSpec(
                name="patch_recolor",
                category="local",
                effect="invert_region",
                instruction="recolor the patch",
                train_pairs=4,
                test_pairs=2,
                resolution=(32, 32),
            ),
        ],
        seed=11,
    )
