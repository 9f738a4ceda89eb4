import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from gbrec.ingest import build_dataset  # noqa: E402
from gbrec.synthetic import generate_synthetic  # noqa: E402
from helpers import toy_records, toy_social  # noqa: E402


@pytest.fixture
def toy_social_graph():
    return toy_social()


@pytest.fixture
def toy_dataset():
    """5 users, 6 items; every record lands in train (fewer than 3 per initiator)."""
    return build_dataset(toy_social(), toy_records(), 6, seed=0)


@pytest.fixture(scope="session")
def fixture_dataset():
    return generate_synthetic()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
