import numpy as np
import pytest

from services.needlet import build_cutoffs, build_needlet_frame
from utils.cache import ArtifactCache


@pytest.fixture(scope="session")
def cutoff():
    return build_cutoffs()


@pytest.fixture(scope="session")
def frame2(cutoff):
    """d=2, J=4: W = Π_8"""
    return build_needlet_frame(2, 4, 0.5, cutoff)


@pytest.fixture(scope="session")
def frame3(cutoff):
    """d=3, J=2: W = Π_2"""
    return build_needlet_frame(3, 2, 0.5, cutoff)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def cache(tmp_path):
    return ArtifactCache(str(tmp_path / "cache"))
