import numpy as np
import pytest

from chaingen.datapipe import SynthSpec, synth_dataset



@pytest.fixture(scope="session")
def corpus():
    """Twenty synthetic chains used by the overfit experiments."""
    return synth_dataset(SynthSpec(count=20, backbone_max=8), np.random.default_rng(1))


@pytest.fixture(scope="session")
def small_corpus():
    return synth_dataset(SynthSpec(count=4, backbone_max=6), np.random.default_rng(7))


@pytest.fixture(scope="session")
def molecules():
    spec = SynthSpec(count=4, periodic=False, backbone_min=2, backbone_max=5, name="mol")
    return synth_dataset(spec, np.random.default_rng(3))
