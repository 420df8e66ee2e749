import hypothesis
import numpy as np
import pytest

hypothesis.settings.register_profile("fast", max_examples=25, deadline=None)
hypothesis.settings.register_profile("thorough", max_examples=200, deadline=None)
hypothesis.settings.load_profile("fast")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """3 species x 4 views at 32px/16^3: enough structure for pipeline tests."""
    from xray2vol.dataset import build_dataset
    from xray2vol.projector import ProjectorConfig

    root = tmp_path_factory.mktemp("tiny_ds")
    manifest = build_dataset(3, 4, root, ProjectorConfig(resolution=(32, 32)),
                             seed=7, volume_size=16)
    return manifest
