import numpy as np
import pytest
import torch

from dico.networks import BackboneConfig
from dico.volume import ViewGeometry


@pytest.fixture(autouse=True)
def _seed_everything():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture
def small_conv_cfg():
    return BackboneConfig(kind="conv", base_channels=8, depth=3)


@pytest.fixture
def small_transformer_cfg():
    return BackboneConfig(
        kind="transformer", base_channels=8, depth=2, patch_size=4, embed_dim=16, num_heads=2
    )


@pytest.fixture
def default_geometry():
    return ViewGeometry(2, 2, 1)
