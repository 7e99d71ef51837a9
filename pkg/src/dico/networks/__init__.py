from dico.networks.backbones import (
    BackboneConfig,
    ConvSegNet,
    TransformerSegNet,
    build_backbone,
)
from dico.networks.multiview import MultiViewWrapper
from dico.networks.discriminator import Discriminator2D, fuse_for_discriminator

__all__ = [
    "BackboneConfig",
    "ConvSegNet",
    "TransformerSegNet",
    "MultiViewWrapper",
    "Discriminator2D",
    "build_backbone",
    "fuse_for_discriminator",
]
