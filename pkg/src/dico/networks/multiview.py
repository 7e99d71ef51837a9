"""Multi-view pipeline around a segmentation backbone.

The input volume is split into a resized global view plus non-overlapping
local crops stacked along the batch axis; the inner backbone runs once on
the stacked batch; its pre-head features are recomposed, the locals are
smoothed by two convolutions, concatenated with the upsampled global
features, fused by two more convolutions and finally mapped to logits.
End to end the wrapper honours the same shape contract as a bare backbone.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from dico.networks.backbones import SegBackbone
from dico.volume import ViewBatch, ViewGeometry, _as_tensor, decompose_views, recompose_views


def _conv3(cin, cout):
    # replicate padding keeps constant feature maps constant at the borders
    return nn.Conv3d(cin, cout, 3, padding=1, padding_mode="replicate")


class MultiViewWrapper(SegBackbone):
    def __init__(self, inner: SegBackbone, geometry: ViewGeometry | None = None):
        super().__init__(inner.config)
        self.inner = inner
        self.geometry = geometry if geometry is not None else ViewGeometry()
        f = inner.feature_channels
        self.feature_channels = f
        self.smooth = nn.Sequential(_conv3(f, f), nn.LeakyReLU(0.01), _conv3(f, f))
        self.fuse = nn.Sequential(_conv3(2 * f, f), nn.LeakyReLU(0.01), _conv3(f, f))
        self.head = nn.Conv3d(f, inner.config.num_classes, 1)

    def forward_features(self, x: torch.Tensor) -> torch.Tensor:
        x = _as_tensor(x)
        views = decompose_views(x, self.geometry)
        feats = self.inner.forward_features(views.data)
        glb, locs = recompose_views(ViewBatch(feats, views.geometry))
        locs = locs + self.smooth(locs)
        return self.fuse(torch.cat([locs, glb], dim=1))
