"""2D critic over fused (projected image, projected mask) pairs."""

from __future__ import annotations

import torch
import torch.nn as nn

from dico.volume import ShapeError, _as_tensor


def fuse_for_discriminator(img, mask) -> torch.Tensor:
    """Channel-concatenate a projected image with a projected mask.

    Both inputs are (B, 1, H, W); the image goes in channel 0. For
    probabilistic masks pass the foreground channel of the projection.
    """
    img = _as_tensor(img)
    mask = _as_tensor(mask)
    if img.ndim != 4 or mask.ndim != 4:
        raise ShapeError("fuse_for_discriminator expects 4-axis (B,C,H,W) inputs")
    if img.shape[0] != mask.shape[0] or img.shape[2:] != mask.shape[2:]:
        raise ShapeError(f"extent mismatch: image {tuple(img.shape)} vs mask {tuple(mask.shape)}")
    return torch.cat([img, mask], dim=1)


class Discriminator2D(nn.Module):
    """Strided conv classifier emitting one real/fake logit per image."""

    def __init__(self, in_channels: int = 2, base_channels: int = 16, num_layers: int = 4):
        super().__init__()
        layers = []
        cin = in_channels
        ch = base_channels
        for _ in range(num_layers):
            layers += [nn.Conv2d(cin, ch, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
            cin, ch = ch, ch * 2
        self.features = nn.Sequential(*layers)
        self.classify = nn.Linear(cin, 1)
        self.in_channels = in_channels

    def forward(self, fused: torch.Tensor) -> torch.Tensor:
        fused = _as_tensor(fused)
        if fused.ndim != 4 or fused.shape[1] != self.in_channels:
            raise ShapeError(
                f"discriminator expects (B,{self.in_channels},H,W), got {tuple(fused.shape)}"
            )
        h = self.features(fused)
        h = h.mean(dim=(2, 3))  # global average pool
        return self.classify(h)
