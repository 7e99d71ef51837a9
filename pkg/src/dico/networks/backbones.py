"""The two segmentation backbones behind one common interface.

``ConvSegNet`` is a small V-shaped residual encoder-decoder; pairing it
with ``TransformerSegNet`` (3D patch embedding + self-attention encoder +
convolutional decoder) gives the heterogeneous network pair. Both preserve
spatial extents and emit pre-softmax logits; ``forward_features`` exposes
the pre-head decoder features so a wrapper can recompose them before the
segmentation head is applied.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from dico.volume import ShapeError, _as_tensor


@dataclass
class BackboneConfig:
    kind: str = "conv"  # conv | transformer
    in_channels: int = 1
    num_classes: int = 2
    base_channels: int = 16
    depth: int = 4  # encoder stages (conv) / attention blocks (transformer)
    patch_size: int = 8  # transformer only
    embed_dim: int = 64  # transformer only
    num_heads: int = 4  # transformer only

    def __post_init__(self):
        if self.kind not in ("conv", "transformer"):
            raise ValueError(f"unknown backbone kind {self.kind!r}")
        if self.depth < 2:
            raise ValueError("depth must be >= 2")
        if self.base_channels < 4:
            raise ValueError("base_channels must be >= 4")


def build_backbone(cfg: BackboneConfig) -> "SegBackbone":
    if cfg.kind == "conv":
        return ConvSegNet(cfg)
    return TransformerSegNet(cfg)


class SegBackbone(nn.Module):
    """Common contract: logits out, spatial extents preserved."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.config = cfg
        self.feature_channels: int = cfg.base_channels

    def forward_features(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def forward(self, x) -> torch.Tensor:
        x = _as_tensor(x)
        return self.head(self.forward_features(x))


class ResBlock3d(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv1 = nn.Conv3d(channels, channels, 3, padding=1)
        self.norm1 = nn.InstanceNorm3d(channels, affine=True)
        self.conv2 = nn.Conv3d(channels, channels, 3, padding=1)
        self.norm2 = nn.InstanceNorm3d(channels, affine=True)

    def forward(self, x):
        h = F.leaky_relu(self.norm1(self.conv1(x)), 0.01)
        h = self.norm2(self.conv2(h))
        return F.leaky_relu(x + h, 0.01)


class ConvSegNet(SegBackbone):
    """V-shaped residual encoder-decoder with stride-2 down/upsampling."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__(cfg)
        ch = [cfg.base_channels * 2 ** i for i in range(cfg.depth)]
        self.stem = nn.Conv3d(cfg.in_channels, ch[0], 3, padding=1)
        self.enc = nn.ModuleList([ResBlock3d(c) for c in ch])
        self.down = nn.ModuleList(
            [nn.Conv3d(ch[i], ch[i + 1], 2, stride=2) for i in range(cfg.depth - 1)]
        )
        self.up = nn.ModuleList(
            [nn.ConvTranspose3d(ch[i + 1], ch[i], 2, stride=2) for i in range(cfg.depth - 1)]
        )
        self.dec = nn.ModuleList([ResBlock3d(c) for c in ch[:-1]])
        self.skip = nn.ModuleList([nn.Conv3d(2 * c, c, 1) for c in ch[:-1]])
        self.head = nn.Conv3d(ch[0], cfg.num_classes, 1)

    def _check_divisible(self, x):
        div = 2 ** (self.config.depth - 1)
        for name, extent in zip("HWD", x.shape[2:]):
            if extent % div != 0:
                raise ShapeError(
                    f"axis {name} extent {extent} not divisible by 2^(depth-1)={div}"
                )

    def forward_features(self, x: torch.Tensor) -> torch.Tensor:
        self._check_divisible(x)
        h = self.stem(x)
        skips = []
        for i, block in enumerate(self.enc):
            h = block(h)
            if i < len(self.down):
                skips.append(h)
                h = self.down[i](h)
        for i in reversed(range(len(self.up))):
            h = self.up[i](h)
            h = self.skip[i](torch.cat([h, skips[i]], dim=1))
            h = self.dec[i](h)
        return h


class AttentionBlock(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim))

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


class TransformerSegNet(SegBackbone):
    """Non-overlapping 3D patch embedding, self-attention stack, conv decoder.

    The decoder upsamples the token grid back to full resolution in factor-2
    steps, mixing in projections of intermediate attention blocks, so the
    output feature map has the same extents as the input.
    """

    def __init__(self, cfg: BackboneConfig):
        super().__init__(cfg)
        p = cfg.patch_size
        self.patch = nn.Conv3d(cfg.in_channels, cfg.embed_dim, p, stride=p)
        self.blocks = nn.ModuleList(
            [AttentionBlock(cfg.embed_dim, cfg.num_heads) for _ in range(cfg.depth)]
        )
        self.pos_scale = nn.Parameter(torch.tensor(1.0))
        # skip taps: after the middle block and after the last block
        self.tap_idx = sorted({cfg.depth // 2, cfg.depth - 1})
        n_up = max(1, p.bit_length() - 1)  # p assumed a power of two
        if 2 ** n_up != p:
            raise ValueError("patch_size must be a power of two")
        chans = [cfg.embed_dim]
        for _ in range(n_up):
            chans.append(max(cfg.base_channels, chans[-1] // 2))
        chans[-1] = cfg.base_channels
        ups, mixes = [], []
        for i in range(n_up):
            ups.append(nn.ConvTranspose3d(chans[i], chans[i + 1], 2, stride=2))
            mixes.append(
                nn.Sequential(
                    nn.Conv3d(chans[i + 1] + cfg.in_channels, chans[i + 1], 3, padding=1),
                    nn.InstanceNorm3d(chans[i + 1], affine=True),
                    nn.LeakyReLU(0.01),
                )
            )
        self.ups = nn.ModuleList(ups)
        self.mixes = nn.ModuleList(mixes)
        self.tap_proj = nn.ModuleList(
            [nn.Conv3d(cfg.embed_dim, cfg.embed_dim, 1) for _ in self.tap_idx]
        )
        self.head = nn.Conv3d(cfg.base_channels, cfg.num_classes, 1)

    def forward_features(self, x: torch.Tensor) -> torch.Tensor:
        p = self.config.patch_size
        for name, extent in zip("HWD", x.shape[2:]):
            if extent % p != 0:
                raise ShapeError(f"axis {name} extent {extent} not divisible by patch {p}")
        grid = self.patch(x)  # (B, E, h', w', d')
        gh, gw, gd = grid.shape[2:]
        pos = _sincos_pos(gh * gw * gd, grid.shape[1], grid.device, grid.dtype)
        tokens = grid.flatten(2).transpose(1, 2) + self.pos_scale * pos
        taps = []
        for i, block in enumerate(self.blocks):
            tokens = block(tokens)
            if i in self.tap_idx:
                taps.append(tokens)
        fused = 0
        for tap, proj in zip(taps, self.tap_proj):
            fused = fused + proj(tap.transpose(1, 2).reshape_as(grid))
        h = fused
        for up, mix in zip(self.ups, self.mixes):
            h = up(h)
            guide = F.interpolate(x, size=h.shape[2:], mode="trilinear", align_corners=True)
            h = mix(torch.cat([h, guide], dim=1))
        return h


def _sincos_pos(n: int, dim: int, device, dtype) -> torch.Tensor:
    """Fixed sinusoidal position encoding, (1, n, dim)."""
    pos = torch.arange(n, device=device, dtype=dtype).unsqueeze(1)
    half = dim // 2
    freq = torch.exp(
        torch.arange(half, device=device, dtype=dtype) * (-torch.log(torch.tensor(10000.0)) / max(half - 1, 1))
    )
    ang = pos * freq
    enc = torch.zeros(n, dim, device=device, dtype=dtype)
    enc[:, 0::2] = torch.sin(ang)[:, : (dim + 1) // 2]
    enc[:, 1::2] = torch.cos(ang)[:, : dim // 2]
    return enc.unsqueeze(0)
