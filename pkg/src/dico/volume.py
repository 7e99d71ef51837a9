"""Core tensor containers and pure geometric operations.

Everything here is autograd-transparent and free of learnable state:
depth-axis maximum-intensity projection, the global+local multi-view
decomposition and its exact inverse, and center cropping with symmetric
zero padding.

Tensor layout is (B, C, H, W, D) throughout; the last axis is treated as
the anatomical depth axis z (orientation normalization happens at load
time in :mod:`dico.data`).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F


class ShapeError(ValueError):
    """Raised when a tensor does not satisfy an operation's shape contract."""


def _as_tensor(x) -> torch.Tensor:
    """Accept a raw tensor or any container exposing ``.data``."""
    if isinstance(x, torch.Tensor):
        return x
    return x.data


@dataclass
class Volume:
    """A 5-axis intensity tensor (B, C, H, W, D) with voxel spacing in mm."""

    data: torch.Tensor
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.data.ndim != 5:
            raise ShapeError(f"Volume needs 5 axes (B,C,H,W,D), got {tuple(self.data.shape)}")
        if min(self.data.shape) < 1:
            raise ShapeError(f"Volume extents must all be >= 1, got {tuple(self.data.shape)}")
        if not torch.isfinite(self.data).all():
            raise ValueError("Volume intensities must be finite")

    @property
    def shape(self):
        return tuple(self.data.shape)


@dataclass
class LabelMask:
    """Binary ground-truth mask (B, 1, H, W, D) with values in {0, 1}."""

    data: torch.Tensor

    def __post_init__(self):
        if self.data.ndim != 5 or self.data.shape[1] != 1:
            raise ShapeError(f"LabelMask needs shape (B,1,H,W,D), got {tuple(self.data.shape)}")
        bad = torch.unique(self.data[(self.data != 0) & (self.data != 1)])
        if bad.numel():
            raise ValueError(f"LabelMask must be binary, found values {bad.tolist()}")

    @property
    def shape(self):
        return tuple(self.data.shape)


@dataclass
class ProbMap:
    """Per-voxel class probabilities (B, K, H, W, D); each voxel sums to 1."""

    data: torch.Tensor

    def __post_init__(self):
        if self.data.ndim != 5:
            raise ShapeError(f"ProbMap needs 5 axes (B,K,H,W,D), got {tuple(self.data.shape)}")
        if self.data.min() < -1e-5 or self.data.max() > 1 + 1e-5:
            raise ValueError("ProbMap entries must lie in [0, 1]")
        sums = self.data.sum(dim=1)
        if (sums - 1).abs().max() > 1e-5:
            raise ValueError("ProbMap class vectors must sum to 1 within 1e-5")

    @property
    def shape(self):
        return tuple(self.data.shape)


@dataclass(frozen=True)
class ViewGeometry:
    """Split factors per spatial axis plus the original extents."""

    n1: int = 2
    n2: int = 2
    n3: int = 1
    extents: tuple[int, int, int] = (0, 0, 0)

    def __post_init__(self):
        if min(self.n1, self.n2, self.n3) < 1:
            raise ValueError("view split factors must be positive")

    @property
    def num_local(self) -> int:
        return self.n1 * self.n2 * self.n3

    @property
    def num_views(self) -> int:
        return self.num_local + 1

    @property
    def view_extents(self) -> tuple[int, int, int]:
        h, w, d = self.extents
        return (h // self.n1, w // self.n2, d // self.n3)


@dataclass
class ViewBatch:
    """Global view plus row-major local crops stacked along the batch axis.

    Ordering is fixed: index 0..B-1 is the resized global view, followed by
    the local crops in row-major (h-block, w-block, d-block) order, each
    occupying a contiguous B-sized slab.
    """

    data: torch.Tensor
    geometry: ViewGeometry

    def __post_init__(self):
        if self.data.shape[0] % self.geometry.num_views != 0:
            raise ShapeError(
                f"ViewBatch leading extent {self.data.shape[0]} not divisible by "
                f"{self.geometry.num_views} views"
            )

    @property
    def batch_size(self) -> int:
        return self.data.shape[0] // self.geometry.num_views


def mip_project(vol) -> torch.Tensor:
    """Maximum-intensity projection along the depth (last) axis.

    Gradient flows to the arg-max voxel. Works on volumes, masks and
    probability maps alike; output shape (B, C, H, W).
    """
    data = _as_tensor(vol)
    if data.ndim != 5:
        raise ShapeError(f"mip_project expects (B,C,H,W,D), got {tuple(data.shape)}")
    if data.shape[-1] < 1:
        raise ShapeError("depth axis has zero extent")
    return data.max(dim=-1).values


def decompose_views(vol, geom: ViewGeometry | None = None) -> ViewBatch:
    """Split a volume into one resized global view and n1*n2*n3 local crops.

    The global view is a trilinear, corner-aligned resize of the whole
    volume to the local-view extents; locals are exact non-overlapping
    crops. All views are stacked along the batch axis, global first.
    """
    data = _as_tensor(vol)
    if data.ndim != 5:
        raise ShapeError(f"decompose_views expects (B,C,H,W,D), got {tuple(data.shape)}")
    b, c, h, w, d = data.shape
    if geom is None:
        geom = ViewGeometry()
    geom = ViewGeometry(geom.n1, geom.n2, geom.n3, (h, w, d))
    for name, extent, n in (("H", h, geom.n1), ("W", w, geom.n2), ("D", d, geom.n3)):
        if extent % n != 0:
            raise ShapeError(f"axis {name} extent {extent} not divisible by split factor {n}")
    vh, vw, vd = geom.view_extents

    if (vh, vw, vd) == (h, w, d):
        glb = data
    else:
        glb = F.interpolate(data, size=(vh, vw, vd), mode="trilinear", align_corners=True)
    views = [glb]
    for i in range(geom.n1):
        for j in range(geom.n2):
            for k in range(geom.n3):
                views.append(data[:, :, i * vh:(i + 1) * vh, j * vw:(j + 1) * vw, k * vd:(k + 1) * vd])
    return ViewBatch(torch.cat(views, dim=0), geom)


def recompose_views(views: ViewBatch) -> tuple[torch.Tensor, torch.Tensor]:
    """Invert :func:`decompose_views` on a (possibly feature-valued) batch.

    Returns ``(global, locals_reassembled)``, both (B, C, H, W, D): local
    slabs pasted back at their original offsets, and the global slab
    trilinearly upsampled to the recorded full extents. Pure reassembly;
    any learned smoothing/fusion lives in the networks.
    """
    geom = views.geometry
    data = views.data
    if data.shape[0] % geom.num_views != 0:
        raise ShapeError(
            f"leading extent {data.shape[0]} not divisible by {geom.num_views} views"
        )
    b = data.shape[0] // geom.num_views
    c = data.shape[1]
    h, w, d = geom.extents
    vh, vw, vd = geom.view_extents
    if tuple(data.shape[2:]) != (vh, vw, vd):
        raise ShapeError(
            f"view extents {tuple(data.shape[2:])} do not match geometry {(vh, vw, vd)}"
        )

    glb = data[:b]
    if (vh, vw, vd) != (h, w, d):
        glb = F.interpolate(glb, size=(h, w, d), mode="trilinear", align_corners=True)
    locals_out = data.new_zeros((b, c, h, w, d))
    idx = 1
    for i in range(geom.n1):
        for j in range(geom.n2):
            for k in range(geom.n3):
                locals_out[:, :, i * vh:(i + 1) * vh, j * vw:(j + 1) * vw, k * vd:(k + 1) * vd] = \
                    data[idx * b:(idx + 1) * b]
                idx += 1
    return glb, locals_out


def center_crop(vol, size: tuple[int, int, int]) -> torch.Tensor:
    """Centered crop to ``size``; volumes smaller than the crop are
    symmetrically zero-padded first. Odd remainders round the low side down.
    """
    data = _as_tensor(vol)
    if data.ndim != 5:
        raise ShapeError(f"center_crop expects (B,C,H,W,D), got {tuple(data.shape)}")
    pads = []
    for axis, target in zip((2, 3, 4), size):
        short = max(0, target - data.shape[axis])
        pads.append((short // 2, short - short // 2))
    if any(lo or hi for lo, hi in pads):
        # F.pad lists axes last-first
        flat = [v for lo_hi in reversed(pads) for v in lo_hi]
        data = F.pad(data, flat)
    out = data
    for axis, target in zip((2, 3, 4), size):
        start = (out.shape[axis] - target) // 2
        out = out.narrow(axis, start, target)
    return out
