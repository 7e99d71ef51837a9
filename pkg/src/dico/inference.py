"""Whole-volume prediction by overlapping-window aggregation."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from dico.volume import _as_tensor


@dataclass
class SlidingWindowConfig:
    window: tuple[int, int, int] = (96, 96, 96)
    overlap: float = 0.5
    blending: str = "gaussian"  # gaussian | uniform

    def __post_init__(self):
        if not 0 <= self.overlap < 1:
            raise ValueError("overlap must lie in [0, 1)")
        if self.blending not in ("gaussian", "uniform"):
            raise ValueError(f"unknown blending {self.blending!r}")


def _window_starts(extent: int, window: int, stride: int) -> list[int]:
    if extent <= window:
        return [0]
    starts = list(range(0, extent - window, stride))
    starts.append(extent - window)  # always cover the far edge
    return sorted(set(starts))


def _blend_weights(window, blending, device) -> torch.Tensor:
    if blending == "uniform":
        return torch.ones(window, device=device)
    axes = []
    for w in window:
        sigma = w / 8.0
        x = torch.arange(w, device=device, dtype=torch.float32) - (w - 1) / 2.0
        axes.append(torch.exp(-(x ** 2) / (2 * sigma ** 2)))
    weight = axes[0][:, None, None] * axes[1][None, :, None] * axes[2][None, None, :]
    return weight.clamp_min(1e-4)


def sliding_window_predict(net, vol, cfg: SlidingWindowConfig) -> torch.Tensor:
    """Aggregate softmax outputs of overlapping windows into one ProbMap.

    The volume is zero-padded up to the window size if needed; padding is
    stripped before returning. Output shape (B, K, H, W, D) on the input
    grid; every voxel's accumulated weight is strictly positive.
    """
    data = _as_tensor(vol)
    b, c, h, w, d = data.shape
    window = cfg.window
    pads = [max(0, window[i] - data.shape[2 + i]) for i in range(3)]
    if any(pads):
        flat = []
        for p in reversed(pads):
            flat += [p // 2, p - p // 2]
        data = F.pad(data, flat)
    ph, pw, pd = data.shape[2:]
    strides = [max(1, int(round(window[i] * (1 - cfg.overlap)))) for i in range(3)]
    weight = _blend_weights(window, cfg.blending, data.device)

    out = None
    norm = torch.zeros((1, 1, ph, pw, pd), device=data.device)
    was_training = getattr(net, "training", False)
    if hasattr(net, "eval"):
        net.eval()
    with torch.no_grad():
        for hs in _window_starts(ph, window[0], strides[0]):
            for ws in _window_starts(pw, window[1], strides[1]):
                for ds in _window_starts(pd, window[2], strides[2]):
                    sl = (slice(None), slice(None),
                          slice(hs, hs + window[0]),
                          slice(ws, ws + window[1]),
                          slice(ds, ds + window[2]))
                    probs = torch.softmax(net(data[sl]), dim=1)
                    if out is None:
                        out = torch.zeros((b, probs.shape[1], ph, pw, pd), device=data.device)
                    out[sl] += probs * weight
                    norm[(slice(None), slice(None)) + sl[2:]] += weight
    if hasattr(net, "train"):
        net.train(was_training)
    assert (norm > 0).all(), "window coverage left voxels with zero weight"
    out = out / norm
    # strip the padding back off
    off = [p // 2 for p in pads]
    return out[:, :, off[0]:off[0] + h, off[1]:off[1] + w, off[2]:off[2] + d]


def final_prediction(probs) -> torch.Tensor:
    """Voxel-wise argmax; exact probability ties go to background."""
    p = _as_tensor(probs)
    fg = p[:, 1:].max(dim=1).values
    bg = p[:, 0]
    return (fg > bg).long().unsqueeze(1)
