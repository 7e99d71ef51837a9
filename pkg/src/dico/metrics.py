"""Evaluation metrics: Dice overlap, normalized surface Dice, average
surface distance.

Surface distances use exact Euclidean distance transforms to the surface
voxel sets, which matches an all-pairs brute-force search; distances are
in voxel units by default, with an optional anisotropic spacing mode.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage


@dataclass
class CaseMetrics:
    case_id: str
    dsc: float
    nsd: float | None
    asd: float | None


@dataclass
class MetricReport:
    cases: list[CaseMetrics] = field(default_factory=list)
    nsd_tolerance: float = 1.0

    def add(self, case_id, pred, gt):
        self.cases.append(
            CaseMetrics(case_id, dsc(pred, gt), nsd(pred, gt, self.nsd_tolerance), asd(pred, gt))
        )

    def _mean(self, key):
        vals = [getattr(c, key) for c in self.cases if getattr(c, key) is not None]
        return float(np.mean(vals)) if vals else None

    @property
    def mean_dsc(self):
        return self._mean("dsc")

    @property
    def mean_nsd(self):
        return self._mean("nsd")

    @property
    def mean_asd(self):
        return self._mean("asd")

    def write_csv(self, path):
        def fmt(v):
            return "missing" if v is None else f"{v:.6f}"

        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["case_id", "dsc", "nsd", "asd"])
            for c in self.cases:
                w.writerow([c.case_id, fmt(c.dsc), fmt(c.nsd), fmt(c.asd)])
            w.writerow(["mean", fmt(self.mean_dsc), fmt(self.mean_nsd), fmt(self.mean_asd)])


def _as_bool(mask) -> np.ndarray:
    arr = mask.data if hasattr(mask, "data") else mask
    if hasattr(arr, "detach"):
        arr = arr.detach().cpu().numpy()
    arr = np.asarray(arr).astype(bool)
    # strip leading batch/channel axes only; spatial singletons are real
    while arr.ndim > 3 and arr.shape[0] == 1:
        arr = arr[0]
    return arr


def _check_same_grid(p, g):
    if p.shape != g.shape:
        raise ValueError(f"grid mismatch: {p.shape} vs {g.shape}")


def dsc(pred, gt) -> float:
    """2|P∩G| / (|P|+|G|); both-empty convention is 1.0."""
    p, g = _as_bool(pred), _as_bool(gt)
    _check_same_grid(p, g)
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


_FACE_STRUCT = ndimage.generate_binary_structure(3, 1)  # 6-connectivity
_FULL_STRUCT = ndimage.generate_binary_structure(3, 3)  # 26-connectivity


def surface_mask(mask, connectivity: int = 6) -> np.ndarray:
    """Foreground voxels with a background (or out-of-bounds) neighbor."""
    m = _as_bool(mask)
    if m.ndim != 3:
        raise ValueError(f"expected a 3D mask, got {m.ndim} axes")
    struct = _FACE_STRUCT if connectivity == 6 else _FULL_STRUCT
    interior = ndimage.binary_erosion(m, structure=struct, border_value=0)
    return m & ~interior


def surface_voxels(mask, connectivity: int = 6) -> set[tuple[int, int, int]]:
    return set(map(tuple, np.argwhere(surface_mask(mask, connectivity))))


def _surface_distances(p_surf: np.ndarray, g_surf: np.ndarray, spacing):
    """Distances from each surface voxel of P to the nearest of G."""
    dt_g = ndimage.distance_transform_edt(~g_surf, sampling=spacing)
    return dt_g[p_surf]


def asd(pred, gt, connectivity: int = 6, spacing=None) -> float | None:
    """Symmetric average surface distance; None when either mask is empty."""
    p, g = _as_bool(pred), _as_bool(gt)
    _check_same_grid(p, g)
    if not p.any() or not g.any():
        return None
    ps, gs = surface_mask(p, connectivity), surface_mask(g, connectivity)
    d_pg = _surface_distances(ps, gs, spacing)
    d_gp = _surface_distances(gs, ps, spacing)
    return float((d_pg.mean() + d_gp.mean()) / 2.0)


def nsd(pred, gt, tau: float = 1.0, connectivity: int = 6, spacing=None) -> float | None:
    """Pooled fraction of surface voxels within ``tau`` of the other surface."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    p, g = _as_bool(pred), _as_bool(gt)
    _check_same_grid(p, g)
    if not p.any() or not g.any():
        return None
    ps, gs = surface_mask(p, connectivity), surface_mask(g, connectivity)
    d_pg = _surface_distances(ps, gs, spacing)
    d_gp = _surface_distances(gs, ps, spacing)
    hits = int((d_pg <= tau).sum()) + int((d_gp <= tau).sum())
    return hits / (d_pg.size + d_gp.size)


# Brute-force oracles: O(n^2) all-pairs search over surface voxel sets.
# Kept alongside the fast path so equivalence can be checked at any time.


def _nearest_dists_bruteforce(src: set, dst: set, spacing) -> list[float]:
    sp = spacing if spacing is not None else (1.0, 1.0, 1.0)
    out = []
    for a in src:
        out.append(
            min(
                math.sqrt(sum((sp[i] * (a[i] - b[i])) ** 2 for i in range(3)))
                for b in dst
            )
        )
    return out


def asd_bruteforce(pred, gt, connectivity: int = 6, spacing=None) -> float | None:
    p, g = _as_bool(pred), _as_bool(gt)
    if not p.any() or not g.any():
        return None
    ps, gs = surface_voxels(p, connectivity), surface_voxels(g, connectivity)
    d_pg = _nearest_dists_bruteforce(ps, gs, spacing)
    d_gp = _nearest_dists_bruteforce(gs, ps, spacing)
    return (sum(d_pg) / len(d_pg) + sum(d_gp) / len(d_gp)) / 2.0


def nsd_bruteforce(pred, gt, tau: float = 1.0, connectivity: int = 6, spacing=None) -> float | None:
    p, g = _as_bool(pred), _as_bool(gt)
    if not p.any() or not g.any():
        return None
    ps, gs = surface_voxels(p, connectivity), surface_voxels(g, connectivity)
    d_pg = _nearest_dists_bruteforce(ps, gs, spacing)
    d_gp = _nearest_dists_bruteforce(gs, ps, spacing)
    hits = sum(d <= tau for d in d_pg) + sum(d <= tau for d in d_gp)
    return hits / (len(d_pg) + len(d_gp))


def dsc_bruteforce(pred, gt) -> float:
    p, g = _as_bool(pred), _as_bool(gt)
    inter = tot = 0
    for idx in np.ndindex(p.shape):
        inter += int(p[idx] and g[idx])
        tot += int(p[idx]) + int(g[idx])
    return 1.0 if tot == 0 else 2.0 * inter / tot
