"""Volume ingestion, dataset manifests, split assignment, crop sampling
and the synthetic tubular-phantom generator used for desk-scale runs.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy.interpolate import CubicSpline

from dico.nifti import read_nifti, write_nifti
from dico.volume import LabelMask, Volume, center_crop

SPLITS = ("labeled-train", "unlabeled-train", "val", "test")


class IngestionError(ValueError):
    pass


@dataclass
class CaseRecord:
    case_id: str
    image_path: str
    label_path: str | None
    split: str

    def __post_init__(self):
        if self.split not in SPLITS:
            raise IngestionError(f"case {self.case_id}: unknown split {self.split!r}")
        if self.split != "unlabeled-train" and not self.label_path:
            raise IngestionError(f"case {self.case_id}: split {self.split} requires a label path")


def write_manifest(path, records: list[CaseRecord]):
    with open(path, "w") as f:
        for r in records:
            f.write(f"{r.case_id}\t{r.image_path}\t{r.label_path or '-'}\t{r.split}\n")


def read_manifest(path) -> list[CaseRecord]:
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"manifest not found: {path}")
    records = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t") if "\t" in line else line.split()
        if len(parts) != 4:
            raise IngestionError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
        cid, img, lbl, split = parts
        records.append(CaseRecord(cid, img, None if lbl == "-" else lbl, split))
    return records


def normalize_intensity(image: np.ndarray) -> np.ndarray:
    """Per-volume z-score, clipped to +/- 5 sigma; constant volumes map to 0."""
    image = image.astype(np.float32)
    std = float(image.std())
    if std == 0.0:
        return np.zeros_like(image)
    out = (image - image.mean()) / std
    return np.clip(out, -5.0, 5.0)


def load_case(rec: CaseRecord, normalize: bool = True):
    """Load one case as a (Volume, LabelMask-or-None) pair.

    The last tensor axis is treated as anatomical z (NIfTI k axis). Labels
    must be strictly binary; anything else is rejected rather than
    silently binarized.
    """
    img_path = Path(rec.image_path)
    if not img_path.exists():
        raise IngestionError(f"case {rec.case_id}: image file missing: {img_path}")
    image, spacing, _ = read_nifti(img_path)
    if normalize:
        image = normalize_intensity(image)
    vol = Volume(torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32))[None, None], spacing)

    mask = None
    if rec.label_path:
        lbl_path = Path(rec.label_path)
        if not lbl_path.exists():
            raise IngestionError(f"case {rec.case_id}: label file missing: {lbl_path}")
        label, _, _ = read_nifti(lbl_path)
        if label.shape != image.shape:
            raise IngestionError(
                f"case {rec.case_id}: label grid {label.shape} != image grid {image.shape}"
            )
        bad = np.setdiff1d(np.unique(label), [0, 1])
        if bad.size:
            raise IngestionError(
                f"case {rec.case_id}: label contains non-binary values {bad.tolist()}"
            )
        mask = LabelMask(torch.from_numpy(np.ascontiguousarray(label, dtype=np.int64))[None, None])
    return vol, mask


def make_split(case_ids: list[str], labeled_fraction: float, seed: int) -> dict[str, str]:
    """Partition training cases into labeled/unlabeled, deterministically."""
    if not 0 < labeled_fraction <= 1:
        raise ValueError("labeled_fraction must be in (0, 1]")
    n = len(case_ids)
    n_labeled = int(n * labeled_fraction + 0.5)
    if n_labeled < 1:
        raise ValueError(
            f"labeled_fraction {labeled_fraction} yields zero labeled cases out of {n}"
        )
    order = list(case_ids)
    np.random.default_rng(seed).shuffle(order)
    labeled = set(order[:n_labeled])
    return {cid: ("labeled-train" if cid in labeled else "unlabeled-train") for cid in case_ids}


def sample_crop(vol, mask, size, rng: np.random.Generator | None = None, mode: str = "center"):
    """Crop an (image, mask) pair to ``size``; random mode draws a uniform
    corner, center mode matches the deterministic centered crop."""
    vdata = vol.data if hasattr(vol, "data") else vol
    mdata = None if mask is None else (mask.data if hasattr(mask, "data") else mask)
    if mode == "center" or rng is None:
        out_v = center_crop(vdata, size)
        out_m = None if mdata is None else center_crop(mdata, size)
        return out_v, out_m
    if mode != "random":
        raise ValueError(f"unknown crop mode {mode!r}")
    # pad first so small volumes stay croppable, then draw a corner
    pad_target = [max(s, e) for s, e in zip(size, vdata.shape[2:])]
    vdata = center_crop(vdata, pad_target)
    if mdata is not None:
        mdata = center_crop(mdata, pad_target)
    corner = [int(rng.integers(0, vdata.shape[2 + i] - size[i] + 1)) for i in range(3)]
    sl = (slice(None), slice(None)) + tuple(slice(c, c + s) for c, s in zip(corner, size))
    return vdata[sl], None if mdata is None else mdata[sl]


@dataclass
class PhantomSpec:
    grid: tuple[int, int, int] = (32, 32, 32)
    num_tubes: int = 3
    radius_range: tuple[float, float] = (1.5, 3.0)
    curvature: float = 0.15  # lateral wander as a fraction of grid size
    contrast: float = 1.0
    background: float = 0.0
    noise_sigma: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if min(self.grid) < 16:
            raise ValueError("phantom grid must be at least 16 per axis")
        if self.radius_range[0] < 1.0:
            raise ValueError("tube radii must be >= 1 voxel")


def _render_tube(mask: np.ndarray, rng: np.random.Generator, spec: PhantomSpec) -> np.ndarray:
    """Rasterize one smooth tube; returns its own binary mask."""
    g = np.array(spec.grid, dtype=float)
    axis = int(rng.integers(0, 3))  # main travel axis
    n_ctrl = 5
    t_ctrl = np.linspace(0, 1, n_ctrl)
    ctrl = np.empty((n_ctrl, 3))
    ctrl[:, axis] = np.linspace(1.0, g[axis] - 2.0, n_ctrl)
    for a in range(3):
        if a == axis:
            continue
        base = rng.uniform(0.25 * g[a], 0.75 * g[a])
        ctrl[:, a] = base + rng.normal(0, spec.curvature * g[a], n_ctrl)
    spline = CubicSpline(t_ctrl, ctrl)

    r_lo, r_hi = spec.radius_range
    r_ctrl = rng.uniform(r_lo, r_hi, n_ctrl)
    r_spline = CubicSpline(t_ctrl, r_ctrl)

    # arc-length-ish dense sampling: step well under the minimum radius
    # keeps each rendered tube 26-connected
    t = np.linspace(0, 1, max(64, int(4 * g[axis])))
    pts = spline(t)
    # keep the whole centerline inside the grid so each tube stays connected
    pts = np.clip(pts, 1.0, g - 2.0)
    radii = np.clip(r_spline(t), r_lo, r_hi)

    tube = np.zeros(spec.grid, dtype=bool)
    for (cx, cy, cz), r in zip(pts, radii):
        lo = np.maximum(np.floor([cx - r, cy - r, cz - r]).astype(int), 0)
        hi = np.minimum(np.ceil([cx + r, cy + r, cz + r]).astype(int) + 1, spec.grid)
        if (hi <= lo).any():
            continue
        xs, ys, zs = np.meshgrid(
            *[np.arange(lo[i], hi[i]) for i in range(3)], indexing="ij"
        )
        ball = (xs - cx) ** 2 + (ys - cy) ** 2 + (zs - cz) ** 2 <= r * r
        tube[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] |= ball
    mask |= tube
    return tube


def generate_phantom(spec: PhantomSpec):
    """Render random smooth tubes into a binary mask and a noisy image.

    image = contrast * mask + background + N(0, noise_sigma); deterministic
    for a given spec (the seed drives everything).
    """
    rng = np.random.default_rng(spec.seed)
    mask = np.zeros(spec.grid, dtype=bool)
    for _ in range(spec.num_tubes):
        _render_tube(mask, rng, spec)
    image = spec.contrast * mask.astype(np.float32) + spec.background
    if spec.noise_sigma > 0:
        image = image + rng.normal(0, spec.noise_sigma, spec.grid).astype(np.float32)
    vol = Volume(torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32))[None, None])
    lbl = LabelMask(torch.from_numpy(mask.astype(np.int64))[None, None])
    return vol, lbl


def write_phantom_dataset(out_dir, n_cases: int, spec: PhantomSpec, labeled_fraction: float = 0.2,
                          n_val: int = 0, seed: int | None = None) -> list[CaseRecord]:
    """Generate a phantom dataset on disk plus its manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    base_seed = spec.seed if seed is None else seed
    records = []
    train_ids = []
    for i in range(n_cases + n_val):
        case_spec = PhantomSpec(**{**spec.__dict__, "seed": base_seed + i})
        vol, lbl = generate_phantom(case_spec)
        cid = f"phantom_{i:03d}"
        img_path = out_dir / f"{cid}_img.nii.gz"
        lbl_path = out_dir / f"{cid}_lbl.nii.gz"
        write_nifti(img_path, vol.data[0, 0].numpy())
        write_nifti(lbl_path, lbl.data[0, 0].numpy().astype(np.uint8))
        split = "val" if i >= n_cases else None
        records.append(CaseRecord(cid, str(img_path), str(lbl_path), split or "labeled-train"))
        if split is None:
            train_ids.append(cid)
    assign = make_split(train_ids, labeled_fraction, base_seed)
    for r in records:
        if r.case_id in assign:
            r.split = assign[r.case_id]
    write_manifest(out_dir / "manifest.txt", records)
    return records


class CropStream:
    """Endless sampler of training crops from an in-memory case list.

    The caller owns the RNG so stream state can be checkpointed with the
    trainer; samples are (image, mask) tensor pairs stacked to a batch.
    """

    def __init__(self, cases, crop_size, mode: str = "random"):
        if not cases:
            raise ValueError("CropStream needs at least one case")
        self.cases = cases  # list of (Volume, LabelMask-or-None)
        self.crop_size = tuple(crop_size)
        self.mode = mode

    def sample(self, rng: np.random.Generator, batch: int):
        imgs, masks = [], []
        for _ in range(batch):
            vol, mask = self.cases[int(rng.integers(0, len(self.cases)))]
            v, m = sample_crop(vol, mask, self.crop_size, rng, self.mode)
            imgs.append(v)
            masks.append(m)
        img = torch.cat(imgs, dim=0)
        if any(m is None for m in masks):
            return img, None
        return img, torch.cat(masks, dim=0)
