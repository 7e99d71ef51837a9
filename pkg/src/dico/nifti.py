"""Minimal NIfTI-1 single-file (.nii / .nii.gz) reader and writer.

Covers the subset this toolkit needs: 3D arrays, the common numeric
dtypes, pixdim spacing and an sform affine. No external imaging
dependency required.
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

_DTYPES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
    256: np.int8,
    512: np.uint16,
    1024: np.int64,
}
_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}


def _open(path, mode):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, mode)
    return open(path, mode)


def write_nifti(path, array: np.ndarray, spacing=(1.0, 1.0, 1.0), affine: np.ndarray | None = None):
    """Write a 3D array; voxel order is (i, j, k) fastest-first on disk."""
    array = np.asarray(array)
    if array.ndim != 3:
        raise ValueError(f"write_nifti expects a 3D array, got {array.ndim} axes")
    if array.dtype not in _CODES:
        array = array.astype(np.float32)
    if affine is None:
        affine = np.diag([spacing[0], spacing[1], spacing[2], 1.0])

    hdr = bytearray(348)
    struct.pack_into("<i", hdr, 0, 348)  # sizeof_hdr
    struct.pack_into("<8h", hdr, 40, 3, *array.shape, 1, 1, 1, 1)  # dim
    struct.pack_into("<h", hdr, 70, _CODES[array.dtype])  # datatype
    struct.pack_into("<h", hdr, 72, array.dtype.itemsize * 8)  # bitpix
    struct.pack_into("<8f", hdr, 76, 1.0, *spacing, 1.0, 1.0, 1.0, 1.0)  # pixdim
    struct.pack_into("<f", hdr, 108, 352.0)  # vox_offset
    struct.pack_into("<f", hdr, 112, 1.0)  # scl_slope
    struct.pack_into("<h", hdr, 254, 1)  # sform_code
    struct.pack_into("<12f", hdr, 280, *affine[:3].reshape(-1))  # srow_x/y/z
    hdr[344:348] = b"n+1\x00"

    with _open(path, "wb") as f:
        f.write(bytes(hdr))
        f.write(b"\x00\x00\x00\x00")  # extension flag
        f.write(array.tobytes(order="F"))


def read_nifti(path) -> tuple[np.ndarray, tuple[float, float, float], np.ndarray]:
    """Read a 3D volume; returns (array, spacing, affine)."""
    with _open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 352:
        raise ValueError(f"{path}: truncated NIfTI file")
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != 348:
        raise ValueError(f"{path}: not a little-endian NIfTI-1 file")
    dim = struct.unpack_from("<8h", raw, 40)
    ndim = dim[0]
    shape = tuple(dim[1:1 + ndim])
    if any(s > 1 for s in shape[3:]):
        raise ValueError(f"{path}: only 3D volumes are supported, dim={shape}")
    shape = shape[:3]
    (datatype,) = struct.unpack_from("<h", raw, 70)
    if datatype not in _DTYPES:
        raise ValueError(f"{path}: unsupported NIfTI datatype {datatype}")
    dtype = np.dtype(_DTYPES[datatype])
    pixdim = struct.unpack_from("<8f", raw, 76)
    spacing = tuple(float(abs(p)) or 1.0 for p in pixdim[1:4])
    (vox_offset,) = struct.unpack_from("<f", raw, 108)
    offset = int(vox_offset)
    slope, inter = struct.unpack_from("<2f", raw, 112)
    (sform_code,) = struct.unpack_from("<h", raw, 254)
    affine = np.eye(4)
    if sform_code > 0:
        affine[:3] = np.array(struct.unpack_from("<12f", raw, 280)).reshape(3, 4)
    else:
        affine[:3, :3] = np.diag(spacing)

    count = int(np.prod(shape))
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    array = data.reshape(shape, order="F").copy()
    if slope not in (0.0, 1.0) or inter != 0.0:
        array = array.astype(np.float32) * (slope or 1.0) + inter
    return array, spacing, affine
