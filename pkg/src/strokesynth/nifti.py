"""Minimal NIfTI-1 (.nii.gz) reader/writer.

Covers exactly what this package stores: single-file little-endian NIfTI-1
with 3D scalar data, voxel spacing in mm, and no extensions. The header
layout follows the nifti1.h reference definition.
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

HEADER_SIZE = 348
VOX_OFFSET = 352.0
MAGIC = b"n+1\x00"

# NIfTI datatype codes
_DTYPE_TO_CODE = {
    np.dtype(np.uint8): (2, 8),
    np.dtype(np.int16): (4, 16),
    np.dtype(np.int32): (8, 32),
    np.dtype(np.float32): (16, 32),
    np.dtype(np.float64): (64, 64),
}
_CODE_TO_DTYPE = {code: dt for dt, (code, _) in _DTYPE_TO_CODE.items()}


class NiftiError(IOError):
    """Malformed or unsupported NIfTI file."""


def write_nifti(path: str | Path, data: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> None:
    """Write a 3D array as a gzipped single-file NIfTI-1 volume."""
    if data.ndim != 3:
        raise NiftiError(f"only 3D volumes supported, got shape {data.shape}")
    if data.dtype not in _DTYPE_TO_CODE:
        raise NiftiError(f"unsupported dtype {data.dtype}")
    code, bitpix = _DTYPE_TO_CODE[data.dtype]
    sx, sy, sz = (float(s) for s in spacing)

    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    hdr[38] = ord("r")
    struct.pack_into("<8h", hdr, 40, 3, data.shape[0], data.shape[1], data.shape[2], 1, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, code)
    struct.pack_into("<h", hdr, 72, bitpix)
    struct.pack_into("<8f", hdr, 76, 1.0, sx, sy, sz, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, VOX_OFFSET)
    struct.pack_into("<f", hdr, 112, 1.0)  # scl_slope
    struct.pack_into("<f", hdr, 116, 0.0)  # scl_inter
    hdr[123] = 2  # xyzt_units: mm
    struct.pack_into("<h", hdr, 254, 1)  # sform_code: scanner
    struct.pack_into("<4f", hdr, 280, sx, 0.0, 0.0, 0.0)
    struct.pack_into("<4f", hdr, 296, 0.0, sy, 0.0, 0.0)
    struct.pack_into("<4f", hdr, 312, 0.0, 0.0, sz, 0.0)
    hdr[344:348] = MAGIC

    with gzip.open(path, "wb") as fh:
        fh.write(bytes(hdr))
        fh.write(b"\x00\x00\x00\x00")  # no header extensions
        fh.write(data.tobytes(order="F"))


def read_nifti(path: str | Path) -> tuple[np.ndarray, tuple[float, float, float]]:
    """Read a .nii.gz volume; returns (data, spacing)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such volume file: {path}")
    with gzip.open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < HEADER_SIZE + 4:
        raise NiftiError(f"truncated NIfTI file: {path}")
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != HEADER_SIZE or raw[344:348] != MAGIC:
        raise NiftiError(f"malformed NIfTI header: {path}")
    dim = struct.unpack_from("<8h", raw, 40)
    if dim[0] != 3:
        raise NiftiError(f"expected 3D volume, header says ndim={dim[0]}: {path}")
    shape = tuple(int(d) for d in dim[1:4])
    (code,) = struct.unpack_from("<h", raw, 70)
    if code not in _CODE_TO_DTYPE:
        raise NiftiError(f"unsupported NIfTI datatype code {code}: {path}")
    dtype = _CODE_TO_DTYPE[code]
    pixdim = struct.unpack_from("<8f", raw, 76)
    spacing = tuple(float(p) for p in pixdim[1:4])
    (vox_offset,) = struct.unpack_from("<f", raw, 108)
    offset = int(vox_offset)
    n = int(np.prod(shape))
    buf = raw[offset : offset + n * dtype.itemsize]
    if len(buf) != n * dtype.itemsize:
        raise NiftiError(f"data block shorter than header dimensions: {path}")
    data = np.frombuffer(buf, dtype=dtype).reshape(shape, order="F").copy()
    return data, spacing
