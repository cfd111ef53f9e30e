"""Self-contained NIfTI-1 volume I/O.

Volumes are exchanged as single-file NIfTI-1 (the container ACDC and the
M&Ms challenges ship), either uncompressed or gzipped; gzip is detected by
magic bytes rather than suffix, so ``.vol``, ``.nii`` and ``.nii.gz`` all
work. Arrays are handled as ``(slices, rows, cols)``; on disk they follow
the NIfTI convention (x fastest, x=cols, y=rows, z=slices) with
``pixdim = (col_mm, row_mm, slice_mm)``.
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

from .errors import CorruptHeaderError, MissingFileError

HDR_SIZE = 348
VOX_OFFSET = 352
MAGIC = b"n+1\x00"

_DTYPE_CODES = {
    np.dtype(np.uint8): (2, 8),
    np.dtype(np.int16): (4, 16),
    np.dtype(np.int32): (8, 32),
    np.dtype(np.float32): (16, 32),
    np.dtype(np.float64): (64, 64),
}
_CODE_DTYPES = {code: dt for dt, (code, _) in _DTYPE_CODES.items()}


def write_volume(path: str | Path, array: np.ndarray, spacing: tuple[float, float, float],
                 compress: bool = False) -> None:
    """Write a (slices, rows, cols) array with (row_mm, col_mm, slice_mm) spacing."""
    array = np.asarray(array)
    if array.ndim != 3:
        raise ValueError(f"expected 3D array, got shape {array.shape}")
    if array.dtype not in _DTYPE_CODES:
        raise ValueError(f"unsupported dtype {array.dtype}")
    code, bitpix = _DTYPE_CODES[array.dtype]
    row_mm, col_mm, slice_mm = (float(s) for s in spacing)

    hdr = bytearray(VOX_OFFSET)
    struct.pack_into("<i", hdr, 0, HDR_SIZE)
    # dim: ndim, nx(cols), ny(rows), nz(slices)
    ns, nr, nc = array.shape
    struct.pack_into("<8h", hdr, 40, 3, nc, nr, ns, 1, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, code)
    struct.pack_into("<h", hdr, 72, bitpix)
    struct.pack_into("<8f", hdr, 76, 1.0, col_mm, row_mm, slice_mm, 0, 0, 0, 0)
    struct.pack_into("<f", hdr, 108, float(VOX_OFFSET))
    struct.pack_into("<f", hdr, 112, 1.0)  # scl_slope
    struct.pack_into("<f", hdr, 116, 0.0)  # scl_inter
    struct.pack_into("<b", hdr, 123, 2)    # xyzt_units: mm
    struct.pack_into("<2h", hdr, 252, 0, 1)  # qform off, sform aligned
    struct.pack_into("<4f", hdr, 280, col_mm, 0, 0, 0)
    struct.pack_into("<4f", hdr, 296, 0, row_mm, 0, 0)
    struct.pack_into("<4f", hdr, 312, 0, 0, slice_mm, 0)
    hdr[344:348] = MAGIC

    # disk order: x fastest -> transpose to (cols, rows, slices), Fortran layout
    payload = array.transpose(2, 1, 0).tobytes(order="F")
    blob = bytes(hdr) + payload
    path = Path(path)
    if compress or "".join(path.suffixes).endswith(".gz"):
        with gzip.open(path, "wb", compresslevel=1, mtime=0) as f:
            f.write(blob)
    else:
        path.write_bytes(blob)


def read_volume(path: str | Path) -> tuple[np.ndarray, tuple[float, float, float]]:
    """Read a volume; returns ((slices, rows, cols) array, (row_mm, col_mm, slice_mm))."""
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"volume file not found: {path}")
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    if len(raw) < VOX_OFFSET:
        raise CorruptHeaderError(f"{path}: file shorter than a NIfTI-1 header")
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != HDR_SIZE or raw[344:347] != MAGIC[:3]:
        raise CorruptHeaderError(f"{path}: not a NIfTI-1 file")
    dim = struct.unpack_from("<8h", raw, 40)
    if dim[0] != 3:
        raise CorruptHeaderError(f"{path}: expected 3D volume, got ndim={dim[0]}")
    nc, nr, ns = dim[1], dim[2], dim[3]
    (code,) = struct.unpack_from("<h", raw, 70)
    if code not in _CODE_DTYPES:
        raise CorruptHeaderError(f"{path}: unsupported datatype code {code}")
    dtype = _CODE_DTYPES[code]
    pixdim = struct.unpack_from("<8f", raw, 76)
    col_mm, row_mm, slice_mm = pixdim[1], pixdim[2], pixdim[3]
    (vox_offset,) = struct.unpack_from("<f", raw, 108)
    start = int(vox_offset)
    count = nc * nr * ns
    expected = start + count * dtype.itemsize
    if len(raw) < expected:
        raise CorruptHeaderError(f"{path}: truncated data ({len(raw)} < {expected} bytes)")
    flat = np.frombuffer(raw, dtype=dtype, count=count, offset=start)
    arr = flat.reshape((nc, nr, ns), order="F").transpose(2, 1, 0).copy()
    return arr, (float(row_mm), float(col_mm), float(slice_mm))
