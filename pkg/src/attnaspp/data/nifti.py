"""Minimal single-file NIfTI-1 (``.nii``) reader and writer.

Only uncompressed ``n+1`` files with u8, i16, f32 or f64 voxels are handled;
gzip streams must be decompressed by the caller.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

HEADER_SIZE = 348
MAGIC = b"n+1\x00"
DATATYPES = {2: "u1", 4: "i2", 16: "f4", 64: "f8"}
DTYPE_CODES = {np.dtype(v).newbyteorder("="): k for k, v in DATATYPES.items()}
SWAPPED_348 = struct.unpack(">i", struct.pack("<i", HEADER_SIZE))[0]


class NiftiError(ValueError):
    """Malformed or unsupported NIfTI-1 content; ``offset`` locates the problem."""

    def __init__(self, msg: str, offset: Optional[int] = None):
        super().__init__(msg if offset is None else f"{msg} (at byte offset {offset})")
        self.offset = offset


@dataclass
class NiftiVolume:
    dims: tuple
    datatype: int
    data: np.ndarray  # raw voxels, indexed [x, y, z]
    scl_slope: float
    scl_inter: float
    header: bytes
    endian: str = "<"
    pixdim: tuple = (1.0, 1.0, 1.0)

    def scaled(self) -> np.ndarray:
        """Voxel values with ``scl_slope``/``scl_inter`` applied when the slope is set."""
        if self.scl_slope != 0 and np.isfinite(self.scl_slope):
            return self.data.astype(np.float64) * self.scl_slope + self.scl_inter
        return self.data.astype(np.float64)


def parse_nifti(buf: bytes) -> NiftiVolume:
    if len(buf) < HEADER_SIZE + 4:
        raise NiftiError(f"file is {len(buf)} bytes, shorter than a NIfTI-1 header", len(buf))
    (size_le,) = struct.unpack_from("<i", buf, 0)
    if size_le == HEADER_SIZE:
        e = "<"
    elif size_le == SWAPPED_348:
        e = ">"
    else:
        raise NiftiError(f"sizeof_hdr is {size_le}, expected 348", 0)
    magic = bytes(buf[344:348])
    if magic != MAGIC:
        if magic == b"ni1\x00":
            raise NiftiError("header/image pairs (ni1) are not supported; need n+1", 344)
        raise NiftiError(f"bad magic {magic!r}", 344)
    dim = struct.unpack_from(f"{e}8h", buf, 40)
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise NiftiError(f"dim[0]={ndim} outside 1..7", 40)
    shape = tuple(int(d) for d in dim[1:ndim + 1])
    if any(d < 1 for d in shape):
        raise NiftiError(f"non-positive dimension in {shape}", 42)
    (datatype,) = struct.unpack_from(f"{e}h", buf, 70)
    if datatype not in DATATYPES:
        raise NiftiError(f"unsupported datatype code {datatype}", 70)
    pixdim = struct.unpack_from(f"{e}8f", buf, 76)
    (vox_offset,) = struct.unpack_from(f"{e}f", buf, 108)
    slope, inter = struct.unpack_from(f"{e}2f", buf, 112)
    start = int(vox_offset)
    if start < HEADER_SIZE:
        raise NiftiError(f"vox_offset {vox_offset} points inside the header", 108)
    dt = np.dtype(DATATYPES[datatype]).newbyteorder(e)
    count = int(np.prod(shape))
    need = count * dt.itemsize
    have = len(buf) - start
    if have < need:
        raise NiftiError(f"data section truncated: expected {need} bytes, found {have}", start)
    raw = np.frombuffer(buf, dtype=dt, count=count, offset=start)
    data = raw.astype(dt.newbyteorder("="), copy=True).reshape(shape, order="F")
    return NiftiVolume(dims=shape, datatype=datatype, data=data, scl_slope=float(slope),
                       scl_inter=float(inter), header=bytes(buf[:HEADER_SIZE]), endian=e,
                       pixdim=tuple(float(p) for p in pixdim[1:ndim + 1]))


def write_nifti(data: np.ndarray, endian: str = "<", scl_slope: float = 0.0,
                scl_inter: float = 0.0, pixdim=None) -> bytes:
    """Serialize an ``[x, y, z, ...]`` array as a single-file NIfTI-1 image."""
    data = np.asarray(data)
    key = data.dtype.newbyteorder("=")
    if key not in DTYPE_CODES:
        raise NiftiError(f"cannot write dtype {data.dtype}")
    if not 1 <= data.ndim <= 7:
        raise NiftiError(f"cannot write {data.ndim}-D data")
    code = DTYPE_CODES[key]
    hdr = bytearray(HEADER_SIZE + 4)
    e = endian
    struct.pack_into(f"{e}i", hdr, 0, HEADER_SIZE)
    struct.pack_into(f"{e}8h", hdr, 40, data.ndim, *data.shape, *([1] * (7 - data.ndim)))
    struct.pack_into(f"{e}hh", hdr, 70, code, data.dtype.itemsize * 8)
    pd = list(pixdim) if pixdim is not None else [1.0] * data.ndim
    struct.pack_into(f"{e}8f", hdr, 76, 1.0, *pd, *([1.0] * (7 - len(pd))))
    struct.pack_into(f"{e}f", hdr, 108, float(HEADER_SIZE + 4))
    struct.pack_into(f"{e}2f", hdr, 112, scl_slope, scl_inter)
    struct.pack_into(f"{e}B", hdr, 123, 2)  # xyzt_units: millimetres
    hdr[344:348] = MAGIC
    body = np.asarray(data, dtype=data.dtype.newbyteorder(e)).tobytes(order="F")
    return bytes(hdr) + body


def read_nifti(path) -> NiftiVolume:
    with open(path, "rb") as fh:
        head = fh.read(2)
        fh.seek(0)
        if head == b"\x1f\x8b":
            raise NiftiError(f"{path} is gzip-compressed; decompress it first", 0)
        return parse_nifti(fh.read())
