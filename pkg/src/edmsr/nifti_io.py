"""NIfTI-1 single-file reader/writer and a raw float64 fixture format.

Only structural 3D volumes are handled (``dim[0]`` of 3, or 4 with a
singleton fourth axis).  Orientation matrices (qform/sform) are ignored:
NIfTI ``dim[1..3]`` map to (W, H, D) and axis 0 of the returned array is
treated as the sagittal slicing axis.  Gzip containers are recognised by
their 0x1F8B prefix whatever the file extension.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .volume import Domain, Volume

HEADER_SIZE = 348
RAW_MAGIC = b"EDMSRVOL"
RAW_SUFFIX = ".edmvol"

# (datatype code) -> (numpy type char, bitpix)
DATATYPES = {2: ("u1", 8), 4: ("i2", 16), 16: ("f4", 32), 64: ("f8", 64)}

HEADER_DTYPE = np.dtype([
    ("sizeof_hdr", "i4"),
    ("data_type", "S10"),
    ("db_name", "S18"),
    ("extents", "i4"),
    ("session_error", "i2"),
    ("regular", "S1"),
    ("dim_info", "u1"),
    ("dim", "i2", (8,)),
    ("intent_p1", "f4"),
    ("intent_p2", "f4"),
    ("intent_p3", "f4"),
    ("intent_code", "i2"),
    ("datatype", "i2"),
    ("bitpix", "i2"),
    ("slice_start", "i2"),
    ("pixdim", "f4", (8,)),
    ("vox_offset", "f4"),
    ("scl_slope", "f4"),
    ("scl_inter", "f4"),
    ("slice_end", "i2"),
    ("slice_code", "u1"),
    ("xyzt_units", "u1"),
    ("cal_max", "f4"),
    ("cal_min", "f4"),
    ("slice_duration", "f4"),
    ("toffset", "f4"),
    ("glmax", "i4"),
    ("glmin", "i4"),
    ("descrip", "S80"),
    ("aux_file", "S24"),
    ("qform_code", "i2"),
    ("sform_code", "i2"),
    ("quatern_b", "f4"),
    ("quatern_c", "f4"),
    ("quatern_d", "f4"),
    ("qoffset_x", "f4"),
    ("qoffset_y", "f4"),
    ("qoffset_z", "f4"),
    ("srow_x", "f4", (4,)),
    ("srow_y", "f4", (4,)),
    ("srow_z", "f4", (4,)),
    ("intent_name", "S16"),
    ("magic", "S4"),
])
assert HEADER_DTYPE.itemsize == HEADER_SIZE


class NiftiError(ValueError):
    """Malformed or unsupported volume file."""


@dataclass
class NiftiHeader:
    dim: tuple[int, ...]
    datatype_code: int
    bitpix: int
    voxel_size: tuple[float, float, float]
    scl_slope: float
    scl_inter: float
    vox_offset: float
    magic: bytes
    byteorder: str
    header_size: int = HEADER_SIZE

    @property
    def shape(self) -> tuple[int, int, int]:
        """Array shape (D, H, W)."""
        return (self.dim[3], self.dim[2], self.dim[1])


def _maybe_gunzip(buf: bytes) -> bytes:
    if buf[:2] == b"\x1f\x8b":
        try:
            return gzip.decompress(buf)
        except (OSError, EOFError) as exc:
            raise NiftiError(f"corrupt gzip container: {exc}") from exc
    return buf


def parse_header(buf: bytes) -> NiftiHeader:
    if len(buf) < HEADER_SIZE:
        raise NiftiError(f"file too short for a NIfTI-1 header ({len(buf)} bytes)")
    if struct.unpack("<i", buf[:4])[0] == HEADER_SIZE:
        order = "<"
    elif struct.unpack(">i", buf[:4])[0] == HEADER_SIZE:
        order = ">"
    else:
        raise NiftiError("sizeof_hdr is not 348 in either byte order")
    hdr = np.frombuffer(buf[:HEADER_SIZE], dtype=HEADER_DTYPE.newbyteorder(order))[0]
    magic = bytes(hdr["magic"]).ljust(4, b"\0")
    if magic != b"n+1\0":
        raise NiftiError(f"unsupported magic {magic!r} (expected single-file 'n+1')")
    dim = tuple(int(d) for d in hdr["dim"])
    if dim[0] not in (3, 4):
        raise NiftiError(f"dim[0] = {dim[0]}; only 3D volumes are supported")
    if dim[0] == 4 and dim[4] > 1:
        raise NiftiError(f"dim[4] = {dim[4]}; multi-frame volumes are not supported")
    if min(dim[1:4]) < 1:
        raise NiftiError(f"non-positive spatial dims {dim[1:4]}")
    code = int(hdr["datatype"])
    if code not in DATATYPES:
        raise NiftiError(f"unsupported datatype code {code}")
    bitpix = int(hdr["bitpix"])
    if bitpix != DATATYPES[code][1]:
        raise NiftiError(f"bitpix {bitpix} inconsistent with datatype code {code}")
    vox_offset = float(hdr["vox_offset"])
    if vox_offset < HEADER_SIZE:
        raise NiftiError(f"vox_offset {vox_offset} points inside the header")
    return NiftiHeader(
        dim=dim,
        datatype_code=code,
        bitpix=bitpix,
        voxel_size=tuple(float(p) for p in hdr["pixdim"][1:4]),
        scl_slope=float(hdr["scl_slope"]),
        scl_inter=float(hdr["scl_inter"]),
        vox_offset=vox_offset,
        magic=magic,
        byteorder=order,
    )


def decode_nifti(buf: bytes) -> Volume:
    buf = _maybe_gunzip(buf)
    hdr = parse_header(buf)
    shape = hdr.shape
    dtype = np.dtype(hdr.byteorder + DATATYPES[hdr.datatype_code][0])
    start = int(hdr.vox_offset)
    n = int(np.prod(shape))
    if len(buf) < start + n * dtype.itemsize:
        raise NiftiError(f"truncated data section: need {n * dtype.itemsize} bytes at offset {start}, "
                         f"have {max(len(buf) - start, 0)}")
    data = np.frombuffer(buf, dtype=dtype, count=n, offset=start).astype(np.float64).reshape(shape)
    if hdr.scl_slope != 0 and np.isfinite(hdr.scl_slope):
        data = data * hdr.scl_slope + hdr.scl_inter
    if not np.all(np.isfinite(data)):
        raise NiftiError("data section contains non-finite values")
    # pixdim[1..3] follow dim[1..3] = (W, H, D); Volume stores (D, H, W)
    vs = tuple(v if v > 0 else 1.0 for v in reversed(hdr.voxel_size))
    return Volume(data, Domain.RAW, vs)


def encode_nifti(vol: Volume) -> bytes:
    """Little-endian float32 NIfTI-1 bytes (slope 1, intercept 0)."""
    D, H, W = vol.dims
    hdr = np.zeros((), dtype=HEADER_DTYPE.newbyteorder("<"))
    hdr["sizeof_hdr"] = HEADER_SIZE
    hdr["regular"] = b"r"
    hdr["dim"] = [3, W, H, D, 1, 1, 1, 1]
    hdr["datatype"] = 16
    hdr["bitpix"] = 32
    hdr["pixdim"] = [1.0, vol.voxel_size[2], vol.voxel_size[1], vol.voxel_size[0], 1, 1, 1, 1]
    hdr["vox_offset"] = 352.0
    hdr["scl_slope"] = 1.0
    hdr["scl_inter"] = 0.0
    hdr["xyzt_units"] = 2  # mm
    hdr["magic"] = b"n+1\0"
    payload = np.ascontiguousarray(vol.data, dtype="<f4").tobytes()
    return hdr.tobytes() + b"\0\0\0\0" + payload


def encode_raw(vol: Volume) -> bytes:
    return RAW_MAGIC + struct.pack("<3q", *vol.dims) + np.ascontiguousarray(vol.data, dtype="<f8").tobytes()


def decode_raw(buf: bytes) -> Volume:
    if buf[:8] != RAW_MAGIC:
        raise NiftiError("bad raw fixture magic")
    if len(buf) < 32:
        raise NiftiError("raw fixture header truncated")
    dims = struct.unpack("<3q", buf[8:32])
    if min(dims) < 1:
        raise NiftiError(f"invalid raw fixture dims {dims}")
    n = int(np.prod(dims))
    if len(buf) - 32 != 8 * n:
        raise NiftiError(f"raw fixture holds {len(buf) - 32} data bytes, expected {8 * n}")
    return Volume(np.frombuffer(buf, dtype="<f8", offset=32).reshape(dims), Domain.RAW)


def _is_raw(path: Path) -> bool:
    return path.name.endswith(RAW_SUFFIX) or path.name.endswith(RAW_SUFFIX + ".gz")


def read_volume(path) -> Volume:
    """Read ``.nii``, ``.nii.gz`` or ``.edmvol`` into a raw-domain Volume."""
    path = Path(path)
    buf = path.read_bytes()
    if _is_raw(path):
        return decode_raw(_maybe_gunzip(buf))
    return decode_nifti(buf)


def write_volume(vol: Volume, path) -> None:
    """Write by extension; ``.gz`` adds a gzip container (mtime fixed at 0)."""
    path = Path(path)
    name = path.name[:-3] if path.name.endswith(".gz") else path.name
    payload = encode_raw(vol) if name.endswith(RAW_SUFFIX) else encode_nifti(vol)
    if path.name.endswith(".gz"):
        payload = gzip.compress(payload, mtime=0)
    try:
        path.write_bytes(payload)
    except OSError as exc:
        raise NiftiError(f"cannot write {path}: {exc}") from exc
