"""Volumetric image I/O: a NIfTI-1 single-file subset, an internal raw
format, and axial slice extraction/reassembly.

Volumes are numpy arrays indexed ``[x, y, z]``; the on-disk payload is
x-fastest (Fortran order), matching NIfTI. Spacing is mm per voxel.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

NIFTI_HEADER_SIZE = 348
NIFTI_MAGIC = b"n+1\x00"

# NIfTI-1 datatype codes supported by this subset.
DT_UINT8 = 2
DT_INT16 = 4
DT_FLOAT32 = 16

_DTYPE_BY_CODE = {
    DT_UINT8: np.dtype(np.uint8),
    DT_INT16: np.dtype(np.int16),
    DT_FLOAT32: np.dtype(np.float32),
}
_CODE_BY_NAME = {"uint8": DT_UINT8, "int16": DT_INT16, "float32": DT_FLOAT32}

_VOL_MAGIC = b"WMHVOL1\x00"


class VolumeIOError(ValueError):
    """Base class for volume I/O failures."""


class MalformedHeaderError(VolumeIOError):
    """Header bytes do not form a valid NIfTI-1 header."""


class WrongMagicError(VolumeIOError):
    """Magic string does not identify single-file NIfTI-1."""


class UnsupportedDatatypeError(VolumeIOError):
    """Datatype code outside the supported subset."""


class CompressedStreamError(VolumeIOError):
    """File is a gzip stream; decompress externally first."""


class DimensionError(VolumeIOError):
    """More than 3 nontrivial axes, or invalid dim counts."""


class TruncatedPayloadError(VolumeIOError):
    """File ends before the declared voxel payload."""


@dataclass
class Volume3D:
    """A 3-D scalar grid with per-axis voxel spacing in mm.

    ``data`` has shape (nx, ny, nz) and is indexed [x, y, z].
    """

    data: np.ndarray
    spacing: tuple[float, float, float]

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"expected 3-D data, got ndim={self.data.ndim}")
        if min(self.data.shape) < 1:
            raise ValueError(f"all dims must be >= 1, got {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3:
            raise ValueError("spacing must have 3 components")
        if not all(np.isfinite(s) and s > 0 for s in self.spacing):
            raise ValueError(f"spacing must be positive and finite, got {self.spacing}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)  # type: ignore[return-value]

    def voxel_volume_mm3(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz


@dataclass
class BinaryMask3D:
    """Same grid contract as Volume3D, values restricted to {0, 1}."""

    data: np.ndarray
    spacing: tuple[float, float, float]

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"expected 3-D data, got ndim={self.data.ndim}")
        vals = np.unique(self.data)
        if not np.isin(vals, (0, 1)).all():
            raise ValueError("mask values must be exactly 0 or 1")
        self.data = self.data.astype(np.uint8)
        self.spacing = tuple(float(s) for s in self.spacing)
        if not all(np.isfinite(s) and s > 0 for s in self.spacing):
            raise ValueError(f"spacing must be positive and finite, got {self.spacing}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)  # type: ignore[return-value]

    def voxel_count(self) -> int:
        return int(np.count_nonzero(self.data))


@dataclass
class NiftiHeaderSubset:
    """The header fields this reader/writer cares about."""

    dims: tuple[int, int, int]
    datatype: int
    pixdim: tuple[float, float, float]
    vox_offset: int
    big_endian: bool
    scl_slope: float = 0.0
    scl_inter: float = 0.0


def _parse_header(raw: bytes) -> NiftiHeaderSubset:
    if len(raw) >= 2 and raw[:2] == b"\x1f\x8b":
        raise CompressedStreamError("gzip stream; only uncompressed .nii is supported")
    if len(raw) < NIFTI_HEADER_SIZE:
        raise MalformedHeaderError(
            f"header truncated: {len(raw)} bytes, need {NIFTI_HEADER_SIZE}"
        )

    (sizeof_le,) = struct.unpack_from("<i", raw, 0)
    (sizeof_be,) = struct.unpack_from(">i", raw, 0)
    if sizeof_le == NIFTI_HEADER_SIZE:
        endian = "<"
        big_endian = False
    elif sizeof_be == NIFTI_HEADER_SIZE:
        endian = ">"
        big_endian = True
    else:
        raise MalformedHeaderError(f"malformed header: sizeof_hdr={sizeof_le}")

    magic = raw[344:348]
    if magic != NIFTI_MAGIC:
        raise WrongMagicError(f"wrong magic {magic!r}, expected {NIFTI_MAGIC!r}")

    dim = struct.unpack_from(endian + "8h", raw, 40)
    ndim = dim[0]
    if ndim < 1 or ndim > 7:
        raise DimensionError(f"dim[0]={ndim} outside 1..7")
    sizes = [max(1, d) for d in dim[1 : 1 + ndim]]
    if sum(1 for s in sizes if s > 1) > 3 or len([s for s in sizes[3:] if s > 1]) > 0:
        raise DimensionError(f"more than 3 nontrivial axes: dim={dim[: 1 + ndim]}")
    sizes = (sizes + [1, 1, 1])[:3]
    if any(d < 1 for d in dim[1 : 1 + ndim]):
        raise DimensionError(f"nonpositive axis length in dim={dim[: 1 + ndim]}")

    (datatype,) = struct.unpack_from(endian + "h", raw, 70)
    if datatype not in _DTYPE_BY_CODE:
        raise UnsupportedDatatypeError(f"unsupported datatype code {datatype}")

    pixdim = struct.unpack_from(endian + "8f", raw, 76)
    spacing = tuple(float(pixdim[1 + i]) if i < ndim else 1.0 for i in range(3))
    if not all(np.isfinite(s) and s > 0 for s in spacing):
        raise MalformedHeaderError(f"nonpositive pixdim {spacing}")

    (vox_offset,) = struct.unpack_from(endian + "f", raw, 108)
    (scl_slope,) = struct.unpack_from(endian + "f", raw, 112)
    (scl_inter,) = struct.unpack_from(endian + "f", raw, 116)
    if not np.isfinite(vox_offset) or vox_offset < NIFTI_HEADER_SIZE:
        raise MalformedHeaderError(f"bad vox_offset {vox_offset}")

    return NiftiHeaderSubset(
        dims=tuple(sizes),  # type: ignore[arg-type]
        datatype=int(datatype),
        pixdim=spacing,  # type: ignore[arg-type]
        vox_offset=int(vox_offset),
        big_endian=big_endian,
        scl_slope=float(scl_slope),
        scl_inter=float(scl_inter),
    )


def read_nifti(path: str | Path) -> Volume3D:
    """Read an uncompressed single-file NIfTI-1 volume.

    Spacing is taken from pixdim[1..3]. If scl_slope is nonzero the stored
    values are mapped through value = slope*raw + inter; otherwise raw
    values are used as-is. Raises a distinct VolumeIOError subclass for
    each malformation (wrong magic, unsupported datatype, gzip stream,
    extra axes, truncated payload).
    """
    raw = Path(path).read_bytes()
    hdr = _parse_header(raw)

    dtype = _DTYPE_BY_CODE[hdr.datatype].newbyteorder(">" if hdr.big_endian else "<")
    nx, ny, nz = hdr.dims
    count = nx * ny * nz
    payload = raw[hdr.vox_offset : hdr.vox_offset + count * dtype.itemsize]
    if len(payload) < count * dtype.itemsize:
        raise TruncatedPayloadError(
            f"payload has {len(payload)} bytes, expected {count * dtype.itemsize}"
        )
    flat = np.frombuffer(payload, dtype=dtype)
    data = flat.reshape((nx, ny, nz), order="F").astype(np.float64)
    if hdr.scl_slope != 0.0:
        data = hdr.scl_slope * data + hdr.scl_inter
    return Volume3D(data=data, spacing=hdr.pixdim)


def read_nifti_mask(path: str | Path) -> BinaryMask3D:
    """Read a NIfTI file expected to contain a {0,1} mask."""
    v = read_nifti(path)
    return BinaryMask3D(data=v.data.astype(np.uint8), spacing=v.spacing)


def write_nifti(
    v: Volume3D | BinaryMask3D, path: str | Path, datatype: str = "float32"
) -> None:
    """Write a volume or mask as single-file NIfTI-1.

    Masks are written as uint8 regardless of the requested datatype.
    Integer datatypes raise on value overflow.
    """
    if isinstance(v, BinaryMask3D):
        datatype = "uint8"
    if datatype not in _CODE_BY_NAME:
        raise UnsupportedDatatypeError(f"unsupported datatype {datatype!r}")
    code = _CODE_BY_NAME[datatype]
    np_dtype = _DTYPE_BY_CODE[code]

    data = np.asarray(v.data)
    if np_dtype.kind in "ui":
        info = np.iinfo(np_dtype)
        if data.size and (data.min() < info.min or data.max() > info.max):
            raise OverflowError(
                f"values outside {datatype} range [{info.min}, {info.max}]"
            )
        payload = data.astype(np_dtype)
    else:
        payload = data.astype(np_dtype)

    nx, ny, nz = data.shape
    header = bytearray(NIFTI_HEADER_SIZE)
    struct.pack_into("<i", header, 0, NIFTI_HEADER_SIZE)
    struct.pack_into("<8h", header, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<h", header, 70, code)
    struct.pack_into("<h", header, 72, np_dtype.itemsize * 8)  # bitpix
    sx, sy, sz = v.spacing
    struct.pack_into("<8f", header, 76, 1.0, sx, sy, sz, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", header, 108, 352.0)  # vox_offset
    struct.pack_into("<f", header, 112, 0.0)  # scl_slope: stored values are final
    struct.pack_into("<f", header, 116, 0.0)  # scl_inter
    header[344:348] = NIFTI_MAGIC

    out = Path(path)
    with open(out, "wb") as f:
        f.write(bytes(header))
        f.write(b"\x00\x00\x00\x00")  # extension flag, none
        f.write(np.asfortranarray(payload).tobytes(order="F"))


def write_vol(v: Volume3D | BinaryMask3D, path: str | Path) -> None:
    """Write the internal raw format: magic, dtype code, dims, spacing,
    little-endian x-fastest payload. float64 for volumes, uint8 for masks."""
    is_mask = isinstance(v, BinaryMask3D)
    dtype = np.dtype("<u1") if is_mask else np.dtype("<f8")
    code = 1 if is_mask else 2
    nx, ny, nz = v.data.shape
    with open(path, "wb") as f:
        f.write(_VOL_MAGIC)
        f.write(struct.pack("<B3I3d", code, nx, ny, nz, *v.spacing))
        f.write(v.data.astype(dtype).tobytes(order="F"))


def read_vol(path: str | Path) -> Volume3D | BinaryMask3D:
    raw = Path(path).read_bytes()
    if raw[:8] != _VOL_MAGIC:
        raise WrongMagicError(f"not an internal .vol file: {raw[:8]!r}")
    code, nx, ny, nz, sx, sy, sz = struct.unpack_from("<B3I3d", raw, 8)
    dtype = np.dtype("<u1") if code == 1 else np.dtype("<f8")
    offset = 8 + struct.calcsize("<B3I3d")
    count = nx * ny * nz
    payload = raw[offset : offset + count * dtype.itemsize]
    if len(payload) < count * dtype.itemsize:
        raise TruncatedPayloadError("truncated .vol payload")
    data = np.frombuffer(payload, dtype=dtype).reshape((nx, ny, nz), order="F")
    if code == 1:
        return BinaryMask3D(data=data.copy(), spacing=(sx, sy, sz))
    return Volume3D(data=data.astype(np.float64), spacing=(sx, sy, sz))


def axial_slices(v: Volume3D | BinaryMask3D) -> list[np.ndarray]:
    """Split into nz planes of shape (nx, ny); plane k holds voxels [:, :, k]."""
    return [np.ascontiguousarray(v.data[:, :, k]) for k in range(v.data.shape[2])]


def stack_slices(
    planes: Sequence[np.ndarray], spacing: tuple[float, float, float]
) -> Volume3D:
    """Inverse of axial_slices: stack (nx, ny) planes into a Volume3D."""
    if len(planes) == 0:
        raise ValueError("need at least one plane")
    shape0 = planes[0].shape
    for k, p in enumerate(planes):
        if p.shape != shape0:
            raise ValueError(f"plane {k} has shape {p.shape}, expected {shape0}")
    data = np.stack(planes, axis=2)
    return Volume3D(data=data.astype(np.float64), spacing=spacing)
