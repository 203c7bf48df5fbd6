"""Volume container I/O.

The "v3d" container is a 64-byte header followed by a raw little-endian
payload:

    bytes 0:4   magic b"V3D1"
    byte  4     dtype code: 0 = float32 scalar grid (D, H, W)
                            1 = int32 label grid (D, H, W)
                            2 = float32 vector field (3, D, H, W)
    bytes 5:17  three little-endian uint32 grid dims (D, H, W)
    bytes 17:64 reserved, written as zeros

The payload is C-order (D-major, then H, then W; vector fields carry the
leading component axis first). Round-trips are bit-exact.

A minimal read-only NIfTI-1 reader is provided for real data; every
header field beyond dims and datatype is ignored.
"""

import gzip
import struct
from pathlib import Path

import numpy as np

from .errors import (
    BadHeaderError,
    BadPayloadError,
    BadShapeError,
    DtypeMismatchError,
)
from .grids import DisplacementField, IntensityField, LabelMap, Volume

MAGIC = b"V3D1"
HEADER_SIZE = 64
CODE_SCALAR = 0
CODE_LABELS = 1
CODE_FIELD = 2

_DTYPES = {
    CODE_SCALAR: np.dtype("<f4"),
    CODE_LABELS: np.dtype("<i4"),
    CODE_FIELD: np.dtype("<f4"),
}

MAX_DIM = 1 << 16  # guards against absurd headers before allocating


def _write(path, code: int, arr: np.ndarray):
    if code == CODE_FIELD:
        dims = arr.shape[1:]
    else:
        dims = arr.shape
    header = MAGIC + struct.pack("<B3I", code, *dims)
    header += b"\x00" * (HEADER_SIZE - len(header))
    payload = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
    Path(path).write_bytes(header + payload)


def _read(path, expected_code: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < HEADER_SIZE:
        raise BadHeaderError(f"{path}: file shorter than the 64-byte header")
    if raw[:4] != MAGIC:
        raise BadHeaderError(f"{path}: bad magic {raw[:4]!r}")
    code, d, h, w = struct.unpack("<B3I", raw[4:17])
    if code not in _DTYPES:
        raise BadHeaderError(f"{path}: unknown dtype code {code}")
    if code != expected_code:
        raise DtypeMismatchError(
            f"{path}: holds dtype code {code}, caller expected {expected_code}"
        )
    dims = (d, h, w)
    if any(s == 0 for s in dims) or any(s > MAX_DIM for s in dims):
        raise BadShapeError(f"{path}: invalid shape {dims}")
    shape = (3, *dims) if code == CODE_FIELD else dims
    expected_bytes = int(np.prod(shape)) * 4
    payload = raw[HEADER_SIZE:]
    if len(payload) != expected_bytes:
        raise BadPayloadError(
            f"{path}: payload is {len(payload)} bytes, header implies {expected_bytes}"
        )
    return np.frombuffer(payload, dtype=_DTYPES[code]).reshape(shape).copy()


def save_volume(vol: Volume, path):
    _write(path, CODE_SCALAR, vol.data)


def load_volume(path) -> Volume:
    return Volume(_read(path, CODE_SCALAR))


def save_label_map(labels: LabelMap, path):
    _write(path, CODE_LABELS, labels.labels)


def load_label_map(path, num_classes: int = 0) -> LabelMap:
    return LabelMap(_read(path, CODE_LABELS), num_classes)


def save_displacement_field(field: DisplacementField, path):
    _write(path, CODE_FIELD, field.disp)


def load_displacement_field(path) -> DisplacementField:
    return DisplacementField(_read(path, CODE_FIELD))


def save_intensity_field(field: IntensityField, path):
    _write(path, CODE_SCALAR, field.offset)


def load_intensity_field(path) -> IntensityField:
    return IntensityField(_read(path, CODE_SCALAR))


# --- NIfTI-1, read-only ------------------------------------------------

_NIFTI_DTYPES = {
    2: np.dtype("<u1"),
    4: np.dtype("<i2"),
    8: np.dtype("<i4"),
    16: np.dtype("<f4"),
    64: np.dtype("<f8"),
    256: np.dtype("<i1"),
    512: np.dtype("<u2"),
}


def read_nifti(path) -> np.ndarray:
    """Read a .nii / .nii.gz file as a (D, H, W) array.

    Only dims and datatype are honored; orientation, scaling, and every
    other header field are ignored. The fastest-varying NIfTI axis maps
    to W.
    """
    path = Path(path)
    opener = gzip.open if path.name.endswith(".gz") else open
    with opener(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 352:
        raise BadHeaderError(f"{path}: too short for a NIfTI-1 header")
    sizeof_hdr = struct.unpack("<i", raw[0:4])[0]
    byte_order = "<"
    if sizeof_hdr != 348:
        sizeof_hdr = struct.unpack(">i", raw[0:4])[0]
        if sizeof_hdr != 348:
            raise BadHeaderError(f"{path}: sizeof_hdr != 348")
        byte_order = ">"
    magic = raw[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise BadHeaderError(f"{path}: bad NIfTI magic {magic!r}")
    dim = struct.unpack(byte_order + "8h", raw[40:56])
    if dim[0] < 3:
        raise BadShapeError(f"{path}: need 3 spatial dims, header says {dim[0]}")
    if any(d > 1 for d in dim[4 : dim[0] + 1]):
        raise BadShapeError(f"{path}: only single-frame 3D images are supported")
    nx, ny, nz = dim[1], dim[2], dim[3]
    if min(nx, ny, nz) <= 0:
        raise BadShapeError(f"{path}: invalid shape {(nx, ny, nz)}")
    datatype = struct.unpack(byte_order + "h", raw[70:72])[0]
    dtype = _NIFTI_DTYPES.get(datatype)
    if dtype is None:
        raise BadHeaderError(f"{path}: unsupported NIfTI datatype {datatype}")
    dtype = dtype.newbyteorder(byte_order)
    vox_offset = int(struct.unpack(byte_order + "f", raw[108:112])[0])
    vox_offset = max(vox_offset, 348)
    count = nx * ny * nz
    payload = raw[vox_offset : vox_offset + count * dtype.itemsize]
    if len(payload) != count * dtype.itemsize:
        raise BadPayloadError(f"{path}: truncated NIfTI payload")
    arr = np.frombuffer(payload, dtype=dtype).reshape((nz, ny, nx))
    return np.ascontiguousarray(arr)


def read_nifti_volume(path) -> Volume:
    """Load a NIfTI image and min-max normalize it into a Volume."""
    return Volume.from_raw(read_nifti(path).astype(np.float32))


def read_nifti_labels(path, num_classes: int = 0) -> LabelMap:
    arr = read_nifti(path)
    if not np.issubdtype(arr.dtype, np.integer):
        raise DtypeMismatchError(f"{path}: label NIfTI must hold integers, got {arr.dtype}")
    return LabelMap(arr.astype(np.int32), num_classes)
