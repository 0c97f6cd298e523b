"""PCB1 point-cloud and PLN1 plane-set binary files.

PCB1: ``b"PCB1"``, u32 LE count N, N*3 float32 LE (x, y, z interleaved).
PLN1: ``b"PLN1"``, u32 LE count N, N*4 float32 LE (nx, ny, nz, c).
"""

import os
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .geom import PlaneSet, as_cloud

PCB_MAGIC = b"PCB1"
PLN_MAGIC = b"PLN1"
_F32 = np.dtype("<f4")
# float32 storage: a unit normal survives with |n| = 1 +- ~1e-7
UNIT_TOL = 1e-5


def _write_atomic(path, payload):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def _encode(magic, rows):
    return magic + struct.pack("<I", rows.shape[0]) + np.ascontiguousarray(rows, dtype=_F32).tobytes()


def _decode(blob, magic, width, path):
    if len(blob) < 8:
        raise FormatError(f"{path}: file too short ({len(blob)} bytes)")
    if blob[:4] != magic:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}, expected {magic!r}")
    (n,) = struct.unpack("<I", blob[4:8])
    expected = 8 + 4 * width * n
    if len(blob) != expected:
        raise FormatError(f"{path}: expected {expected} bytes for {n} records, found {len(blob)}")
    rows = np.frombuffer(blob, dtype=_F32, offset=8).reshape(n, width).astype(np.float64)
    if not np.all(np.isfinite(rows)):
        raise FormatError(f"{path}: non-finite values")
    return rows


def encode_cloud(cloud):
    return _encode(PCB_MAGIC, as_cloud(cloud))


def decode_cloud(blob, path="<bytes>"):
    rows = _decode(blob, PCB_MAGIC, 3, path)
    if rows.shape[0] == 0:
        raise FormatError(f"{path}: empty point cloud")
    return rows


def encode_planes(planes):
    planes.check(UNIT_TOL)
    return _encode(PLN_MAGIC, planes.as_array())


def decode_planes(blob, path="<bytes>"):
    # values are kept exactly as stored so that read/write round-trips are lossless
    rows = _decode(blob, PLN_MAGIC, 4, path)
    norm = np.linalg.norm(rows[:, :3], axis=1)
    if np.any(np.abs(norm - 1.0) > UNIT_TOL):
        raise FormatError(f"{path}: plane normals are not unit length")
    return PlaneSet.from_array(rows)


def write_cloud(path, cloud):
    _write_atomic(path, encode_cloud(cloud))


def read_cloud(path):
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"{path}: {exc.strerror or exc}") from exc
    return decode_cloud(blob, path)


def write_planes(path, planes):
    _write_atomic(path, encode_planes(planes))


def read_planes(path):
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"{path}: {exc.strerror or exc}") from exc
    return decode_planes(blob, path)
