"""Database payload files and their integrity check.

A database file is an 8-byte magic, a big-endian u64 payload size, a u64
CRC-64 of the payload, then the payload itself. The whole-file CRC (used by
manifests and the mass store) is computed separately with ``file_crc``.
"""

import os
import shutil
import struct
from pathlib import Path

import crcmod

from fedstore.errors import IntegrityFailure

MAGIC = b"FEDSTDB1"
HEADER = struct.Struct(">8sQQ")
HEADER_SIZE = HEADER.size

# CRC-64/XZ: reflected ECMA-182 polynomial, all-ones init and final xor.
# crcmod folds the final xor into initCrc, hence initCrc=0.
_crc64 = crcmod.mkCrcFun(0x142F0E1EBA9EA3693, initCrc=0, rev=True, xorOut=0xFFFFFFFFFFFFFFFF)

_CHUNK = 1 << 20


def crc64(data, crc=None):
    if crc is None:
        return _crc64(data)
    return _crc64(data, crc)


def file_crc(path):
    crc = None
    with open(path, "rb") as f:
        while True:
            block = f.read(_CHUNK)
            if not block:
                break
            crc = crc64(block, crc)
    return crc64(b"") if crc is None else crc


def encode(payload):
    return HEADER.pack(MAGIC, len(payload), crc64(payload)) + payload


def write_dbfile(path, payload):
    """Write a complete database file atomically. Returns the file size."""
    data = encode(payload)
    atomic_write(path, data)
    return len(data)


def write_placeholder(path):
    """Zero-content database used by attach-by-proxy."""
    return write_dbfile(path, b"")


def _open_tmp(path):
    # the directory usually exists; create it only when the open says not
    d, name = os.path.split(os.fspath(path))
    tmp = os.path.join(d, f".{name}.tmp")
    try:
        return tmp, open(tmp, "wb")
    except FileNotFoundError:
        os.makedirs(d, exist_ok=True)
        return tmp, open(tmp, "wb")


def atomic_write(path, data):
    tmp, f = _open_tmp(path)
    with f:
        f.write(data)
    os.replace(tmp, path)


def atomic_copy(src, dst):
    tmp, f = _open_tmp(dst)
    with f, open(src, "rb") as s:
        shutil.copyfileobj(s, f)
    os.replace(tmp, dst)


def read_payload(path):
    with open(path, "rb") as f:
        data = f.read()
    return data[HEADER_SIZE:]


def verify(path, expected_crc=None):
    """Full integrity scan: header magic, size field, payload CRC, and
    optionally the whole-file CRC from a manifest. Raises IntegrityFailure."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise IntegrityFailure(f"{path}: missing") from None
    if len(data) < HEADER_SIZE:
        raise IntegrityFailure(f"{path}: truncated header")
    magic, size, crc = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise IntegrityFailure(f"{path}: bad magic")
    payload = data[HEADER_SIZE:]
    if size != len(payload):
        raise IntegrityFailure(f"{path}: size field {size} != payload {len(payload)}")
    if crc64(payload) != crc:
        raise IntegrityFailure(f"{path}: payload checksum mismatch")
    if expected_crc is not None and crc64(data) != expected_crc:
        raise IntegrityFailure(f"{path}: file checksum differs from manifest")
    return len(data)
