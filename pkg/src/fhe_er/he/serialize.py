"""Binary container for ciphertexts and key sets.

Layout: ``b"HERS"``, format version (u16), object kind (u8), the 32-byte
parameter digest, then a kind-specific header and length-prefixed
little-endian int64 residue arrays.
"""

from __future__ import annotations

import io
import struct

import numpy as np

from .errors import FormatError
from .params import HeParams
from .scheme import CipherVector, KeySet

MAGIC = b"HERS"
VERSION = 1
KIND_CIPHERTEXT = 1
KIND_KEYSET = 2


def _write_array(buf: io.BytesIO, a: np.ndarray):
    a = np.ascontiguousarray(a, dtype="<i8")
    rows, cols = a.shape
    buf.write(struct.pack("<IIQ", rows, cols, a.nbytes))
    buf.write(a.tobytes())


def _unpack(fmt: str, buf: io.BytesIO):
    size = struct.calcsize(fmt)
    raw = buf.read(size)
    if len(raw) != size:
        raise FormatError("truncated header")
    return struct.unpack(fmt, raw)


def _read_array(buf: io.BytesIO) -> np.ndarray:
    head = buf.read(16)
    if len(head) != 16:
        raise FormatError("truncated array header")
    rows, cols, nbytes = struct.unpack("<IIQ", head)
    if nbytes != rows * cols * 8:
        raise FormatError("array length prefix disagrees with its shape")
    raw = buf.read(nbytes)
    if len(raw) != nbytes:
        raise FormatError("truncated array body")
    a = np.frombuffer(raw, dtype="<i8").reshape(rows, cols).astype(np.int64)
    a.setflags(write=False)
    return a


def _header(kind: int, params: HeParams) -> bytes:
    return MAGIC + struct.pack("<HB", VERSION, kind) + params.digest


def _check_header(buf: io.BytesIO, kind: int, params: HeParams):
    head = buf.read(4 + 3 + 32)
    if len(head) < 39 or head[:4] != MAGIC:
        raise FormatError("not a HERS object")
    version, got_kind = struct.unpack("<HB", head[4:7])
    if version != VERSION:
        raise FormatError(f"unsupported format version {version}")
    if got_kind != kind:
        raise FormatError(f"expected object kind {kind}, found {got_kind}")
    if head[7:39] != params.digest:
        raise FormatError("parameter digest mismatch")


def dump_ciphertext(ct: CipherVector) -> bytes:
    buf = io.BytesIO()
    buf.write(_header(KIND_CIPHERTEXT, ct.params))
    buf.write(struct.pack("<HdI", ct.level, ct.scale, ct.slot_count))
    _write_array(buf, ct.c0)
    _write_array(buf, ct.c1)
    return buf.getvalue()


def load_ciphertext(data: bytes, params: HeParams) -> CipherVector:
    buf = io.BytesIO(data)
    _check_header(buf, KIND_CIPHERTEXT, params)
    level, scale, slot_count = _unpack("<HdI", buf)
    c0 = _read_array(buf)
    c1 = _read_array(buf)
    if c0.shape != (level + 1, params.ring_degree) or c1.shape != c0.shape:
        raise FormatError("ciphertext shape does not match its level")
    if buf.read(1):
        raise FormatError("trailing bytes after ciphertext")
    return CipherVector(c0, c1, level, scale, slot_count, params)


def dump_keyset(keys: KeySet, include_secret: bool = True) -> bytes:
    buf = io.BytesIO()
    buf.write(_header(KIND_KEYSET, keys.params))
    has_secret = include_secret and keys.secret_key is not None
    has_relin = keys.relin_key is not None
    buf.write(struct.pack("<BBI", int(has_secret), int(has_relin), len(keys.rotation_keys)))
    if has_secret:
        _write_array(buf, keys.secret_key)
    _write_array(buf, keys.public_key[0])
    _write_array(buf, keys.public_key[1])
    if has_relin:
        _write_array(buf, keys.relin_key[0])
        _write_array(buf, keys.relin_key[1])
    for gal in sorted(keys.rotation_keys):
        buf.write(struct.pack("<Q", gal))
        _write_array(buf, keys.rotation_keys[gal][0])
        _write_array(buf, keys.rotation_keys[gal][1])
    return buf.getvalue()


def load_keyset(data: bytes, params: HeParams) -> KeySet:
    buf = io.BytesIO(data)
    _check_header(buf, KIND_KEYSET, params)
    has_secret, has_relin, n_rot = _unpack("<BBI", buf)
    secret = _read_array(buf) if has_secret else None
    pk = (_read_array(buf), _read_array(buf))
    rlk = (_read_array(buf), _read_array(buf)) if has_relin else None
    rot = {}
    for _ in range(n_rot):
        (gal,) = _unpack("<Q", buf)
        rot[int(gal)] = (_read_array(buf), _read_array(buf))
    return KeySet(params, secret, pk, rlk, rot)


def peek_digest(data: bytes) -> bytes:
    if data[:4] != MAGIC or len(data) < 39:
        raise FormatError("not a HERS object")
    return data[7:39]
