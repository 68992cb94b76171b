"""Bit-exact message encodings shared by the simulator and the CLI.

All integers are big-endian. Layouts::

    request   = "HMHREQ01" | v:u64 | w:u64
    response  = "HMHRSP01" | count:u32 | delta* | signed_digest
    delta     = version:u64 | kind:u8 | index:u64
                | old_len:u32 | old | new_len:u32 | new
    error     = "HMHERR01" | code:u8 | utf-8 message

An absent payload is written with length 0. Since an Insert never has an old
payload and a Delete never has a new one, the kind byte disambiguates.
"""

from __future__ import annotations

import struct

from .db_model import Kind, UpdateDelta
from .errors import (
    HexaMorphError,
    MalformedDeltaError,
    MalformedInputError,
    MalformedMessageError,
    error_for_wire_code,
)
from .hash_core import Params
from .signatures import SignedDigest

REQ_MAGIC = b"HMHREQ01"
RSP_MAGIC = b"HMHRSP01"
ERR_MAGIC = b"HMHERR01"

_REQ = struct.Struct(">8sQQ")
_DELTA_HEAD = struct.Struct(">QBQI")


def encode_request(v: int, w: int) -> bytes:
    return _REQ.pack(REQ_MAGIC, v, w)


def decode_request(data: bytes) -> tuple[int, int]:
    if len(data) != _REQ.size or data[:8] != REQ_MAGIC:
        raise MalformedMessageError("malformed GetUpdates request")
    _, v, w = _REQ.unpack(data)
    return v, w


def encode_delta(delta: UpdateDelta) -> bytes:
    old = delta.old or b""
    new = delta.new or b""
    return (_DELTA_HEAD.pack(delta.version, int(delta.kind), delta.index, len(old)) + old
            + struct.pack(">I", len(new)) + new)


def _read_delta(data: bytes, off: int) -> tuple[UpdateDelta, int]:
    try:
        version, kind_b, index, old_len = _DELTA_HEAD.unpack_from(data, off)
        off += _DELTA_HEAD.size
        old = data[off:off + old_len]
        off += old_len
        (new_len,) = struct.unpack_from(">I", data, off)
        off += 4
        new = data[off:off + new_len]
        off += new_len
    except struct.error:
        raise MalformedMessageError("truncated delta record") from None
    if off > len(data):
        raise MalformedMessageError("truncated delta payload")
    try:
        kind = Kind(kind_b)
    except ValueError:
        raise MalformedMessageError(f"unknown delta kind byte {kind_b}") from None
    if kind == Kind.INSERT:
        if old_len:
            raise MalformedMessageError("insert delta carries an old payload")
        old = None
    if kind == Kind.DELETE:
        if new_len:
            raise MalformedMessageError("delete delta carries a new payload")
        new = None
    delta = UpdateDelta(kind, index, old, new, version)
    try:
        delta.check()
    except MalformedDeltaError as exc:
        raise MalformedMessageError(str(exc)) from None
    return delta, off


def encode_response(deltas: list[UpdateDelta], signed: SignedDigest) -> bytes:
    parts = [RSP_MAGIC, struct.pack(">I", len(deltas))]
    parts.extend(encode_delta(d) for d in deltas)
    parts.append(signed.to_bytes())
    return b"".join(parts)


def decode_response(data: bytes, params: Params) -> tuple[list[UpdateDelta], SignedDigest]:
    """Parse a response. An ``HMHERR01`` message is re-raised as its error class."""
    data = bytes(data)
    if data[:8] == ERR_MAGIC:
        raise decode_error(data)
    if len(data) < 12 or data[:8] != RSP_MAGIC:
        raise MalformedMessageError("not a GetUpdates response")
    (count,) = struct.unpack_from(">I", data, 8)
    off = 12
    deltas = []
    for _ in range(count):
        delta, off = _read_delta(data, off)
        deltas.append(delta)
    try:
        signed, off = SignedDigest.read_from(data, off, params)
    except MalformedInputError as exc:
        raise MalformedMessageError(f"signed digest: {exc}") from None
    if off != len(data):
        raise MalformedMessageError("trailing bytes after response")
    return deltas, signed


def encode_error(exc: HexaMorphError) -> bytes:
    return ERR_MAGIC + bytes([exc.wire_code & 0xFF]) + str(exc).encode("utf-8", "replace")


def decode_error(data: bytes) -> HexaMorphError:
    if len(data) < 9 or data[:8] != ERR_MAGIC:
        return MalformedMessageError("malformed error response")
    cls = error_for_wire_code(data[8])
    return cls(data[9:].decode("utf-8", "replace"))
