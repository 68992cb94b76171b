"""Vector arithmetic over Z_q^n and the homomorphic multiset hash built on it.

An element is expanded through an extendable-output function into ``n * d``
bits, sliced into ``n`` unsigned ``d``-bit components, and the digest of a
multiset is the component-wise sum of those vectors modulo ``q = 2**d``.
Because the sum is commutative and invertible, a digest can be updated in
constant time when an element is inserted or removed::

    >>> p = Params(d=16, n=1024)
    >>> a = multiset_hash([b"x", b"y"], p)
    >>> digest_remove(digest_insert(a, b"z"), b"z") == a
    True

Removing an element that was never inserted is *not* detected here; the
digest just moves to some other group element. Presence checks belong to the
row store (see :mod:`hexamorph.db_model`).
"""

from __future__ import annotations

import enum
import hashlib
import struct
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import ConfigError, IncompatibleParamsError, MalformedDigestError

MAX_D = 32
# Domain-separation tag encodes n in two bytes.
MAX_N = 0xFFFF

HMH_MAGIC = b"HMHDIG01"
_HMH_HEADER = struct.Struct("<8sBIB")

# Rows per batch when summing many expansions at once.
_CHUNK = 4096


class Xof(enum.IntEnum):
    SHAKE256 = 1
    SHAKE128 = 2


_XOF_CTORS = {
    Xof.SHAKE256: hashlib.shake_256,
    Xof.SHAKE128: hashlib.shake_128,
}


@dataclass(frozen=True)
class Params:
    """Public hash parameters. ``q`` is always derived as ``2**d``."""

    d: int = 16
    n: int = 1024
    xof_id: Xof = Xof.SHAKE256

    def __post_init__(self):
        if not isinstance(self.d, int) or not 1 <= self.d <= MAX_D:
            raise ConfigError(f"d must be an integer in [1, {MAX_D}], got {self.d!r}")
        if not isinstance(self.n, int) or not 1 <= self.n <= MAX_N:
            raise ConfigError(f"n must be an integer in [1, {MAX_N}], got {self.n!r}")
        if (self.n * self.d) % 8:
            raise ConfigError(f"n*d must be a multiple of 8 (n={self.n}, d={self.d})")
        try:
            object.__setattr__(self, "xof_id", Xof(self.xof_id))
        except ValueError:
            raise ConfigError(f"unknown XOF id {self.xof_id!r}") from None

    @property
    def q(self) -> int:
        return 1 << self.d

    @property
    def mask(self) -> int:
        return (1 << self.d) - 1

    @property
    def digest_size(self) -> int:
        """Serialized digest length in bytes."""
        return self.n * self.d // 8

    @property
    def domain_tag(self) -> bytes:
        return b"H" + self.d.to_bytes(2, "little") + self.n.to_bytes(2, "little")


DEFAULT_PARAMS = Params()


class HashVector:
    """An immutable element of Z_q^n bound to the :class:`Params` that made it.

    Supports ``+``, unary ``-`` and binary ``-``; mixing vectors from
    different parameter sets raises :class:`IncompatibleParamsError`.
    """

    __slots__ = ("_c", "params")

    def __init__(self, components, params: Params):
        try:
            arr = np.array(components, dtype=np.uint64, copy=True).reshape(-1)
        except (OverflowError, ValueError, TypeError) as exc:
            raise MalformedDigestError(f"invalid components: {exc}") from None
        if arr.shape[0] != params.n:
            raise MalformedDigestError(
                f"expected {params.n} components, got {arr.shape[0]}"
            )
        if arr.size and int(arr.max()) > params.mask:
            raise MalformedDigestError(f"component out of range for q={params.q}")
        arr.flags.writeable = False
        self._c = arr
        self.params = params

    @classmethod
    def _wrap(cls, arr: np.ndarray, params: Params) -> "HashVector":
        # Trusted constructor: arr already uint64, reduced and private.
        self = object.__new__(cls)
        arr.flags.writeable = False
        self._c = arr
        self.params = params
        return self

    @classmethod
    def zero(cls, params: Params = DEFAULT_PARAMS) -> "HashVector":
        return cls._wrap(np.zeros(params.n, dtype=np.uint64), params)

    @property
    def components(self) -> np.ndarray:
        """Read-only ``uint64`` view of the components."""
        return self._c

    def tolist(self) -> list[int]:
        return [int(x) for x in self._c]

    def is_zero(self) -> bool:
        return not self._c.any()

    def __len__(self):
        return self.params.n

    def __getitem__(self, j):
        return int(self._c[j])

    def __eq__(self, other):
        if not isinstance(other, HashVector):
            return NotImplemented
        return self.params == other.params and np.array_equal(self._c, other._c)

    def __hash__(self):
        return hash((self.params, self._c.tobytes()))

    def __add__(self, other):
        return vec_add(self, other)

    def __neg__(self):
        return vec_neg(self)

    def __sub__(self, other):
        return vec_add(self, vec_neg(other))

    def __repr__(self):
        head = ", ".join(str(int(x)) for x in self._c[:4])
        more = ", ..." if self.params.n > 4 else ""
        return f"HashVector([{head}{more}], d={self.params.d}, n={self.params.n})"


Digest = HashVector


def _check_same(a: HashVector, b: HashVector) -> Params:
    if a.params != b.params:
        raise IncompatibleParamsError(f"cannot combine {a.params} with {b.params}")
    return a.params


def vec_add(a: HashVector, b: HashVector) -> HashVector:
    p = _check_same(a, b)
    return HashVector._wrap((a._c + b._c) & np.uint64(p.mask), p)


def vec_neg(a: HashVector) -> HashVector:
    p = a.params
    return HashVector._wrap((np.uint64(p.q) - a._c) & np.uint64(p.mask), p)


# --- expansion ---------------------------------------------------------------


def xof_bytes(data: bytes, params: Params) -> bytes:
    """Raw XOF stream (``n*d/8`` bytes) for ``data`` after domain separation."""
    h = _XOF_CTORS[params.xof_id](params.domain_tag)
    h.update(data)
    return h.digest(params.digest_size)


_NATIVE = {8: "<u1", 16: "<u2", 32: "<u4"}


def _unpack(buf: bytes, params: Params, rows: int = 1) -> np.ndarray:
    """Slice a little-endian bit stream into ``rows x n`` components."""
    dt = _NATIVE.get(params.d)
    if dt is not None:
        arr = np.frombuffer(buf, dtype=dt).astype(np.uint64)
    else:
        bits = np.unpackbits(np.frombuffer(buf, dtype=np.uint8), bitorder="little")
        bits = bits.reshape(-1, params.d).astype(np.uint64)
        weights = np.left_shift(np.uint64(1), np.arange(params.d, dtype=np.uint64))
        arr = bits @ weights
    return arr.reshape(rows, params.n) if rows > 1 else arr


def _pack(arr: np.ndarray, params: Params) -> bytes:
    dt = _NATIVE.get(params.d)
    if dt is not None:
        return arr.astype(dt).tobytes()
    shifts = np.arange(params.d, dtype=np.uint64)
    bits = ((arr[:, None] >> shifts) & np.uint64(1)).astype(np.uint8).reshape(-1)
    return np.packbits(bits, bitorder="little").tobytes()


def expand(data: bytes, params: Params = DEFAULT_PARAMS) -> HashVector:
    """Map a byte string to a pseudorandom vector in Z_q^n.

    Component ``j`` is bits ``[j*d, (j+1)*d)`` of the XOF output, reading the
    byte stream least-significant-bit first. For ``d=16`` this is
    ``bytes[2j] + 256*bytes[2j+1]``.
    """
    return HashVector._wrap(_unpack(xof_bytes(data, params), params), params)


def sum_expanded(elements: Iterable[bytes], params: Params = DEFAULT_PARAMS) -> HashVector:
    """``multiset_hash`` for large inputs, batching XOF output through numpy."""
    acc = np.zeros(params.n, dtype=np.uint64)
    mask = np.uint64(params.mask)
    ctor = _XOF_CTORS[params.xof_id]
    tag = params.domain_tag
    size = params.digest_size
    batch: list[bytes] = []

    def flush():
        nonlocal acc
        rows = len(batch)
        block = _unpack(b"".join(batch), params, rows).reshape(rows, params.n)
        # rows * (2**32 - 1) stays far below 2**64 for _CHUNK rows.
        acc = (acc + block.sum(axis=0, dtype=np.uint64)) & mask
        batch.clear()

    for e in elements:
        h = ctor(tag)
        h.update(e)
        batch.append(h.digest(size))
        if len(batch) >= _CHUNK:
            flush()
    if batch:
        flush()
    return HashVector._wrap(acc, params)


def multiset_hash(elements: Iterable[bytes], params: Params = DEFAULT_PARAMS) -> HashVector:
    """Sum of ``expand(e)`` over every element, duplicates counted."""
    return sum_expanded(elements, params)


def digest_insert(digest: HashVector, element: bytes) -> HashVector:
    return vec_add(digest, expand(element, digest.params))


def digest_remove(digest: HashVector, element: bytes) -> HashVector:
    # Cannot tell whether `element` was ever inserted.
    return vec_add(digest, vec_neg(expand(element, digest.params)))


def digest_merge(a: HashVector, b: HashVector) -> HashVector:
    return vec_add(a, b)


# --- serialization -------------------------------------------------------------


def digest_serialize(digest: HashVector) -> bytes:
    return _pack(digest.components, digest.params)


def digest_deserialize(data: bytes, params: Params = DEFAULT_PARAMS) -> HashVector:
    if len(data) != params.digest_size:
        raise MalformedDigestError(
            f"digest must be {params.digest_size} bytes for d={params.d}, n={params.n}; "
            f"got {len(data)}"
        )
    return HashVector._wrap(_unpack(bytes(data), params).copy(), params)


def encode_hmh(digest: HashVector) -> bytes:
    """Self-describing ``.hmh`` container: magic, d, n, xof id, raw digest."""
    p = digest.params
    return _HMH_HEADER.pack(HMH_MAGIC, p.d, p.n, int(p.xof_id)) + digest_serialize(digest)


def decode_hmh(data: bytes) -> HashVector:
    if len(data) < _HMH_HEADER.size:
        raise MalformedDigestError("truncated .hmh header")
    magic, d, n, xof = _HMH_HEADER.unpack_from(data)
    if magic != HMH_MAGIC:
        raise MalformedDigestError(f"bad .hmh magic {magic!r}")
    try:
        params = Params(d=d, n=n, xof_id=xof)
    except ConfigError as exc:
        raise MalformedDigestError(f"bad .hmh parameters: {exc}") from None
    return digest_deserialize(data[_HMH_HEADER.size:], params)


def fingerprint(digest: HashVector) -> str:
    """Short display id: first 8 bytes of SHAKE-256 over the digest bytes."""
    return hashlib.shake_256(digest_serialize(digest)).hexdigest(8)
