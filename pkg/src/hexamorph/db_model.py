"""Row database, canonical row encoding and per-update digest deltas.

A row ``(i, x)`` enters the digest as ``expand(encode_row(i, x))``. The index
is a fixed 8-byte big-endian prefix so that ``encode_row`` is injective; with
a variable-width index ``1 || "2a"`` and ``12 || "a"`` would collide.
"""

from __future__ import annotations

import base64
import binascii
import enum
from dataclasses import dataclass, replace
from typing import Iterable, Iterator, Mapping

from .errors import (
    DuplicateIndexError,
    InvalidIndexError,
    MalformedDeltaError,
    MalformedInputError,
    MissingRowError,
    StaleDeltaError,
)
from .hash_core import (
    DEFAULT_PARAMS,
    HashVector,
    Params,
    expand,
    sum_expanded,
    vec_add,
    vec_neg,
)

MAX_INDEX = (1 << 64) - 1


def encode_row(index: int, payload: bytes) -> bytes:
    if not isinstance(index, int) or not 1 <= index <= MAX_INDEX:
        raise InvalidIndexError(f"row index must be in [1, 2**64-1], got {index!r}")
    return index.to_bytes(8, "big") + bytes(payload)


class Kind(enum.IntEnum):
    # Values are the wire codes.
    MODIFY = 0
    INSERT = 1
    DELETE = 2


@dataclass(frozen=True)
class UpdateDelta:
    """One row change. ``version`` is assigned by the distributor on publish.

    Modify carries both payloads, Insert only ``new``, Delete only ``old``.
    """

    kind: Kind
    index: int
    old: bytes | None = None
    new: bytes | None = None
    version: int = 0

    @classmethod
    def modify(cls, index: int, old: bytes, new: bytes, version: int = 0) -> "UpdateDelta":
        return cls(Kind.MODIFY, index, old, new, version)

    @classmethod
    def insert(cls, index: int, new: bytes, version: int = 0) -> "UpdateDelta":
        return cls(Kind.INSERT, index, None, new, version)

    @classmethod
    def delete(cls, index: int, old: bytes, version: int = 0) -> "UpdateDelta":
        return cls(Kind.DELETE, index, old, None, version)

    def with_version(self, version: int) -> "UpdateDelta":
        return replace(self, version=version)

    def check(self) -> None:
        """Raise :class:`MalformedDeltaError` unless payloads match ``kind``."""
        try:
            kind = Kind(self.kind)
        except ValueError:
            raise MalformedDeltaError(f"unknown delta kind {self.kind!r}") from None
        need_old = kind in (Kind.MODIFY, Kind.DELETE)
        need_new = kind in (Kind.MODIFY, Kind.INSERT)
        if need_old != (self.old is not None) or need_new != (self.new is not None):
            raise MalformedDeltaError(f"{kind.name} delta has wrong payload fields")
        if not isinstance(self.index, int) or not 1 <= self.index <= MAX_INDEX:
            raise MalformedDeltaError(f"bad row index {self.index!r}")
        if not 0 <= self.version <= MAX_INDEX:
            raise MalformedDeltaError(f"bad version {self.version!r}")


def delta_hash(delta: UpdateDelta, params: Params = DEFAULT_PARAMS) -> HashVector:
    """Digest contribution of ``delta``: ``+expand(new) - expand(old)``."""
    delta.check()
    out = HashVector.zero(params)
    if delta.new is not None:
        out = vec_add(out, expand(encode_row(delta.index, delta.new), params))
    if delta.old is not None:
        out = vec_add(out, vec_neg(expand(encode_row(delta.index, delta.old), params)))
    return out


class Database:
    """Rows keyed by index; iteration is in ascending index order.

    Public operations treat a ``Database`` as a value: :meth:`apply` returns a
    new database. Owners that need O(1) updates (the distributor, a
    subscriber committing a verified batch) use :meth:`apply_inplace`.
    """

    def __init__(self, rows: Mapping[int, bytes] | Iterable[tuple[int, bytes]] = (),
                 params: Params = DEFAULT_PARAMS):
        self.params = params
        self._rows: dict[int, bytes] = {}
        items = rows.items() if isinstance(rows, Mapping) else rows
        for index, payload in items:
            encode_row(index, b"")
            if index in self._rows:
                raise DuplicateIndexError(f"row {index} given twice")
            self._rows[index] = bytes(payload)

    def __len__(self):
        return len(self._rows)

    def __contains__(self, index):
        return index in self._rows

    def __getitem__(self, index) -> bytes:
        return self._rows[index]

    def get(self, index, default=None):
        return self._rows.get(index, default)

    def __iter__(self) -> Iterator[int]:
        return iter(sorted(self._rows))

    def items(self) -> Iterator[tuple[int, bytes]]:
        for i in sorted(self._rows):
            yield i, self._rows[i]

    def __eq__(self, other):
        if not isinstance(other, Database):
            return NotImplemented
        return self.params == other.params and self._rows == other._rows

    def __repr__(self):
        return f"Database({len(self)} rows, d={self.params.d}, n={self.params.n})"

    def copy(self) -> "Database":
        new = Database(params=self.params)
        new._rows = dict(self._rows)
        return new

    def check(self, delta: UpdateDelta) -> None:
        """Raise if ``delta`` cannot be applied to the current rows."""
        delta.check()
        current = self._rows.get(delta.index)
        if delta.kind == Kind.INSERT:
            if current is not None:
                raise DuplicateIndexError(f"row {delta.index} already exists")
            return
        if current is None:
            raise MissingRowError(f"row {delta.index} does not exist")
        if current != delta.old:
            raise StaleDeltaError(f"row {delta.index} does not hold the expected old payload")

    def apply_inplace(self, delta: UpdateDelta) -> None:
        self.check(delta)
        if delta.kind == Kind.DELETE:
            del self._rows[delta.index]
        else:
            self._rows[delta.index] = bytes(delta.new)

    def apply(self, delta: UpdateDelta) -> "Database":
        self.check(delta)
        new = self.copy()
        new.apply_inplace(delta)
        return new

    def encoded_rows(self) -> Iterator[bytes]:
        # Order is irrelevant to the digest; skip the sort.
        for i, x in self._rows.items():
            yield i.to_bytes(8, "big") + x

    # --- fixture format: "index<TAB>base64(payload)" per line ---

    def dumps(self) -> str:
        return "".join(
            f"{i}\t{base64.b64encode(x).decode('ascii')}\n" for i, x in self.items()
        )

    @classmethod
    def loads(cls, text: str, params: Params = DEFAULT_PARAMS) -> "Database":
        rows = []
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise MalformedInputError(f"db line {lineno}: expected 2 fields")
            rows.append((_parse_u64(parts[0], lineno), _b64(parts[1], lineno)))
        try:
            return cls(rows, params)
        except (DuplicateIndexError, InvalidIndexError) as exc:
            raise MalformedInputError(f"db fixture: {exc}") from None


def apply_to_db(db: Database, delta: UpdateDelta) -> Database:
    return db.apply(delta)


def full_hash(db: Database) -> HashVector:
    """O(N) recompute of the database digest from every row."""
    return sum_expanded(db.encoded_rows(), db.params)


# --- delta log lines: version, kind, index, b64(old), b64(new) ---

_KIND_NAMES = {Kind.MODIFY: "modify", Kind.INSERT: "insert", Kind.DELETE: "delete"}
_KIND_BY_NAME = {v: k for k, v in _KIND_NAMES.items()}


def format_log_line(delta: UpdateDelta) -> str:
    enc = lambda b: "" if b is None else base64.b64encode(b).decode("ascii")  # noqa: E731
    return (f"{delta.version}\t{_KIND_NAMES[delta.kind]}\t{delta.index}\t"
            f"{enc(delta.old)}\t{enc(delta.new)}\n")


def parse_log_line(line: str, lineno: int = 0) -> UpdateDelta:
    parts = line.rstrip("\n").split("\t")
    if len(parts) != 5:
        raise MalformedInputError(f"log line {lineno}: expected 5 fields")
    version = _parse_u64(parts[0], lineno, allow_zero=True)
    kind = _KIND_BY_NAME.get(parts[1])
    if kind is None:
        raise MalformedInputError(f"log line {lineno}: unknown kind {parts[1]!r}")
    index = _parse_u64(parts[2], lineno)
    # Empty field = absent payload; present-but-empty payloads only occur
    # where the kind requires the field, so the two cannot be confused.
    old = _b64(parts[3], lineno) if kind != Kind.INSERT else None
    new = _b64(parts[4], lineno) if kind != Kind.DELETE else None
    if (kind == Kind.INSERT and parts[3]) or (kind == Kind.DELETE and parts[4]):
        raise MalformedInputError(f"log line {lineno}: unexpected payload for {parts[1]}")
    delta = UpdateDelta(kind, index, old, new, version)
    try:
        delta.check()
    except MalformedDeltaError as exc:
        raise MalformedInputError(f"log line {lineno}: {exc}") from None
    return delta


def _parse_u64(field: str, lineno: int, allow_zero: bool = False) -> int:
    if not field.isdigit() or not field.isascii():
        raise MalformedInputError(f"line {lineno}: not an unsigned integer: {field!r}")
    value = int(field)
    if value > MAX_INDEX or (value == 0 and not allow_zero):
        raise MalformedInputError(f"line {lineno}: integer out of range: {field!r}")
    return value


def _b64(field: str, lineno: int) -> bytes:
    try:
        return base64.b64decode(field, validate=True)
    except (binascii.Error, ValueError):
        raise MalformedInputError(f"line {lineno}: invalid base64") from None
