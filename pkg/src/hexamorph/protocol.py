"""Distributor and subscriber state machines for signed incremental sync.

The distributor folds each row change into its digest in O(1), signs the
``(version, digest)`` pair and appends the change to its log. A subscriber
at version ``v`` fetches changes ``v+1..w`` plus the signed digest for ``w``,
folds them into its own digest, and commits only if the result verifies.

Version 0 is the empty database with the zero digest, signed at setup, so a
fresh subscriber always has something verifiable to start from.
"""

from __future__ import annotations

import hashlib
import struct
import threading
from dataclasses import dataclass

from . import wire
from .db_model import Database, Kind, UpdateDelta, delta_hash, full_hash
from .errors import (
    ConfigError,
    CorruptDeltaError,
    DeltaNotApplicableError,
    DuplicateIndexError,
    HexaMorphError,
    InvalidRangeError,
    LogTruncatedError,
    MalformedInputError,
    MissingRowError,
    OutOfOrderError,
    StaleDeltaError,
    TamperDetectedError,
    UnknownVersionError,
)
from .hash_core import (
    HashVector,
    Params,
    Xof,
    digest_serialize,
    fingerprint,
    vec_add,
    vec_neg,
)
from .signatures import (
    Scheme,
    SignedDigest,
    canonical_message,
    keygen,
    sign_digest,
    verify,
)

# security level -> (d, n)
SECURITY_PRESETS = {
    128: (16, 1024),
    192: (16, 2048),
    256: (16, 4096),
}

PP_MAGIC = b"HMHPP001"


@dataclass(frozen=True)
class PublicParameters:
    hash_params: Params
    public_key: bytes
    scheme_id: Scheme = Scheme.ED25519
    # Carried for completeness; nothing consumes it.
    aux_seed: bytes | None = None

    def to_bytes(self) -> bytes:
        p = self.hash_params
        aux = self.aux_seed or b""
        return (PP_MAGIC + struct.pack("<BIBB", p.d, p.n, int(p.xof_id), int(self.scheme_id))
                + struct.pack(">H", len(self.public_key)) + self.public_key
                + struct.pack(">BH", self.aux_seed is not None, len(aux)) + aux)

    @classmethod
    def from_bytes(cls, data: bytes) -> "PublicParameters":
        try:
            if data[:8] != PP_MAGIC:
                raise MalformedInputError("not a public-parameters file")
            d, n, xof, scheme = struct.unpack_from("<BIBB", data, 8)
            off = 15
            (pklen,) = struct.unpack_from(">H", data, off)
            off += 2
            pk = data[off:off + pklen]
            off += pklen
            has_aux, auxlen = struct.unpack_from(">BH", data, off)
            off += 3
            aux = data[off:off + auxlen]
            off += auxlen
        except struct.error:
            raise MalformedInputError("truncated public-parameters file") from None
        if off != len(data) or len(pk) != pklen or len(aux) != auxlen:
            raise MalformedInputError("public-parameters file has bad lengths")
        try:
            params = Params(d=d, n=n, xof_id=Xof(xof))
            scheme_id = Scheme(scheme)
        except (ValueError, ConfigError) as exc:
            raise MalformedInputError(f"bad public parameters: {exc}") from None
        return cls(params, bytes(pk), scheme_id, bytes(aux) if has_aux else None)


def setup(security_level: int = 128, entropy: bytes = b"", *,
          scheme_id: Scheme = Scheme.ED25519,
          aux_seed: bool = False) -> tuple[PublicParameters, bytes]:
    """Pick ``(d, n)`` for the security level and derive the signing key pair."""
    if security_level not in SECURITY_PRESETS:
        raise ConfigError(
            f"unsupported security level {security_level}; choose from {sorted(SECURITY_PRESETS)}"
        )
    if len(entropy) < 32:
        raise ConfigError("setup needs at least 32 bytes of entropy")
    d, n = SECURITY_PRESETS[security_level]
    keys = keygen(scheme_id, entropy)
    rho = None
    if aux_seed:
        rho = hashlib.shake_256(b"HMHAUX" + entropy).digest(security_level // 8)
    pp = PublicParameters(Params(d=d, n=n), keys.public_key, keys.scheme_id, rho)
    return pp, keys.secret_key


class UpdateLog:
    """Deltas for versions ``floor+1 .. head`` and signatures for ``floor .. head``.

    Anything at or below ``floor`` has been compacted away (or never existed,
    for a distributor bootstrapped from a snapshot).
    """

    def __init__(self, floor: int = 0, floor_signature: bytes = b""):
        self.floor = floor
        self._deltas: list[UpdateDelta] = []
        self._signatures: list[bytes] = [floor_signature]

    @property
    def head(self) -> int:
        return self.floor + len(self._deltas)

    def __len__(self):
        return len(self._deltas)

    def append(self, delta: UpdateDelta, signature: bytes) -> None:
        if delta.version != self.head + 1:
            raise OutOfOrderError(f"log expects version {self.head + 1}, got {delta.version}")
        self._deltas.append(delta)
        self._signatures.append(signature)

    def deltas(self, v: int, w: int) -> list[UpdateDelta]:
        """Deltas for versions ``v+1 .. w``."""
        if v < self.floor:
            raise LogTruncatedError(
                f"versions up to {self.floor} were compacted; full resync required"
            )
        if w > self.head:
            raise UnknownVersionError(f"version {w} does not exist (head is {self.head})")
        return self._deltas[v - self.floor:w - self.floor]

    def signature(self, version: int) -> bytes:
        if version < self.floor or version > self.head:
            raise UnknownVersionError(f"no signature retained for version {version}")
        return self._signatures[version - self.floor]

    def compact(self, new_floor: int) -> None:
        if not self.floor <= new_floor <= self.head:
            raise InvalidRangeError(f"compaction floor {new_floor} outside [{self.floor}, {self.head}]")
        cut = new_floor - self.floor
        self._deltas = self._deltas[cut:]
        self._signatures = self._signatures[cut:]
        self.floor = new_floor

    def __iter__(self):
        return iter(self._deltas)

    def signatures(self) -> list[tuple[int, bytes]]:
        return [(self.floor + k, s) for k, s in enumerate(self._signatures)]

    @classmethod
    def rebuild(cls, floor: int, deltas: list[UpdateDelta],
                signatures: list[bytes]) -> "UpdateLog":
        """Inverse of iterating + :meth:`signatures`; validates continuity."""
        if len(signatures) != len(deltas) + 1:
            raise MalformedInputError("log needs exactly one signature per version")
        log = cls(floor, signatures[0])
        for delta, sig in zip(deltas, signatures[1:]):
            try:
                log.append(delta, sig)
            except OutOfOrderError as exc:
                raise MalformedInputError(f"log is not contiguous: {exc}") from None
        return log


class Distributor:
    """Authoritative copy. One writer at a time; reads see a consistent state."""

    def __init__(self, pp: PublicParameters, secret_key: bytes):
        self.pp = pp
        self._sk = secret_key
        self._lock = threading.Lock()
        self._db = Database(params=pp.hash_params)
        self._digest = HashVector.zero(pp.hash_params)
        genesis = self._sign(0, self._digest)
        self._version = 0
        self._signed = genesis
        self.log = UpdateLog(0, genesis.signature)

    @classmethod
    def from_snapshot(cls, pp: PublicParameters, secret_key: bytes, db: Database,
                      version: int, digest: HashVector | None = None) -> "Distributor":
        """Start from an existing database at ``version`` with no log below it."""
        if db.params != pp.hash_params:
            raise ConfigError("database params differ from public parameters")
        self = cls.__new__(cls)
        self.pp = pp
        self._sk = secret_key
        self._lock = threading.Lock()
        self._db = db.copy()
        self._digest = digest if digest is not None else full_hash(self._db)
        self._version = version
        self._signed = self._sign(version, self._digest)
        self.log = UpdateLog(version, self._signed.signature)
        return self

    @classmethod
    def restore(cls, pp: PublicParameters, secret_key: bytes, db: Database,
                head: SignedDigest, log: UpdateLog) -> "Distributor":
        """Rebuild from persisted state without re-signing anything."""
        if log.head != head.version:
            raise MalformedInputError(f"log ends at {log.head} but head is {head.version}")
        if log.signature(head.version) != head.signature:
            raise MalformedInputError("head signature differs from the log's last signature")
        self = cls.__new__(cls)
        self.pp = pp
        self._sk = secret_key
        self._lock = threading.Lock()
        self._db = db
        self._digest = head.digest
        self._version = head.version
        self._signed = head
        self.log = log
        return self

    def _sign(self, version: int, digest: HashVector) -> SignedDigest:
        return sign_digest(self._sk, version, digest, self.pp.scheme_id)

    @property
    def version(self) -> int:
        return self._version

    @property
    def digest(self) -> HashVector:
        return self._digest

    @property
    def signed(self) -> SignedDigest:
        return self._signed

    @property
    def db(self) -> Database:
        """The live database. Treat as read-only."""
        return self._db

    def publish(self, delta: UpdateDelta) -> SignedDigest:
        """Apply one change, returning the signed digest of the new version.

        On any error the distributor is left exactly as it was.
        """
        with self._lock:
            self._db.check(delta)
            version = self._version + 1
            delta = delta.with_version(version)
            digest = vec_add(self._digest, delta_hash(delta, self.pp.hash_params))
            signed = self._sign(version, digest)
            # Commit; nothing below can fail for a checked delta.
            self._db.apply_inplace(delta)
            self.log.append(delta, signed.signature)
            self._digest, self._version, self._signed = digest, version, signed
            return signed

    def digest_at(self, version: int) -> HashVector:
        """Digest of a retained historical version, rebuilt by unwinding deltas."""
        if version == self._version:
            return self._digest
        digest = self._digest
        for delta in self.log.deltas(version, self._version):
            digest = vec_add(digest, vec_neg(delta_hash(delta, self.pp.hash_params)))
        return digest

    def get_updates(self, v: int, w: int) -> tuple[list[UpdateDelta], SignedDigest]:
        if w <= v:
            raise InvalidRangeError(f"invalid version range: w={w} <= v={v}")
        with self._lock:
            if w > self._version:
                raise UnknownVersionError(f"version {w} does not exist (head is {self._version})")
            deltas = self.log.deltas(v, w)
            signed = SignedDigest(w, self.digest_at(w), self.log.signature(w), self.pp.scheme_id)
        return list(deltas), signed

    def handle(self, request: bytes) -> bytes:
        """Serve one wire-encoded GetUpdates request."""
        try:
            v, w = wire.decode_request(request)
            deltas, signed = self.get_updates(v, w)
        except HexaMorphError as exc:
            return wire.encode_error(exc)
        return wire.encode_response(deltas, signed)

    def snapshot(self) -> tuple[Database, SignedDigest]:
        """Database copy plus current signed digest, for full resync."""
        with self._lock:
            return self._db.copy(), self._signed

    def compact(self, floor: int) -> None:
        with self._lock:
            self.log.compact(floor)

    def audit(self) -> bool:
        return full_hash(self._db) == self._digest


@dataclass(frozen=True)
class ValidationReport:
    ok: bool
    digest_match: bool
    signature_valid: bool
    incremental_match: bool
    version: int
    recomputed: str
    expected: str

    @property
    def reason(self) -> str:
        if self.ok:
            return "ok"
        return "digest-mismatch" if not self.digest_match else "signature-invalid"


_DELETED = object()


class Subscriber:
    """Local replica. Single writer; every commit is verified first."""

    def __init__(self, pp: PublicParameters, genesis: SignedDigest | None = None):
        self.pp = pp
        self._db = Database(params=pp.hash_params)
        self._digest = HashVector.zero(pp.hash_params)
        self._version = 0
        if genesis is None:
            self._last_signed = None
        else:
            if genesis.version != 0 or not genesis.digest.is_zero():
                raise TamperDetectedError("genesis must be version 0 with the zero digest")
            self._check_signature(genesis.version, self._digest, genesis)
            self._last_signed = genesis

    @classmethod
    def from_snapshot(cls, pp: PublicParameters, db: Database,
                      signed: SignedDigest) -> "Subscriber":
        """Full resync: adopt ``db`` only if its recomputed digest verifies."""
        recomputed = full_hash(db)
        if recomputed != signed.digest:
            raise TamperDetectedError("snapshot database does not match its signed digest")
        self = cls(pp)
        self._check_signature(signed.version, recomputed, signed)
        self._db = db.copy()
        self._digest = recomputed
        self._version = signed.version
        self._last_signed = signed
        return self

    @classmethod
    def restore(cls, pp: PublicParameters, db: Database, digest: HashVector,
                last_signed: SignedDigest) -> "Subscriber":
        """Reload persisted state as-is. Run :meth:`validate` to audit it."""
        self = cls(pp)
        self._db = db
        self._digest = digest
        self._version = last_signed.version
        self._last_signed = last_signed
        return self

    @property
    def version(self) -> int:
        return self._version

    @property
    def digest(self) -> HashVector:
        return self._digest

    @property
    def last_signed(self) -> SignedDigest | None:
        return self._last_signed

    @property
    def db(self) -> Database:
        return self._db

    def _check_signature(self, version: int, digest: HashVector, signed: SignedDigest) -> None:
        if signed.scheme_id != self.pp.scheme_id:
            raise TamperDetectedError("signed digest uses a different signature scheme")
        try:
            ok = verify(self.pp.public_key, canonical_message(version, digest),
                        signed.signature, self.pp.scheme_id)
        except MalformedInputError as exc:
            raise TamperDetectedError(f"unverifiable signature: {exc}") from None
        if not ok:
            raise TamperDetectedError(f"signature does not verify for version {version}")

    def apply_updates(self, deltas: list[UpdateDelta], signed: SignedDigest) -> None:
        """Fold ``deltas`` and commit them iff the result verifies against ``signed``.

        All-or-nothing: on any error the replica, digest and version are
        untouched.
        """
        expected = self._version + 1
        for delta in deltas:
            if delta.version != expected:
                raise OutOfOrderError(f"expected delta version {expected}, got {delta.version}")
            expected += 1
        if signed.version != expected - 1:
            raise OutOfOrderError(
                f"signed digest is for version {signed.version}, deltas end at {expected - 1}"
            )

        params = self.pp.hash_params
        pending: dict[int, object] = {}
        digest = self._digest
        for delta in deltas:
            current = pending.get(delta.index)
            if current is None:
                current = self._db.get(delta.index)
            elif current is _DELETED:
                current = None
            try:
                _check_against(delta, current)
            except DeltaNotApplicableError as exc:
                raise CorruptDeltaError(f"delta v{delta.version} does not apply: {exc}") from None
            pending[delta.index] = _DELETED if delta.kind == Kind.DELETE else delta.new
            digest = vec_add(digest, delta_hash(delta, params))

        if digest != signed.digest:
            raise TamperDetectedError(
                f"folded digest {fingerprint(digest)} != signed digest {fingerprint(signed.digest)}"
            )
        self._check_signature(signed.version, digest, signed)

        for delta in deltas:
            self._db.apply_inplace(delta)
        self._digest = digest
        self._version = signed.version
        self._last_signed = signed

    def request(self, w: int) -> bytes:
        return wire.encode_request(self._version, w)

    def receive(self, response: bytes) -> None:
        deltas, signed = wire.decode_response(response, self.pp.hash_params)
        self.apply_updates(deltas, signed)

    def validate(self) -> ValidationReport:
        """Recompute the digest from every row and check the last signature."""
        recomputed = full_hash(self._db)
        signed = self._last_signed
        if signed is None:
            return ValidationReport(False, False, False, recomputed == self._digest,
                                    self._version, fingerprint(recomputed), "")
        digest_match = recomputed == signed.digest
        try:
            sig_ok = signed.scheme_id == self.pp.scheme_id and verify(
                self.pp.public_key, canonical_message(signed.version, recomputed),
                signed.signature, self.pp.scheme_id)
        except MalformedInputError:
            sig_ok = False
        return ValidationReport(
            ok=digest_match and sig_ok,
            digest_match=digest_match,
            signature_valid=sig_ok,
            incremental_match=recomputed == self._digest,
            version=signed.version,
            recomputed=fingerprint(recomputed),
            expected=fingerprint(signed.digest),
        )

    def state_bytes(self) -> bytes:
        """Canonical serialization of the whole subscriber state."""
        signed = self._last_signed.to_bytes() if self._last_signed is not None else b""
        return b"".join([
            self._version.to_bytes(8, "big"),
            digest_serialize(self._digest),
            signed,
            self._db.dumps().encode("ascii"),
        ])


def _check_against(delta: UpdateDelta, current: bytes | None) -> None:
    if delta.kind == Kind.INSERT:
        if current is not None:
            raise DuplicateIndexError(f"row {delta.index} already exists")
    elif current is None:
        raise MissingRowError(f"row {delta.index} does not exist")
    elif current != delta.old:
        raise StaleDeltaError(f"row {delta.index} old payload mismatch")

