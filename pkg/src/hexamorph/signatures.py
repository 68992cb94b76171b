"""Pluggable signatures over ``(version, digest)`` pairs.

Three schemes are registered:

* ``ED25519``: the default. Signatures are deterministic, so no nonce handling.
* ``ECDSA_SECP256K1``: deterministic (RFC 6979) ECDSA with SHA-256.
* ``NULLSIG``: INSECURE keyed-XOF tag for dependency-free tests. The
  "public" key equals the secret key; anyone who can verify can forge.

Keys are generated deterministically from caller-supplied entropy so that
tests and CLI fixtures are reproducible.
"""

from __future__ import annotations

import enum
import hashlib
import struct
from dataclasses import dataclass

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ec, ed25519

from .errors import ConfigError, MalformedInputError, UnsupportedSchemeError
from .hash_core import HashVector, Params, digest_deserialize, digest_serialize

SIG_MAGIC = b"HMHSIG01"
KEY_MAGIC = b"HMHKEY01"
MIN_ENTROPY = 32

_SECP256K1_ORDER = 0xFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFEBAAEDCE6AF48A03BBFD25E8CD0364141


class Scheme(enum.IntEnum):
    NULLSIG = 0
    ED25519 = 1
    ECDSA_SECP256K1 = 2


def _scheme(scheme_id) -> Scheme:
    try:
        return Scheme(scheme_id)
    except ValueError:
        raise UnsupportedSchemeError(f"unsupported signature scheme {scheme_id!r}") from None


@dataclass(frozen=True)
class KeyPair:
    secret_key: bytes
    public_key: bytes
    scheme_id: Scheme = Scheme.ED25519


def _seed(entropy: bytes, label: bytes, size: int) -> bytes:
    return hashlib.shake_256(b"HMHKEYGEN" + label + entropy).digest(size)


def keygen(scheme_id: Scheme = Scheme.ED25519, entropy: bytes = b"") -> KeyPair:
    scheme = _scheme(scheme_id)
    entropy = bytes(entropy)
    if scheme == Scheme.NULLSIG:
        sk = _seed(entropy, b"null", 32)
        return KeyPair(sk, sk, scheme)
    if len(entropy) < MIN_ENTROPY:
        raise ConfigError(f"need at least {MIN_ENTROPY} bytes of entropy")
    if scheme == Scheme.ED25519:
        sk = _seed(entropy, b"ed25519", 32)
        priv = ed25519.Ed25519PrivateKey.from_private_bytes(sk)
        pk = priv.public_key().public_bytes(
            serialization.Encoding.Raw, serialization.PublicFormat.Raw
        )
        return KeyPair(sk, pk, scheme)
    # secp256k1: reduce a wide seed into [1, order-1].
    scalar = int.from_bytes(_seed(entropy, b"secp256k1", 48), "big") % (_SECP256K1_ORDER - 1) + 1
    priv = ec.derive_private_key(scalar, ec.SECP256K1())
    pk = priv.public_key().public_bytes(
        serialization.Encoding.X962, serialization.PublicFormat.CompressedPoint
    )
    return KeyPair(scalar.to_bytes(32, "big"), pk, scheme)


def sign(secret_key: bytes, message: bytes, scheme_id: Scheme = Scheme.ED25519) -> bytes:
    scheme = _scheme(scheme_id)
    if scheme == Scheme.NULLSIG:
        if len(secret_key) != 32:
            raise MalformedInputError("NullSig key must be 32 bytes")
        return hashlib.shake_256(secret_key + message).digest(32)
    if scheme == Scheme.ED25519:
        try:
            priv = ed25519.Ed25519PrivateKey.from_private_bytes(secret_key)
        except ValueError as exc:
            raise MalformedInputError(f"bad Ed25519 secret key: {exc}") from None
        return priv.sign(message)
    scalar = int.from_bytes(secret_key, "big")
    if len(secret_key) != 32 or not 0 < scalar < _SECP256K1_ORDER:
        raise MalformedInputError("bad secp256k1 secret key")
    priv = ec.derive_private_key(scalar, ec.SECP256K1())
    return priv.sign(message, ec.ECDSA(hashes.SHA256(), deterministic_signing=True))


def verify(public_key: bytes, message: bytes, signature: bytes,
           scheme_id: Scheme = Scheme.ED25519) -> bool:
    """True iff ``signature`` is valid. Malformed keys or signatures raise
    :class:`MalformedInputError` rather than returning False."""
    scheme = _scheme(scheme_id)
    if scheme == Scheme.NULLSIG:
        if len(public_key) != 32 or len(signature) != 32:
            raise MalformedInputError("NullSig keys and tags are 32 bytes")
        return hashlib.shake_256(public_key + message).digest(32) == signature
    if scheme == Scheme.ED25519:
        if len(signature) != 64:
            raise MalformedInputError(f"Ed25519 signature must be 64 bytes, got {len(signature)}")
        try:
            pub = ed25519.Ed25519PublicKey.from_public_bytes(public_key)
        except ValueError as exc:
            raise MalformedInputError(f"bad Ed25519 public key: {exc}") from None
        try:
            pub.verify(signature, message)
        except InvalidSignature:
            return False
        return True
    try:
        pub = ec.EllipticCurvePublicKey.from_encoded_point(ec.SECP256K1(), public_key)
    except ValueError as exc:
        raise MalformedInputError(f"bad secp256k1 public key: {exc}") from None
    try:
        pub.verify(signature, message, ec.ECDSA(hashes.SHA256()))
    except InvalidSignature:
        # DER parse failures surface here too; treated as a plain reject.
        return False
    return True


# --- signed messages -----------------------------------------------------------


def canonical_message(version: int, digest: HashVector) -> bytes:
    return SIG_MAGIC + version.to_bytes(8, "big") + digest_serialize(digest)


def parse_canonical_message(message: bytes, params: Params) -> tuple[int, HashVector]:
    if len(message) != 16 + params.digest_size or message[:8] != SIG_MAGIC:
        raise MalformedInputError("not a canonical signed message for these params")
    return int.from_bytes(message[8:16], "big"), digest_deserialize(message[16:], params)


@dataclass(frozen=True)
class SignedDigest:
    version: int
    digest: HashVector
    signature: bytes
    scheme_id: Scheme = Scheme.ED25519

    @property
    def message(self) -> bytes:
        return canonical_message(self.version, self.digest)

    def verify(self, public_key: bytes) -> bool:
        return verify(public_key, self.message, self.signature, self.scheme_id)

    def to_bytes(self) -> bytes:
        raw = digest_serialize(self.digest)
        return (struct.pack(">BQI", int(self.scheme_id), self.version, len(raw)) + raw
                + struct.pack(">H", len(self.signature)) + self.signature)

    @classmethod
    def from_bytes(cls, data: bytes, params: Params) -> "SignedDigest":
        sd, used = cls.read_from(data, 0, params)
        if used != len(data):
            raise MalformedInputError("trailing bytes after signed digest")
        return sd

    @classmethod
    def read_from(cls, data: bytes, offset: int, params: Params) -> tuple["SignedDigest", int]:
        """Parse one signed digest at ``offset``; return it and the end offset."""
        try:
            scheme_id, version, dlen = struct.unpack_from(">BQI", data, offset)
            offset += 13
            if dlen != params.digest_size or offset + dlen > len(data):
                raise MalformedInputError(f"signed digest length {dlen} invalid")
            digest = digest_deserialize(data[offset:offset + dlen], params)
            offset += dlen
            (slen,) = struct.unpack_from(">H", data, offset)
            offset += 2
            if offset + slen > len(data):
                raise MalformedInputError("truncated signature")
            signature = bytes(data[offset:offset + slen])
        except struct.error:
            raise MalformedInputError("truncated signed digest") from None
        try:
            scheme = Scheme(scheme_id)
        except ValueError:
            raise MalformedInputError(f"unknown scheme id {scheme_id}") from None
        return cls(version, digest, signature, scheme), offset + slen


def sign_digest(keys_or_sk, version: int, digest: HashVector,
                scheme_id: Scheme | None = None) -> SignedDigest:
    if isinstance(keys_or_sk, KeyPair):
        sk, scheme = keys_or_sk.secret_key, keys_or_sk.scheme_id
    else:
        sk, scheme = keys_or_sk, scheme_id if scheme_id is not None else Scheme.ED25519
    sig = sign(sk, canonical_message(version, digest), scheme)
    return SignedDigest(version, digest, sig, Scheme(scheme))


# --- key files: magic, scheme byte, raw key bytes ------------------------------


def encode_key(key: bytes, scheme_id: Scheme) -> bytes:
    return KEY_MAGIC + bytes([int(scheme_id)]) + key


def decode_key(data: bytes) -> tuple[bytes, Scheme]:
    if len(data) < 9 or data[:8] != KEY_MAGIC:
        raise MalformedInputError("not an HMH key file")
    try:
        scheme = Scheme(data[8])
    except ValueError:
        raise MalformedInputError(f"unknown scheme id {data[8]}") from None
    return bytes(data[9:]), scheme
