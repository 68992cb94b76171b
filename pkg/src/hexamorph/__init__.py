"""Homomorphic multiset hashing over Z_q^n with signed incremental replica sync."""

from .db_model import Database, Kind, UpdateDelta, apply_to_db, delta_hash, encode_row, full_hash
from .hash_core import (
    DEFAULT_PARAMS,
    Digest,
    HashVector,
    Params,
    Xof,
    digest_deserialize,
    digest_insert,
    digest_merge,
    digest_remove,
    digest_serialize,
    expand,
    fingerprint,
    multiset_hash,
    vec_add,
    vec_neg,
)
from .protocol import Distributor, PublicParameters, Subscriber, UpdateLog, setup
from .signatures import KeyPair, Scheme, SignedDigest, canonical_message, keygen, sign, verify

__version__ = "0.1.0"
