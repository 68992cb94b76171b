"""Golden test-vector generation.

The worked example is the three-row fruit table (1 apple, 2 orange,
3 banana) with row 2 changed to ``peach``; the file records every
intermediate vector so other implementations can check themselves
against it byte for byte.
"""

from __future__ import annotations

from .db_model import Database, UpdateDelta, delta_hash, encode_row, full_hash
from .hash_core import Params, digest_serialize, expand, fingerprint, vec_neg
from .protocol import Distributor, Subscriber, setup

WORKED_ROWS = {1: b"apple", 2: b"orange", 3: b"banana"}
WORKED_UPDATE = UpdateDelta.modify(2, b"orange", b"peach")
# Fixed key material so signatures are reproducible too.
WORKED_ENTROPY = bytes(range(32))


def _hex(v) -> str:
    return digest_serialize(v).hex()


def expand_vectors(inputs: list[bytes], params: Params) -> list[dict]:
    return [{"input_hex": x.hex(), "expand_hex": _hex(expand(x, params)),
             "fingerprint": fingerprint(expand(x, params))} for x in inputs]


def worked_example(security_level: int = 128) -> dict:
    pp, sk = setup(security_level, WORKED_ENTROPY)
    params = pp.hash_params
    h = {i: expand(encode_row(i, x), params) for i, x in WORKED_ROWS.items()}
    db = Database(WORKED_ROWS, params)
    h_db = full_hash(db)

    dist = Distributor(pp, sk)
    for i, x in WORKED_ROWS.items():
        dist.publish(UpdateDelta.insert(i, x))
    signed_before = dist.signed
    signed_after = dist.publish(WORKED_UPDATE)

    sub = Subscriber.from_snapshot(pp, db, signed_before)
    deltas, mu = dist.get_updates(signed_before.version, signed_after.version)
    sub.apply_updates(deltas, mu)

    add = expand(encode_row(2, b"peach"), params)
    dele = vec_neg(expand(encode_row(2, b"orange"), params))
    return {
        "params": {"d": params.d, "n": params.n, "xof": params.xof_id.name.lower()},
        "public_key_hex": pp.public_key.hex(),
        "rows": {str(i): x.decode() for i, x in WORKED_ROWS.items()},
        "encoded_rows_hex": {str(i): encode_row(i, x).hex() for i, x in WORKED_ROWS.items()},
        "h1_hex": _hex(h[1]),
        "h2_hex": _hex(h[2]),
        "h3_hex": _hex(h[3]),
        "H_D_hex": _hex(h_db),
        "H_D_fingerprint": fingerprint(h_db),
        "H_delta_add_hex": _hex(add),
        "H_delta_del_hex": _hex(dele),
        "delta_hash_hex": _hex(delta_hash(WORKED_UPDATE, params)),
        "H_D_star_hex": _hex(signed_after.digest),
        "H_D_star_fingerprint": fingerprint(signed_after.digest),
        "version_before": signed_before.version,
        "version_after": signed_after.version,
        "sigma_D_hex": signed_before.signature.hex(),
        "sigma_D_star_hex": signed_after.signature.hex(),
        "subscriber_converged": sub.digest == signed_after.digest and sub.validate().ok,
    }


def generate(params: Params, inputs: list[bytes], include_worked_example: bool = True) -> dict:
    out = {
        "params": {"d": params.d, "n": params.n, "xof": params.xof_id.name.lower()},
        "expand": expand_vectors(inputs, params),
    }
    if include_worked_example:
        out["worked_example"] = worked_example()
    return out
