import random

import pytest
from hypothesis import given, settings, strategies as st

import oracles
from hexamorph import wire
from hexamorph.db_model import Database, UpdateDelta, full_hash
from hexamorph.errors import (
    ConfigError,
    CorruptDeltaError,
    DuplicateIndexError,
    InvalidRangeError,
    LogTruncatedError,
    MalformedInputError,
    MissingRowError,
    OutOfOrderError,
    StaleDeltaError,
    TamperDetectedError,
    UnknownVersionError,
)
from hexamorph.hash_core import HashVector, Params, fingerprint
from hexamorph.protocol import (
    Distributor,
    PublicParameters,
    Subscriber,
    UpdateLog,
    setup,
)
from hexamorph.signatures import Scheme, SignedDigest, keygen, sign_digest

ENTROPY = b"\x07" * 32


@pytest.fixture
def pair():
    pp, sk = setup(128, ENTROPY)
    dist = Distributor(pp, sk)
    return pp, dist, Subscriber(pp, dist.signed)


def fruit(dist):
    for i, x in [(1, b"apple"), (2, b"orange"), (3, b"banana")]:
        dist.publish(UpdateDelta.insert(i, x))


@pytest.mark.parametrize("level,n", [(128, 1024), (192, 2048), (256, 4096)])
def test_setup_presets(level, n):
    pp, sk = setup(level, ENTROPY)
    assert (pp.hash_params.d, pp.hash_params.n) == (16, n)
    assert pp.aux_seed is None


def test_setup_is_deterministic_and_validates():
    assert setup(128, ENTROPY) == setup(128, ENTROPY)
    with pytest.raises(ConfigError):
        setup(100, ENTROPY)
    with pytest.raises(ConfigError):
        setup(128, b"short")


@pytest.mark.parametrize("aux", [False, True])
@pytest.mark.parametrize("scheme", list(Scheme))
def test_public_parameters_roundtrip(aux, scheme):
    pp, _ = setup(128, ENTROPY, scheme_id=scheme, aux_seed=aux)
    assert (pp.aux_seed is not None) == aux
    assert PublicParameters.from_bytes(pp.to_bytes()) == pp


def test_public_parameters_reject_garbage():
    blob = setup(128, ENTROPY)[0].to_bytes()
    for bad in (b"", blob[:20], blob + b"\x00", b"HMHPP002" + blob[8:]):
        with pytest.raises(MalformedInputError):
            PublicParameters.from_bytes(bad)


def test_genesis_is_signed_zero_digest(pair):
    pp, dist, sub = pair
    assert dist.version == 0 and dist.digest.is_zero()
    assert dist.signed.verify(pp.public_key)
    assert sub.version == 0 and sub.validate().ok


def test_forged_genesis_rejected(pair):
    pp, dist, _ = pair
    other = keygen(Scheme.ED25519, b"\x09" * 32)
    with pytest.raises(TamperDetectedError):
        Subscriber(pp, sign_digest(other, 0, HashVector.zero(pp.hash_params)))
    with pytest.raises(TamperDetectedError):
        Subscriber(pp, SignedDigest(1, dist.digest, dist.signed.signature))


def test_worked_example(pair):
    pp, dist, sub = pair
    fruit(dist)
    deltas, mu = dist.get_updates(0, 3)
    sub.apply_updates(deltas, mu)
    assert sub.version == 3
    signed = dist.publish(UpdateDelta.modify(2, b"orange", b"peach"))
    assert signed.version == 4
    deltas, mu = dist.get_updates(3, 4)
    assert deltas == [UpdateDelta.modify(2, b"orange", b"peach", version=4)]
    sub.apply_updates(deltas, mu)
    assert sub.digest == dist.digest
    assert dict(sub.db.items()) == {1: b"apple", 2: b"peach", 3: b"banana"}
    rows = {1: b"apple", 2: b"peach", 3: b"banana"}
    assert sub.digest.tolist() == oracles.full_hash(rows, 16, 1024)
    assert sub.validate().ok


def test_publish_is_atomic_on_error(pair):
    _, dist, _ = pair
    fruit(dist)
    before = (dist.version, dist.digest, dist.signed, dict(dist.db.items()), len(dist.log))
    for bad, err in [(UpdateDelta.insert(1, b"x"), DuplicateIndexError),
                     (UpdateDelta.modify(9, b"", b"x"), MissingRowError),
                     (UpdateDelta.delete(2, b"nope"), StaleDeltaError)]:
        with pytest.raises(err):
            dist.publish(bad)
        assert (dist.version, dist.digest, dist.signed, dict(dist.db.items()), len(dist.log)) == before


def test_noop_modify_bumps_version_not_digest(pair):
    _, dist, _ = pair
    fruit(dist)
    d = dist.digest
    signed = dist.publish(UpdateDelta.modify(1, b"apple", b"apple"))
    assert signed.version == 4 and signed.digest == d


def test_get_updates_errors(pair):
    _, dist, _ = pair
    fruit(dist)
    with pytest.raises(InvalidRangeError):
        dist.get_updates(3, 3)
    with pytest.raises(InvalidRangeError):
        dist.get_updates(3, 1)
    with pytest.raises(UnknownVersionError):
        dist.get_updates(1, 4)


def test_historical_digests_match_replay(pair):
    pp, dist, _ = pair
    rng = random.Random(1)
    history = [Database(params=pp.hash_params)]
    for k in range(30):
        db = dist.db
        if db and rng.random() < 0.5:
            i = rng.choice(list(db))
            dist.publish(UpdateDelta.modify(i, db[i], rng.randbytes(4)))
        else:
            dist.publish(UpdateDelta.insert(k + 1, rng.randbytes(4)))
        history.append(dist.db.copy())
    for v in range(31):
        assert dist.digest_at(v) == full_hash(history[v])
        if v:
            _, signed = dist.get_updates(v - 1, v)
            assert signed.verify(pp.public_key) and signed.digest == full_hash(history[v])


def test_compaction_forces_resync(pair):
    pp, dist, sub = pair
    fruit(dist)
    dist.compact(2)
    with pytest.raises(LogTruncatedError):
        dist.get_updates(1, 3)
    deltas, mu = dist.get_updates(2, 3)
    assert len(deltas) == 1
    with pytest.raises(InvalidRangeError):
        dist.compact(1)
    db, signed = dist.snapshot()
    fresh = Subscriber.from_snapshot(pp, db, signed)
    assert fresh.version == 3 and fresh.validate().ok


def test_snapshot_resync_rejects_wrong_db(pair):
    pp, dist, _ = pair
    fruit(dist)
    db, signed = dist.snapshot()
    with pytest.raises(TamperDetectedError):
        Subscriber.from_snapshot(pp, db.apply(UpdateDelta.delete(1, b"apple")), signed)


def test_distributor_from_snapshot_serves_deltas_above_base():
    pp, sk = setup(128, ENTROPY)
    db = Database({1: b"a", 2: b"b"}, pp.hash_params)
    dist = Distributor.from_snapshot(pp, sk, db, version=10)
    sub = Subscriber.from_snapshot(pp, *dist.snapshot())
    dist.publish(UpdateDelta.insert(3, b"c"))
    sub.apply_updates(*dist.get_updates(10, 11))
    assert sub.validate().ok and sub.version == 11
    with pytest.raises(LogTruncatedError):
        dist.get_updates(9, 11)


def _assert_rejected(sub, deltas, signed, err):
    before = sub.state_bytes()
    with pytest.raises(err):
        sub.apply_updates(deltas, signed)
    assert sub.state_bytes() == before


def test_subscriber_rejects_tampering(pair):
    pp, dist, sub = pair
    fruit(dist)
    deltas, mu = dist.get_updates(0, 3)
    changed = list(deltas)
    changed[1] = UpdateDelta.insert(2, b"orangE", version=2)
    _assert_rejected(sub, changed, mu, TamperDetectedError)
    forged = SignedDigest(mu.version, mu.digest, bytes(64), mu.scheme_id)
    _assert_rejected(sub, deltas, forged, TamperDetectedError)
    wrong_digest = SignedDigest(mu.version, dist.digest_at(2), mu.signature, mu.scheme_id)
    _assert_rejected(sub, deltas, wrong_digest, TamperDetectedError)
    wrong_scheme = SignedDigest(mu.version, mu.digest, mu.signature, Scheme.NULLSIG)
    _assert_rejected(sub, deltas, wrong_scheme, TamperDetectedError)
    _assert_rejected(sub, deltas[:2], mu, OutOfOrderError)
    _assert_rejected(sub, deltas[1:], mu, OutOfOrderError)
    _assert_rejected(sub, [deltas[0], deltas[2], deltas[1]], mu, OutOfOrderError)
    # Versions renumbered to look in order but contents unapplyable.
    bad = [UpdateDelta.modify(1, b"apple", b"x", version=1), *deltas[1:]]
    _assert_rejected(sub, bad, mu, CorruptDeltaError)
    sub.apply_updates(deltas, mu)
    assert sub.validate().ok


def test_replayed_batch_is_out_of_order(pair):
    _, dist, sub = pair
    fruit(dist)
    batch = dist.get_updates(0, 2)
    sub.apply_updates(*batch)
    _assert_rejected(sub, *batch, OutOfOrderError)


def test_signature_from_other_version_rejected(pair):
    _, dist, sub = pair
    fruit(dist)
    dist.publish(UpdateDelta.modify(1, b"apple", b"apple"))
    deltas, mu4 = dist.get_updates(0, 4)
    _, mu3 = dist.get_updates(0, 3)
    # v3 and v4 have identical digests; only the version binding tells them apart.
    assert mu3.digest == mu4.digest
    lying = SignedDigest(4, mu4.digest, mu3.signature, mu3.scheme_id)
    _assert_rejected(sub, deltas, lying, TamperDetectedError)


def test_wire_round_trip_sync(pair):
    _, dist, sub = pair
    fruit(dist)
    sub.receive(dist.handle(sub.request(3)))
    assert sub.version == 3
    with pytest.raises(InvalidRangeError):
        sub.receive(dist.handle(sub.request(3)))
    with pytest.raises(UnknownVersionError):
        sub.receive(dist.handle(sub.request(9)))
    assert dist.handle(b"junk")[:8] == wire.ERR_MAGIC


def test_validate_detects_replica_corruption(pair):
    pp, dist, sub = pair
    fruit(dist)
    sub.apply_updates(*dist.get_updates(0, 3))
    bad = Subscriber.restore(pp, sub.db.apply(UpdateDelta.modify(1, b"apple", b"appel")),
                             sub.digest, sub.last_signed)
    rep = bad.validate()
    assert not rep.ok and not rep.digest_match and rep.reason == "digest-mismatch"
    assert rep.recomputed != rep.expected
    assert rep.expected == fingerprint(dist.digest)


def test_validate_without_signature_fails(pair):
    pp, _, _ = pair
    assert not Subscriber(pp).validate().ok


def test_update_log_rebuild_roundtrip(pair):
    _, dist, _ = pair
    fruit(dist)
    log = dist.log
    copy = UpdateLog.rebuild(log.floor, list(log), [s for _, s in log.signatures()])
    assert list(copy) == list(log) and copy.signatures() == log.signatures()
    with pytest.raises(MalformedInputError):
        UpdateLog.rebuild(0, list(log)[1:], [s for _, s in log.signatures()][1:])
    with pytest.raises(MalformedInputError):
        UpdateLog.rebuild(0, list(log), [])


def test_restore_rejects_inconsistent_head(pair):
    pp, dist, _ = pair
    fruit(dist)
    _, old = dist.get_updates(1, 2)
    with pytest.raises(MalformedInputError):
        Distributor.restore(pp, b"", dist.db, old, dist.log)


@pytest.mark.parametrize("scheme", list(Scheme))
def test_every_scheme_syncs(scheme):
    pp, sk = setup(128, ENTROPY, scheme_id=scheme)
    dist = Distributor(pp, sk)
    sub = Subscriber(pp, dist.signed)
    fruit(dist)
    sub.apply_updates(*dist.get_updates(0, 3))
    assert sub.validate().ok


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32), st.lists(st.integers(1, 6), min_size=1, max_size=6))
def test_any_batching_converges(seed, batch_sizes):
    pp, sk = setup(128, ENTROPY, scheme_id=Scheme.NULLSIG)
    pp = PublicParameters(Params(d=16, n=64), pp.public_key, pp.scheme_id)
    dist = Distributor(pp, sk)
    sub = Subscriber(pp, dist.signed)
    rng = random.Random(seed)
    for size in batch_sizes:
        for _ in range(size):
            db = dist.db
            live = list(db)
            r = rng.random()
            if live and r < 0.3:
                i = rng.choice(live)
                dist.publish(UpdateDelta.delete(i, db[i]))
            elif live and r < 0.6:
                i = rng.choice(live)
                dist.publish(UpdateDelta.modify(i, db[i], rng.randbytes(3)))
            else:
                free = [i for i in range(1, 20) if i not in db]
                dist.publish(UpdateDelta.insert(rng.choice(free), rng.randbytes(3)))
        sub.apply_updates(*dist.get_updates(sub.version, dist.version))
        assert sub.digest == dist.digest == full_hash(sub.db)
    assert sub.db == dist.db
