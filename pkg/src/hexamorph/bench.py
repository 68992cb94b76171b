"""Latency microbenchmarks for publish, apply and validate.

The publish measurement isolates the path whose cost should not depend on
the row count: one delta hash, one vector add, one signature. Row-store
bookkeeping is timed separately as ``publish_full``.
"""

from __future__ import annotations

import gc
import random
import statistics
import time
from dataclasses import dataclass

from .db_model import Database, UpdateDelta, delta_hash
from .hash_core import Params, vec_add
from .protocol import Distributor, Subscriber, setup

OPS = ("publish", "publish_full", "apply", "apply_batch100", "validate")


@dataclass(frozen=True)
class Stat:
    n_rows: int
    op: str
    p50: float
    p95: float
    mean: float
    samples: int

    def csv(self) -> str:
        return f"{self.n_rows},{self.op},{self.p50:.9f},{self.p95:.9f},{self.mean:.9f}"


CSV_HEADER = "N,op,p50,p95,mean"


def summarize(n_rows: int, op: str, samples: list[float]) -> Stat:
    s = sorted(samples)
    p95 = s[min(len(s) - 1, int(round(0.95 * (len(s) - 1))))]
    return Stat(n_rows, op, statistics.median(s), p95, statistics.fmean(s), len(s))


def random_database(n_rows: int, params: Params, seed: int = 0, payload_len: int = 16) -> Database:
    rng = random.Random(seed)
    return Database({i: rng.randbytes(payload_len) for i in range(1, n_rows + 1)}, params)


def build_distributor(n_rows: int, security_level: int = 128, seed: int = 0) -> Distributor:
    """A distributor holding ``n_rows`` random rows, bootstrapped at version ``n_rows``."""
    entropy = seed.to_bytes(8, "big") * 4
    pp, sk = setup(security_level, entropy)
    db = random_database(n_rows, pp.hash_params, seed)
    return Distributor.from_snapshot(pp, sk, db, version=n_rows)


def _modify(dist: Distributor, rng: random.Random) -> UpdateDelta:
    idx = rng.randrange(1, len(dist.db) + 1)
    return UpdateDelta.modify(idx, dist.db[idx], rng.randbytes(16))


class _NoGC:
    def __enter__(self):
        self.was = gc.isenabled()
        gc.disable()

    def __exit__(self, *exc):
        if self.was:
            gc.enable()


def time_hash_sign(dist: Distributor, reps: int, seed: int = 1) -> list[float]:
    """Delta hash + digest fold + signature, without touching the row store."""
    rng = random.Random(seed)
    pp = dist.pp
    out = []
    with _NoGC():
        for _ in range(reps):
            delta = _modify(dist, rng).with_version(dist.version + 1)
            t0 = time.perf_counter()
            digest = vec_add(dist.digest, delta_hash(delta, pp.hash_params))
            dist._sign(delta.version, digest)
            out.append(time.perf_counter() - t0)
    return out


def time_publish(dist: Distributor, reps: int, seed: int = 2) -> list[float]:
    rng = random.Random(seed)
    out = []
    with _NoGC():
        for _ in range(reps):
            delta = _modify(dist, rng)
            t0 = time.perf_counter()
            dist.publish(delta)
            out.append(time.perf_counter() - t0)
    return out


def follower(dist: Distributor) -> Subscriber:
    """A subscriber already in sync with ``dist`` (trusted local copy)."""
    db, signed = dist.snapshot()
    return Subscriber.restore(dist.pp, db, dist.digest, signed)


def time_apply(dist: Distributor, sub: Subscriber, reps: int, batch: int = 1,
               seed: int = 3) -> list[float]:
    """Publish ``batch`` changes, then time one ``apply_updates`` of them all."""
    rng = random.Random(seed)
    out = []
    for _ in range(reps):
        v = sub.version
        for _ in range(batch):
            dist.publish(_modify(dist, rng))
        deltas, signed = dist.get_updates(v, dist.version)
        with _NoGC():
            t0 = time.perf_counter()
            sub.apply_updates(deltas, signed)
            out.append(time.perf_counter() - t0)
    return out


def time_validate(sub: Subscriber, reps: int) -> list[float]:
    out = []
    for _ in range(reps):
        t0 = time.perf_counter()
        rep = sub.validate()
        out.append(time.perf_counter() - t0)
        if not rep.ok:
            raise AssertionError(f"replica failed validation during benchmark: {rep}")
    return out


def run_bench(sizes: list[int], reps: int = 100, validate_reps: int = 3,
              batch_reps: int | None = None, ops=OPS, seed: int = 0) -> list[Stat]:
    stats = []
    for n in sizes:
        dist = build_distributor(n, seed=seed)
        if "publish" in ops:
            stats.append(summarize(n, "publish", time_hash_sign(dist, reps)))
        if "publish_full" in ops:
            stats.append(summarize(n, "publish_full", time_publish(dist, reps)))
        need_sub = {"apply", "apply_batch100", "validate"} & set(ops)
        sub = follower(dist) if need_sub else None
        if "apply" in ops:
            stats.append(summarize(n, "apply", time_apply(dist, sub, reps)))
        if "apply_batch100" in ops:
            br = batch_reps if batch_reps is not None else max(3, reps // 10)
            stats.append(summarize(n, "apply_batch100", time_apply(dist, sub, br, batch=100)))
        if "validate" in ops:
            stats.append(summarize(n, "validate", time_validate(sub, validate_reps)))
        del dist, sub
        gc.collect()
    return stats
