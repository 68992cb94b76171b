"""Deterministic in-process network for adversarial sync scenarios.

A single distributor serves any number of subscribers over a message layer
that can damage, lose or reorder traffic (see ``ACTIONS``). Ordering is driven by a
simulated clock and a sequence counter, so a given config always produces
the same transcript; only the timing samples come from a real clock.

Config files are JSON::

    {
      "seed": 7,
      "n_subscribers": 3,
      "params": {"d": 16, "n": 1024},
      "scheme": "ed25519",
      "workload": {"generate": {"n_rows": 20, "n_updates": 80,
                                "mix": {"insert": 0.5, "modify": 0.3, "delete": 0.2}}},
      "sync_every": 10,
      "sync_schedule": [{"after": 50, "subscriber": 1, "targets": [30, "latest"]}],
      "faults": [{"target": {"subscriber": 1, "type": "response", "index": 2},
                  "action": "flip_byte", "offset": 40}],
      "retry_limit": 3
    }

``workload`` may instead be an explicit list of
``{"kind": "insert", "index": 1, "new": "<base64>"}`` records (``old`` for
modify/delete; ``new_text``/``old_text`` accept UTF-8 instead of base64).
"""

from __future__ import annotations

import base64
import hashlib
import heapq
import json
import random
import time
from dataclasses import dataclass, field
from typing import Any, Mapping

from . import wire
from .db_model import Kind, UpdateDelta
from .errors import (
    ConfigError,
    HexaMorphError,
    MalformedInputError,
    OutOfOrderError,
    TamperDetectedError,
    WorkloadError,
)
from .hash_core import Params, fingerprint
from .protocol import Distributor, PublicParameters, Subscriber
from .signatures import Scheme, keygen

ACTIONS = ("flip_byte", "truncate", "reorder_with_next", "replay", "drop", "forge_signature")
# Actions that alter content; the victim must reject, never silently accept.
TAMPER_ACTIONS = ("flip_byte", "truncate", "replay", "forge_signature")

_SCHEMES = {"ed25519": Scheme.ED25519, "ecdsa": Scheme.ECDSA_SECP256K1,
            "nullsig": Scheme.NULLSIG}


# --- workload generation ----------------------------------------------------------


def generate_workload(seed: int, n_rows: int, n_updates: int,
                      mix: dict[str, float] | None = None,
                      max_payload: int = 24,
                      start: Mapping[int, bytes] | None = None) -> list[UpdateDelta]:
    """Reproducible action list valid against ``start`` (empty by default).

    ``n_rows`` inserts come first, then ``n_updates`` actions drawn from
    ``mix``. A modify/delete drawn while no rows exist falls back to an
    insert; if the mix has no inserts at all that is a :class:`WorkloadError`.
    """
    mix = {"insert": 1.0} if mix is None else dict(mix)
    unknown = set(mix) - {"insert", "modify", "delete"}
    if unknown:
        raise WorkloadError(f"unknown action kinds in mix: {sorted(unknown)}")
    if any(p < 0 for p in mix.values()) or abs(sum(mix.values()) - 1.0) > 1e-9:
        raise WorkloadError("mix probabilities must be non-negative and sum to 1")
    kinds = ["insert", "modify", "delete"]
    weights = [mix.get(k, 0.0) for k in kinds]

    rng = random.Random(seed)
    rows: dict[int, bytes] = dict(start.items()) if start is not None else {}
    live: list[int] = sorted(rows)
    pos: dict[int, int] = {idx: p for p, idx in enumerate(live)}
    next_index = max(rows, default=0) + 1
    out: list[UpdateDelta] = []

    def payload() -> bytes:
        return rng.randbytes(rng.randint(0, max_payload))

    def do_insert():
        nonlocal next_index
        idx = next_index
        next_index += 1
        x = payload()
        pos[idx] = len(live)
        live.append(idx)
        rows[idx] = x
        out.append(UpdateDelta.insert(idx, x))

    for _ in range(n_rows):
        do_insert()
    for _ in range(n_updates):
        kind = rng.choices(kinds, weights)[0]
        if kind != "insert" and not live:
            if weights[0] == 0:
                raise WorkloadError(f"cannot {kind} from an empty database with this mix")
            kind = "insert"
        if kind == "insert":
            do_insert()
            continue
        idx = live[rng.randrange(len(live))]
        if kind == "modify":
            new = payload()
            out.append(UpdateDelta.modify(idx, rows[idx], new))
            rows[idx] = new
        else:
            out.append(UpdateDelta.delete(idx, rows.pop(idx)))
            # swap-remove from the live list
            p = pos.pop(idx)
            last = live.pop()
            if last != idx:
                live[p] = last
                pos[last] = p
    return out


# --- configuration -------------------------------------------------------------------


@dataclass(frozen=True)
class MessageSelector:
    subscriber: int | None = None
    type: str | None = None  # "request" | "response"
    index: int | None = None  # n-th message matching subscriber+type, 0-based

    def matches(self, subscriber: int, mtype: str, nth: int) -> bool:
        return ((self.subscriber is None or self.subscriber == subscriber)
                and (self.type is None or self.type == mtype)
                and (self.index is None or self.index == nth))


@dataclass(frozen=True)
class FaultRule:
    target: MessageSelector
    action: str
    offset: int | None = None      # flip_byte; None = random
    length: int | None = None      # truncate
    from_version: int | None = None  # replay
    times: int = 1                 # how many matching messages to hit


@dataclass(frozen=True)
class SyncEvent:
    after: int  # number of publishes completed
    subscriber: int
    targets: tuple = ("latest",)


@dataclass
class ScenarioConfig:
    seed: int = 0
    n_subscribers: int = 1
    workload: list[UpdateDelta] = field(default_factory=list)
    faults: list[FaultRule] = field(default_factory=list)
    sync_schedule: list[SyncEvent] = field(default_factory=list)
    sync_every: int = 0
    final_sync: bool = True
    retry_limit: int = 3
    params: Params = field(default_factory=Params)
    scheme: Scheme = Scheme.ED25519

    def check(self) -> None:
        if self.n_subscribers < 1:
            raise ConfigError("n_subscribers must be at least 1")
        if self.retry_limit < 0 or self.sync_every < 0:
            raise ConfigError("retry_limit and sync_every must be non-negative")
        for rule in self.faults:
            if rule.action not in ACTIONS:
                raise ConfigError(f"unknown fault action {rule.action!r}")
            t = rule.target
            if t.subscriber is not None and not 0 <= t.subscriber < self.n_subscribers:
                raise ConfigError(f"fault targets nonexistent subscriber {t.subscriber}")
            if t.type not in (None, "request", "response"):
                raise ConfigError(f"unknown message type {t.type!r}")
            if rule.action in ("replay", "forge_signature") and t.type == "request":
                raise ConfigError(f"{rule.action} only applies to responses")
            if rule.action == "replay" and rule.from_version is None:
                raise ConfigError("replay needs from_version")
            if rule.action == "truncate" and (rule.length is None or rule.length < 0):
                raise ConfigError("truncate needs a non-negative length")
        for ev in self.sync_schedule:
            if not 0 <= ev.subscriber < self.n_subscribers:
                raise ConfigError(f"sync event targets nonexistent subscriber {ev.subscriber}")
            if not 0 <= ev.after <= len(self.workload):
                raise ConfigError(f"sync event after={ev.after} outside the workload")
            for w in ev.targets:
                if w != "latest" and (not isinstance(w, int) or w < 0):
                    raise ConfigError(f"bad sync target {w!r}")

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "ScenarioConfig":
        try:
            seed = int(raw.get("seed", 0))
            wl = raw.get("workload", [])
            if isinstance(wl, dict):
                g = wl.get("generate", wl)
                workload = generate_workload(int(g.get("seed", seed)), int(g.get("n_rows", 0)),
                                             int(g.get("n_updates", 0)), g.get("mix"))
            else:
                workload = [_delta_from_record(r) for r in wl]
            faults = [
                FaultRule(
                    target=MessageSelector(**f.get("target", {})),
                    action=f["action"],
                    offset=f.get("offset"),
                    length=f.get("length"),
                    from_version=f.get("from_version"),
                    times=int(f.get("times", 1)),
                )
                for f in raw.get("faults", [])
            ]
            schedule = [
                SyncEvent(int(e["after"]), int(e["subscriber"]), tuple(e.get("targets", ["latest"])))
                for e in raw.get("sync_schedule", [])
            ]
            p = raw.get("params", {})
            scheme = raw.get("scheme", "ed25519")
            if scheme not in _SCHEMES:
                raise ConfigError(f"unknown scheme {scheme!r}")
            cfg = cls(
                seed=seed,
                n_subscribers=int(raw.get("n_subscribers", 1)),
                workload=workload,
                faults=faults,
                sync_schedule=schedule,
                sync_every=int(raw.get("sync_every", 0)),
                final_sync=bool(raw.get("final_sync", True)),
                retry_limit=int(raw.get("retry_limit", 3)),
                params=Params(d=int(p.get("d", 16)), n=int(p.get("n", 1024))),
                scheme=_SCHEMES[scheme],
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad scenario config: {exc!r}") from None
        cfg.check()
        return cfg

    @classmethod
    def load(cls, path) -> "ScenarioConfig":
        with open(path, encoding="utf-8") as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from None
        return cls.from_dict(raw)


def _delta_from_record(r: dict) -> UpdateDelta:
    def payload(key):
        if f"{key}_text" in r:
            return r[f"{key}_text"].encode("utf-8")
        if key in r:
            return base64.b64decode(r[key], validate=True)
        return None

    kind = {"modify": Kind.MODIFY, "insert": Kind.INSERT, "delete": Kind.DELETE}[r["kind"]]
    delta = UpdateDelta(kind, int(r["index"]), payload("old"), payload("new"))
    try:
        delta.check()
    except MalformedInputError as exc:
        raise ConfigError(f"bad workload record {r}: {exc}") from None
    return delta


# --- report ------------------------------------------------------------------------------


@dataclass
class SubscriberOutcome:
    status: str  # converged | tamper-detected | error | diverged
    version: int
    fingerprint: str
    validate_ok: bool
    step: int | None = None
    error_class: str | None = None
    retries: int = 0
    errors: list[str] = field(default_factory=list)


@dataclass
class ScenarioReport:
    outcomes: dict[int, SubscriberOutcome]
    distributor_version: int
    distributor_fingerprint: str
    transcript_hash: str
    transcript: list[str]
    timings: dict[str, list[float]]
    faults_fired: int

    @property
    def silent_divergences(self) -> list[int]:
        """Subscribers that look converged but hold a different digest."""
        return [k for k, o in self.outcomes.items() if o.status == "diverged"]

    def to_text(self) -> str:
        lines = [
            f"distributor version={self.distributor_version} digest={self.distributor_fingerprint}",
            f"faults fired: {self.faults_fired}",
        ]
        for k, o in sorted(self.outcomes.items()):
            extra = ""
            if o.status != "converged":
                extra = f" step={o.step} class={o.error_class}"
            lines.append(
                f"subscriber {k}: {o.status} version={o.version} digest={o.fingerprint} "
                f"validate={'ok' if o.validate_ok else 'FAIL'} retries={o.retries}{extra}"
            )
        for op, samples in sorted(self.timings.items()):
            if samples:
                med = sorted(samples)[len(samples) // 2]
                lines.append(f"timing {op}: n={len(samples)} median={med * 1e6:.1f}us")
        lines.append(f"transcript {self.transcript_hash}")
        return "\n".join(lines) + "\n"

    def to_records(self) -> str:
        recs = [{"event": "distributor", "version": self.distributor_version,
                 "digest": self.distributor_fingerprint, "faults_fired": self.faults_fired}]
        for k, o in sorted(self.outcomes.items()):
            recs.append({"event": "subscriber", "id": k, "status": o.status, "version": o.version,
                         "digest": o.fingerprint, "validate": o.validate_ok, "step": o.step,
                         "error_class": o.error_class, "retries": o.retries})
        recs.append({"event": "transcript", "hash": self.transcript_hash,
                     "silent_divergences": self.silent_divergences})
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in recs)


# --- simulation ------------------------------------------------------------------------------


@dataclass(order=True)
class _Msg:
    at: int
    seq: int
    dest: str = field(compare=False)  # "dist" or "sub"
    subscriber: int = field(compare=False)
    mtype: str = field(compare=False)
    data: bytes = field(compare=False)


class _Agent:
    def __init__(self, sid: int, sub: Subscriber):
        self.sid = sid
        self.sub = sub
        self.target = 0
        self.outstanding = 0
        self.retries = 0
        self.halted: tuple[str, int, str] | None = None  # status, step, class
        self.errors: list[str] = []


class _Sim:
    def __init__(self, cfg: ScenarioConfig):
        self.cfg = cfg
        entropy = hashlib.sha256(b"hmh-sim" + cfg.seed.to_bytes(8, "big", signed=True)).digest()
        keys = keygen(cfg.scheme, entropy)
        self.pp = PublicParameters(cfg.params, keys.public_key, keys.scheme_id)
        self.dist = Distributor(self.pp, keys.secret_key)
        self.archive = {0: self.dist.signed}
        self.agents = [_Agent(k, Subscriber(self.pp, self.dist.signed))
                       for k in range(cfg.n_subscribers)]
        self.clock = 0
        self.seq = 0
        self.queue: list[_Msg] = []
        self.held: dict[tuple[str, int], list[_Msg]] = {}
        self.counts: dict[tuple[int, str], int] = {}
        self.remaining = [rule.times for rule in cfg.faults]
        self.rngs = [random.Random(f"{cfg.seed}:{k}") for k in range(len(cfg.faults))]
        self.transcript: list[str] = []
        self.faults_fired = 0
        self.timings: dict[str, list[float]] = {"publish": [], "apply": []}

    def log(self, *parts) -> None:
        self.transcript.append(" ".join(str(p) for p in (self.clock, *parts)))

    # -- message layer --

    def send(self, dest: str, sid: int, mtype: str, data: bytes) -> None:
        nth = self.counts.get((sid, mtype), 0)
        self.counts[(sid, mtype)] = nth + 1
        self.seq += 1
        msg = _Msg(self.clock + 1, self.seq, dest, sid, mtype, data)
        self.log("send", mtype, sid, nth, _h(data))
        reorder = False
        for k, rule in enumerate(self.cfg.faults):
            if self.remaining[k] <= 0 or not rule.target.matches(sid, mtype, nth):
                continue
            changed = self.apply_fault(k, rule, msg)
            if changed is None:
                continue
            self.remaining[k] -= 1
            self.faults_fired += 1
            self.log("fault", rule.action, mtype, sid, nth, _h(msg.data) if changed else "-")
            if rule.action == "drop":
                return
            if rule.action == "reorder_with_next":
                reorder = True
        link = (dest, sid)
        if reorder:
            self.held.setdefault(link, []).append(msg)
            return
        heapq.heappush(self.queue, msg)
        for late in self.held.pop(link, []):
            self.seq += 1
            late.at, late.seq = msg.at, self.seq
            heapq.heappush(self.queue, late)

    def apply_fault(self, k: int, rule: FaultRule, msg: _Msg) -> bool | None:
        """Mutate ``msg`` per ``rule``. Returns None if the rule cannot apply."""
        rng = self.rngs[k]
        data = msg.data
        if rule.action == "flip_byte":
            if not data:
                return None
            off = rule.offset if rule.offset is not None else rng.randrange(len(data))
            off %= len(data)
            mask = rng.randrange(1, 256)
            b = bytearray(data)
            b[off] ^= mask
            msg.data = bytes(b)
        elif rule.action == "truncate":
            if rule.length >= len(data):
                return None
            msg.data = data[:rule.length]
        elif rule.action in ("replay", "forge_signature"):
            try:
                deltas, signed = wire.decode_response(data, self.pp.hash_params)
            except HexaMorphError:
                return None
            if rule.action == "replay":
                old = self.archive.get(rule.from_version)
                if old is None or old.version == signed.version:
                    return None
                signed = old
            else:
                sig = rng.randbytes(len(signed.signature))
                signed = type(signed)(signed.version, signed.digest, sig, signed.scheme_id)
            msg.data = wire.encode_response(deltas, signed)
        elif rule.action == "drop":
            return False
        elif rule.action == "reorder_with_next":
            return False
        return True

    def drain(self) -> None:
        while self.queue or self.held:
            if not self.queue:
                # Held messages with no successor are delivered last.
                for link in sorted(self.held):
                    for late in self.held.pop(link):
                        self.seq += 1
                        late.at, late.seq = self.clock + 1, self.seq
                        heapq.heappush(self.queue, late)
                continue
            msg = heapq.heappop(self.queue)
            self.clock = max(self.clock, msg.at)
            self.log("deliver", msg.mtype, msg.subscriber, _h(msg.data))
            if msg.dest == "dist":
                self.send("sub", msg.subscriber, "response", self.dist.handle(msg.data))
            else:
                self.on_response(self.agents[msg.subscriber], msg.data)

    # -- subscriber behaviour --

    def on_response(self, agent: _Agent, data: bytes) -> None:
        agent.outstanding = max(0, agent.outstanding - 1)
        if agent.halted:
            self.log("ignored", agent.sid)
            return
        if data[:8] == wire.ERR_MAGIC:
            err = wire.decode_error(data)
            agent.errors.append(type(err).__name__)
            self.log("remote-error", agent.sid, type(err).__name__)
            return
        t0 = time.perf_counter()
        try:
            agent.sub.receive(data)
        except OutOfOrderError as exc:
            agent.errors.append(type(exc).__name__)
            self.log("out-of-order", agent.sid)
            return
        except (TamperDetectedError, MalformedInputError) as exc:
            agent.halted = ("tamper-detected", self.dist.version, type(exc).__name__)
            agent.errors.append(type(exc).__name__)
            self.log("tamper", agent.sid, type(exc).__name__)
            return
        except HexaMorphError as exc:
            agent.halted = ("error", self.dist.version, type(exc).__name__)
            agent.errors.append(type(exc).__name__)
            self.log("error", agent.sid, type(exc).__name__)
            return
        self.timings["apply"].append(time.perf_counter() - t0)
        self.log("applied", agent.sid, agent.sub.version, fingerprint(agent.sub.digest))

    def begin_sync(self, agent: _Agent, targets) -> None:
        if agent.halted:
            return
        cur = agent.sub.version
        for t in targets:
            w = self.dist.version if t == "latest" else min(int(t), self.dist.version)
            if w <= cur:
                continue
            agent.target = max(agent.target, w)
            agent.outstanding += 1
            self.send("dist", agent.sid, "request", wire.encode_request(cur, w))
            cur = w

    def settle(self) -> None:
        """Deliver everything, then retry anyone still behind their target."""
        self.drain()
        while True:
            # Queue is empty: anything still unanswered was lost in transit.
            for a in self.agents:
                a.outstanding = 0
            behind = [a for a in self.agents if not a.halted and a.sub.version < a.target]
            if not behind:
                return
            for a in behind:
                a.retries += 1
                if a.retries > self.cfg.retry_limit:
                    a.halted = ("error", self.dist.version, "RetryLimitExceeded")
                    self.log("give-up", a.sid)
                    continue
                self.log("retry", a.sid, a.retries)
                self.begin_sync(a, [a.target])
            self.drain()

    def run(self) -> ScenarioReport:
        cfg = self.cfg
        events: dict[int, list[SyncEvent]] = {}
        for ev in cfg.sync_schedule:
            events.setdefault(ev.after, []).append(ev)
        for ev in events.get(0, []):
            self.begin_sync(self.agents[ev.subscriber], ev.targets)
        self.settle()
        for step, delta in enumerate(cfg.workload, 1):
            t0 = time.perf_counter()
            try:
                signed = self.dist.publish(delta)
            except HexaMorphError as exc:
                self.log("publish-rejected", step, type(exc).__name__)
            else:
                self.timings["publish"].append(time.perf_counter() - t0)
                self.archive[signed.version] = signed
                self.log("publish", signed.version, fingerprint(signed.digest))
            for ev in events.get(step, []):
                self.begin_sync(self.agents[ev.subscriber], ev.targets)
            if cfg.sync_every and step % cfg.sync_every == 0:
                for a in self.agents:
                    self.begin_sync(a, ["latest"])
            self.settle()
        if cfg.final_sync:
            for a in self.agents:
                self.begin_sync(a, ["latest"])
            self.settle()
        return self.report()

    def report(self) -> ScenarioReport:
        outcomes = {}
        for a in self.agents:
            rep = a.sub.validate()
            if a.halted:
                status, step, cls = a.halted
            elif a.sub.version == self.dist.version:
                same = a.sub.digest == self.dist.digest and a.sub.db == self.dist.db
                status, step, cls = ("converged", None, None) if same and rep.ok else \
                    ("diverged", self.dist.version, "SilentDivergence")
            else:
                status, step, cls = "error", self.dist.version, "NotConverged"
            outcomes[a.sid] = SubscriberOutcome(
                status=status, version=a.sub.version, fingerprint=fingerprint(a.sub.digest),
                validate_ok=rep.ok, step=step, error_class=cls, retries=a.retries,
                errors=list(a.errors),
            )
            self.log("outcome", a.sid, status, a.sub.version, fingerprint(a.sub.digest))
        th = hashlib.sha256("\n".join(self.transcript).encode()).hexdigest()
        return ScenarioReport(
            outcomes=outcomes,
            distributor_version=self.dist.version,
            distributor_fingerprint=fingerprint(self.dist.digest),
            transcript_hash=th,
            transcript=self.transcript,
            timings=self.timings,
            faults_fired=self.faults_fired,
        )


def _h(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()[:16]


def run_scenario(config: ScenarioConfig) -> ScenarioReport:
    config.check()
    return _Sim(config).run()
