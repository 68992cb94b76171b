"""``hmh`` command-line tool.

Exit codes:

    0   success
    2   usage error
    3   configuration error (bad params, unsupported level or scheme, bad workload)
    4   invalid version range (w <= v)
    5   unknown version, or requested range compacted out of the log
    6   out-of-order delta or signed digest
    7   tamper detected, or malformed input
    8   delta does not apply (stale, missing row, duplicate index, bad index)
    9   validation failed
    10  state directory locked by another process

With ``--output records`` every event is one JSON object per line.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import storage
from .bench import CSV_HEADER, run_bench
from .db_model import Database, UpdateDelta, full_hash, parse_log_line
from .errors import ConfigError, HexaMorphError, InvalidRangeError, MalformedInputError
from .hash_core import Params, encode_hmh, fingerprint
from .net_sim import ScenarioConfig, generate_workload, run_scenario
from .protocol import SECURITY_PRESETS, Distributor, PublicParameters, Subscriber, setup
from .signatures import Scheme, keygen
from .vectors import generate

SCHEMES = {"ed25519": Scheme.ED25519, "ecdsa": Scheme.ECDSA_SECP256K1, "nullsig": Scheme.NULLSIG}


class Output:
    def __init__(self, mode: str, stream=None):
        self.mode = mode
        self.stream = stream or sys.stdout

    def emit(self, event: str, text: str, **fields) -> None:
        if self.mode == "records":
            print(json.dumps({"event": event, **fields}, sort_keys=True), file=self.stream)
        else:
            print(text, file=self.stream)


def _payload(s: str, as_hex: bool) -> bytes:
    if not as_hex:
        return s.encode("utf-8")
    try:
        return bytes.fromhex(s)
    except ValueError:
        raise MalformedInputError(f"payload {s!r} is not hex") from None


def _index(s: str) -> int:
    try:
        return int(s, 0)
    except ValueError:
        raise MalformedInputError(f"row index {s!r} is not an integer") from None


def _entropy(args) -> bytes:
    if args.entropy_hex is None:
        return os.urandom(32)
    try:
        e = bytes.fromhex(args.entropy_hex)
    except ValueError:
        raise ConfigError("--entropy-hex is not hex") from None
    if len(e) < 32:
        raise ConfigError("--entropy-hex needs at least 32 bytes")
    return e


def _explicit_params(args) -> Params | None:
    if args.d is None and args.n is None:
        return None
    if args.d is None or args.n is None:
        raise ConfigError("--d and --n must be given together")
    return Params(d=args.d, n=args.n)


# --- commands --------------------------------------------------------------------------


def cmd_init(args, out: Output) -> int:
    state = Path(args.state_dir)
    entropy = _entropy(args)
    scheme = SCHEMES[args.scheme]
    explicit = _explicit_params(args)
    if explicit is None:
        pp, sk = setup(args.params_preset, entropy, scheme_id=scheme)
    else:
        keys = keygen(scheme, entropy)
        pp, sk = PublicParameters(explicit, keys.public_key, keys.scheme_id), keys.secret_key
    with storage.locked(state):
        dist = storage.init_distributor(state, pp, sk)
    p = pp.hash_params
    out.emit("init", f"initialized distributor in {state}: d={p.d} n={p.n} "
             f"scheme={pp.scheme_id.name.lower()} genesis={fingerprint(dist.digest)}",
             state_dir=str(state), d=p.d, n=p.n, scheme=pp.scheme_id.name.lower(),
             public_key=pp.public_key.hex(), version=0, fingerprint=fingerprint(dist.digest))
    return 0


def cmd_join(args, out: Output) -> int:
    state = Path(args.state_dir)
    with storage.locked(state):
        sub = storage.init_subscriber(state, Path(args.distributor))
    out.emit("join", f"initialized subscriber in {state} at version 0",
             state_dir=str(state), version=sub.version, fingerprint=fingerprint(sub.digest))
    return 0


def _publish_deltas(args, dist: Distributor) -> list[UpdateDelta]:
    if args.insert:
        idx, payload = args.insert
        return [UpdateDelta.insert(_index(idx), _payload(payload, args.hex))]
    if args.modify:
        idx = _index(args.modify[0])
        new = _payload(args.modify[1], args.hex)
        old = _payload(args.old, args.hex) if args.old is not None else dist.db.get(idx, b"")
        return [UpdateDelta.modify(idx, old, new)]
    if args.delete is not None:
        idx = _index(args.delete)
        old = _payload(args.old, args.hex) if args.old is not None else dist.db.get(idx, b"")
        return [UpdateDelta.delete(idx, old)]
    if args.workload:
        text = Path(args.workload).read_text(encoding="ascii")
        return [parse_log_line(line, k) for k, line in enumerate(text.splitlines(), 1)
                if line.strip() and not line.startswith("#")]
    mix = json.loads(args.mix) if args.mix else {"insert": 0.4, "modify": 0.4, "delete": 0.2}
    return generate_workload(args.seed, 0, args.generate, mix, start=dist.db)


def cmd_publish(args, out: Output) -> int:
    state = Path(args.state_dir)
    with storage.locked(state):
        dist = storage.load_distributor(state)
        deltas = _publish_deltas(args, dist)
        # Dry-run on a scratch copy so a bad delta in a batch leaves disk untouched.
        probe = dist.db.copy()
        for delta in deltas:
            probe.check(delta)
            probe.apply_inplace(delta)
        for delta in deltas:
            signed = dist.publish(delta)
            if len(deltas) <= 1 or args.verbose:
                out.emit("publish", f"version {signed.version} {fingerprint(signed.digest)}",
                         version=signed.version, fingerprint=fingerprint(signed.digest))
        storage.save_distributor(state, dist)
    if len(deltas) > 1 and not args.verbose:
        out.emit("publish", f"published {len(deltas)} updates; version {dist.version} "
                 f"{fingerprint(dist.digest)}", count=len(deltas), version=dist.version,
                 fingerprint=fingerprint(dist.digest))
    return 0


def cmd_sync(args, out: Output) -> int:
    state = Path(args.state_dir)
    with storage.locked(state):
        sub = storage.load_subscriber(state)
        dist = storage.load_distributor(Path(args.distributor), with_secret=False)
        if dist.pp != sub.pp:
            raise ConfigError("distributor and subscriber public parameters differ")
        if args.full:
            db, signed = dist.snapshot()
            new = Subscriber.from_snapshot(sub.pp, db, signed)
        else:
            v = sub.version if args.from_version is None else args.from_version
            if v != sub.version:
                raise InvalidRangeError(f"replica is at version {sub.version}, not {v}")
            w = dist.version if args.to_version is None else args.to_version
            if w == v and args.to_version is None:
                out.emit("sync", f"already at version {v}", version=v, applied=0,
                         fingerprint=fingerprint(sub.digest))
                return 0
            deltas, signed = dist.get_updates(v, w)
            sub.apply_updates(deltas, signed)
            new = sub
        storage.save_subscriber(state, new)
    out.emit("sync", f"converged at version {new.version} {fingerprint(new.digest)}",
             version=new.version, fingerprint=fingerprint(new.digest))
    return 0


def cmd_validate(args, out: Output) -> int:
    state = Path(args.state_dir)
    role = storage.read_role(state)
    if role == "distributor":
        dist = storage.load_distributor(state, with_secret=False)
        db, signed = dist.snapshot()
        sub = Subscriber.restore(dist.pp, db, dist.digest, signed)
    else:
        sub = storage.load_subscriber(state)
    rep = sub.validate()
    fields = dict(ok=rep.ok, version=rep.version, digest_match=rep.digest_match,
                  signature_valid=rep.signature_valid, incremental_match=rep.incremental_match,
                  recomputed=rep.recomputed, expected=rep.expected, rows=len(sub.db))
    if rep.ok:
        out.emit("validate", f"valid: version {rep.version} {rep.recomputed} ({len(sub.db)} rows)",
                 **fields)
        return 0
    out.emit("validate", f"INVALID ({rep.reason}): version {rep.version} "
             f"recomputed {rep.recomputed} signed {rep.expected}", reason=rep.reason, **fields)
    return 9


def cmd_hash_full(args, out: Output) -> int:
    if args.db:
        params = _explicit_params(args) or Params(*SECURITY_PRESETS[args.params_preset])
        db = Database.loads(Path(args.db).read_text(encoding="ascii"), params)
    elif args.state_dir:
        state = Path(args.state_dir)
        pp = storage.load_pp(state)
        db = Database.loads((storage.current_files(state) / "db.tsv").read_text("ascii"),
                            pp.hash_params)
    else:
        raise ConfigError("hash-full needs --db or --state-dir")
    digest = full_hash(db)
    if args.out:
        Path(args.out).write_bytes(encode_hmh(digest))
    out.emit("hash-full", fingerprint(digest), fingerprint=fingerprint(digest), rows=len(db))
    return 0


def cmd_compact(args, out: Output) -> int:
    state = Path(args.state_dir)
    with storage.locked(state):
        dist = storage.load_distributor(state)
        dist.compact(args.floor)
        storage.save_distributor(state, dist)
    out.emit("compact", f"log floor is now {dist.log.floor}", floor=dist.log.floor)
    return 0


def cmd_bench(args, out: Output) -> int:
    try:
        sizes = [int(float(s)) for s in args.sizes.split(",") if s]
    except ValueError:
        raise ConfigError(f"bad --sizes {args.sizes!r}") from None
    stats = run_bench(sizes, reps=args.reps, validate_reps=args.validate_reps, seed=args.seed)
    lines = [CSV_HEADER] + [s.csv() for s in stats]
    if args.out:
        Path(args.out).write_text("\n".join(lines) + "\n")
    if out.mode == "records":
        for s in stats:
            out.emit("bench", "", N=s.n_rows, op=s.op, p50=s.p50, p95=s.p95, mean=s.mean,
                     samples=s.samples)
    else:
        print("\n".join(lines), file=out.stream)
    return 0


def cmd_genvectors(args, out: Output) -> int:
    params = _explicit_params(args) or Params()
    inputs: list[bytes] = []
    if args.inputs:
        for k, line in enumerate(Path(args.inputs).read_text().splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                inputs.append(bytes.fromhex(line))
            except ValueError:
                raise MalformedInputError(f"{args.inputs} line {k} is not hex") from None
    data = generate(params, inputs, include_worked_example=not args.no_worked_example)
    text = json.dumps(data, indent=1, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
        out.emit("genvectors", f"wrote {len(inputs)} vectors to {args.out}",
                 path=args.out, count=len(inputs))
    else:
        sys.stdout.write(text)
    return 0


def cmd_simulate(args, out: Output) -> int:
    cfg = ScenarioConfig.load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    report = run_scenario(cfg)
    print(report.to_records() if out.mode == "records" else report.to_text(), file=out.stream)
    # Rejected tampering is the expected outcome; only silent divergence is a failure.
    return 1 if report.silent_divergences else 0


# --- parser ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    # Accepted before or after the subcommand; SUPPRESS keeps the subparser
    # from resetting a value given at the top level.
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--output", choices=("text", "records"), default=argparse.SUPPRESS)

    params = argparse.ArgumentParser(add_help=False)
    params.add_argument("--params-preset", type=int, choices=sorted(SECURITY_PRESETS), default=128)
    params.add_argument("--d", type=int)
    params.add_argument("--n", type=int)

    p = argparse.ArgumentParser(prog="hmh", description="Homomorphic multiset hash toolkit.")
    p.add_argument("--output", choices=("text", "records"), default="text")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("init", parents=[common, params], help="create a distributor")
    c.add_argument("--state-dir", required=True)
    c.add_argument("--entropy-hex")
    c.add_argument("--scheme", choices=sorted(SCHEMES), default="ed25519")
    c.set_defaults(func=cmd_init)

    c = sub.add_parser("join", parents=[common], help="create a subscriber")
    c.add_argument("--state-dir", required=True)
    c.add_argument("--distributor", required=True)
    c.set_defaults(func=cmd_join)

    c = sub.add_parser("publish", parents=[common], help="publish row changes")
    c.add_argument("--state-dir", required=True)
    g = c.add_mutually_exclusive_group(required=True)
    g.add_argument("--insert", nargs=2, metavar=("INDEX", "PAYLOAD"))
    g.add_argument("--modify", nargs=2, metavar=("INDEX", "NEW"))
    g.add_argument("--delete", metavar="INDEX")
    g.add_argument("--workload", metavar="FILE", help="one log line per change")
    g.add_argument("--generate", type=int, metavar="COUNT")
    c.add_argument("--old", help="expected old payload (defaults to the current row)")
    c.add_argument("--hex", action="store_true", help="payloads are hex")
    c.add_argument("--mix", help='JSON, e.g. {"insert": 0.5, "modify": 0.5}')
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--verbose", action="store_true", help="one event per published version")
    c.set_defaults(func=cmd_publish)

    c = sub.add_parser("sync", parents=[common], help="pull and verify updates")
    c.add_argument("--state-dir", required=True)
    c.add_argument("--distributor", required=True)
    c.add_argument("--from", dest="from_version", type=int)
    c.add_argument("--to", dest="to_version", type=int)
    c.add_argument("--full", action="store_true", help="resync from a full snapshot")
    c.set_defaults(func=cmd_sync)

    c = sub.add_parser("validate", parents=[common], help="full recompute and signature check")
    c.add_argument("--state-dir", required=True)
    c.set_defaults(func=cmd_validate)

    c = sub.add_parser("hash-full", parents=[common, params], help="hash a database from scratch")
    c.add_argument("--state-dir")
    c.add_argument("--db", help="index<TAB>base64 fixture")
    c.add_argument("--out", help="write a .hmh digest file")
    c.set_defaults(func=cmd_hash_full)

    c = sub.add_parser("compact", parents=[common], help="drop log entries below a version")
    c.add_argument("--state-dir", required=True)
    c.add_argument("--floor", type=int, required=True)
    c.set_defaults(func=cmd_compact)

    c = sub.add_parser("bench", parents=[common], help="latency microbenchmarks")
    c.add_argument("--sizes", default="1000,10000")
    c.add_argument("--reps", type=int, default=100)
    c.add_argument("--validate-reps", type=int, default=3)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", help="CSV path")
    c.set_defaults(func=cmd_bench)

    c = sub.add_parser("genvectors", parents=[common, params], help="write golden test vectors")
    c.add_argument("--inputs", help="file of hex-encoded inputs, one per line")
    c.add_argument("--no-worked-example", action="store_true")
    c.add_argument("--out")
    c.set_defaults(func=cmd_genvectors)

    c = sub.add_parser("simulate", parents=[common], help="run a fault-injection scenario")
    c.add_argument("--config", required=True)
    c.add_argument("--seed", type=int)
    c.set_defaults(func=cmd_simulate)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    out = Output(args.output)
    try:
        return args.func(args, out)
    except HexaMorphError as exc:
        print(f"hmh: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"hmh: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
