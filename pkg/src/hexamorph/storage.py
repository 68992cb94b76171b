"""State directories for the CLI.

Layout::

    <state-dir>/
      role              "distributor" or "subscriber"
      pp.bin            public parameters
      public.key        HMHKEY01 key file
      secret.key        distributor only
      genesis.sd        signed digest for version 0
      current -> gen-N  symlink to the live generation
      gen-N/
        db.tsv          index<TAB>base64(payload)
        head.sd         signed digest for the current version
        log.tsv         distributor: one delta per line
        sigs.tsv        distributor: version<TAB>hex(signature), floor..head
        digest.hmh      subscriber: incrementally maintained digest

A mutation writes a complete new ``gen-N+1`` directory and then swaps the
``current`` symlink with ``os.replace``; a crash leaves either the old or
the new generation live, never a mix.
"""

from __future__ import annotations

import contextlib
import fcntl
import os
import re
import shutil
from pathlib import Path

from .db_model import Database, format_log_line, parse_log_line
from .errors import ConfigError, LockHeldError, MalformedInputError
from .hash_core import decode_hmh, encode_hmh
from .protocol import Distributor, PublicParameters, Subscriber, UpdateLog
from .signatures import SignedDigest, decode_key, encode_key

_GEN = re.compile(r"^gen-(\d+)$")


def _write_atomic(path: Path, data: bytes) -> None:
    tmp = path.with_name(f".{path.name}.tmp-{os.getpid()}")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


@contextlib.contextmanager
def locked(state_dir: Path):
    """Exclusive writer lock on a state directory."""
    state_dir.mkdir(parents=True, exist_ok=True)
    fh = open(state_dir / ".lock", "a+")
    try:
        try:
            fcntl.flock(fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError:
            raise LockHeldError(f"{state_dir} is locked by another process") from None
        yield
    finally:
        fh.close()


def read_role(state_dir: Path) -> str:
    try:
        return (state_dir / "role").read_text().strip()
    except FileNotFoundError:
        raise ConfigError(f"{state_dir} is not an initialized state directory") from None


def load_pp(state_dir: Path) -> PublicParameters:
    try:
        return PublicParameters.from_bytes((state_dir / "pp.bin").read_bytes())
    except FileNotFoundError:
        raise ConfigError(f"{state_dir}: missing pp.bin") from None


def _current(state_dir: Path) -> Path:
    link = state_dir / "current"
    if not link.is_symlink() and not link.is_dir():
        raise ConfigError(f"{state_dir}: no current generation")
    return state_dir / os.readlink(link) if link.is_symlink() else link


def _commit_generation(state_dir: Path, files: dict[str, bytes]) -> Path:
    gens = [int(m.group(1)) for p in state_dir.iterdir() if (m := _GEN.match(p.name))]
    n = max(gens, default=0) + 1
    tmp = state_dir / f".gen-{n}.tmp-{os.getpid()}"
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir()
    for name, data in files.items():
        with open(tmp / name, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
    final = state_dir / f"gen-{n}"
    os.rename(tmp, final)
    link_tmp = state_dir / f".current.tmp-{os.getpid()}"
    if link_tmp.is_symlink() or link_tmp.exists():
        link_tmp.unlink()
    os.symlink(final.name, link_tmp)
    os.replace(link_tmp, state_dir / "current")
    for g in gens:
        shutil.rmtree(state_dir / f"gen-{g}", ignore_errors=True)
    return final


def _read(path: Path) -> bytes:
    try:
        return path.read_bytes()
    except FileNotFoundError:
        raise MalformedInputError(f"missing state file {path}") from None


def _text(path: Path) -> str:
    try:
        return _read(path).decode("ascii")
    except UnicodeDecodeError:
        raise MalformedInputError(f"{path} is not ASCII") from None


# --- distributor --------------------------------------------------------------------


def init_distributor(state_dir: Path, pp: PublicParameters, secret_key: bytes) -> Distributor:
    state_dir.mkdir(parents=True, exist_ok=True)
    if (state_dir / "role").exists():
        raise ConfigError(f"{state_dir} is already initialized")
    dist = Distributor(pp, secret_key)
    _write_atomic(state_dir / "pp.bin", pp.to_bytes())
    _write_atomic(state_dir / "public.key", encode_key(pp.public_key, pp.scheme_id))
    _write_atomic(state_dir / "secret.key", encode_key(secret_key, pp.scheme_id))
    os.chmod(state_dir / "secret.key", 0o600)
    _write_atomic(state_dir / "genesis.sd", dist.signed.to_bytes())
    save_distributor(state_dir, dist)
    _write_atomic(state_dir / "role", b"distributor\n")
    return dist


def save_distributor(state_dir: Path, dist: Distributor) -> None:
    log_lines = "".join(format_log_line(d) for d in dist.log)
    sigs = "".join(f"{v}\t{s.hex()}\n" for v, s in dist.log.signatures())
    _commit_generation(state_dir, {
        "db.tsv": dist.db.dumps().encode("ascii"),
        "log.tsv": log_lines.encode("ascii"),
        "sigs.tsv": sigs.encode("ascii"),
        "head.sd": dist.signed.to_bytes(),
    })


def load_distributor(state_dir: Path, *, with_secret: bool = True) -> Distributor:
    """Load distributor state. Without the secret key the result can serve
    ``get_updates`` but must not publish."""
    if read_role(state_dir) != "distributor":
        raise ConfigError(f"{state_dir} is not a distributor state directory")
    pp = load_pp(state_dir)
    sk = b""
    if with_secret:
        sk, scheme = decode_key(_read(state_dir / "secret.key"))
        if scheme != pp.scheme_id:
            raise MalformedInputError("secret key scheme differs from public parameters")
    gen = _current(state_dir)
    params = pp.hash_params
    db = Database.loads(_text(gen / "db.tsv"), params)
    head = SignedDigest.from_bytes(_read(gen / "head.sd"), params)
    deltas = [parse_log_line(line, k) for k, line in
              enumerate(_text(gen / "log.tsv").splitlines(), 1) if line]
    versions, signatures = [], []
    for k, line in enumerate(_text(gen / "sigs.tsv").splitlines(), 1):
        parts = line.split("\t")
        try:
            versions.append(int(parts[0]))
            signatures.append(bytes.fromhex(parts[1]))
        except (ValueError, IndexError):
            raise MalformedInputError(f"sigs.tsv line {k} is malformed") from None
    if not versions or versions != list(range(versions[0], versions[0] + len(versions))):
        raise MalformedInputError("sigs.tsv versions are not contiguous")
    log = UpdateLog.rebuild(versions[0], deltas, signatures)
    return Distributor.restore(pp, sk, db, head, log)


# --- subscriber -------------------------------------------------------------------------


def init_subscriber(state_dir: Path, distributor_dir: Path) -> Subscriber:
    state_dir.mkdir(parents=True, exist_ok=True)
    if (state_dir / "role").exists():
        raise ConfigError(f"{state_dir} is already initialized")
    pp_bytes = _read(distributor_dir / "pp.bin")
    pp = PublicParameters.from_bytes(pp_bytes)
    genesis = SignedDigest.from_bytes(_read(distributor_dir / "genesis.sd"), pp.hash_params)
    sub = Subscriber(pp, genesis)
    _write_atomic(state_dir / "pp.bin", pp_bytes)
    _write_atomic(state_dir / "public.key", encode_key(pp.public_key, pp.scheme_id))
    _write_atomic(state_dir / "genesis.sd", genesis.to_bytes())
    save_subscriber(state_dir, sub)
    _write_atomic(state_dir / "role", b"subscriber\n")
    return sub


def save_subscriber(state_dir: Path, sub: Subscriber) -> None:
    _commit_generation(state_dir, {
        "db.tsv": sub.db.dumps().encode("ascii"),
        "head.sd": sub.last_signed.to_bytes(),
        "digest.hmh": encode_hmh(sub.digest),
    })


def load_subscriber(state_dir: Path) -> Subscriber:
    if read_role(state_dir) != "subscriber":
        raise ConfigError(f"{state_dir} is not a subscriber state directory")
    pp = load_pp(state_dir)
    gen = _current(state_dir)
    db = Database.loads(_text(gen / "db.tsv"), pp.hash_params)
    head = SignedDigest.from_bytes(_read(gen / "head.sd"), pp.hash_params)
    digest = decode_hmh(_read(gen / "digest.hmh"))
    if digest.params != pp.hash_params:
        raise MalformedInputError("stored digest params differ from public parameters")
    return Subscriber.restore(pp, db, digest, head)


def load_any(state_dir: Path):
    role = read_role(state_dir)
    if role == "distributor":
        return load_distributor(state_dir, with_secret=False)
    if role == "subscriber":
        return load_subscriber(state_dir)
    raise ConfigError(f"{state_dir}: unknown role {role!r}")


def current_files(state_dir: Path) -> Path:
    """Path of the live generation directory (for inspection and tests)."""
    return _current(state_dir)
