import contextlib
import json
import os
from pathlib import Path

import pytest

from hexamorph import storage
from hexamorph.cli import main
from hexamorph.db_model import Database, UpdateDelta, format_log_line
from hexamorph.hash_core import decode_hmh, fingerprint

ENTROPY = "07" * 32
VECTORS = Path(__file__).parent / "vectors"


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def dirs(tmp_path, capsys):
    d, s = tmp_path / "dist", tmp_path / "sub"
    assert run(capsys, "init", "--state-dir", d, "--entropy-hex", ENTROPY)[0] == 0
    assert run(capsys, "join", "--state-dir", s, "--distributor", d)[0] == 0
    return d, s


def publish_fruit(capsys, d):
    for i, x in [(1, "apple"), (2, "orange"), (3, "banana")]:
        assert run(capsys, "publish", "--state-dir", d, "--insert", i, x)[0] == 0


def snapshot_files(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file() and p.name != ".lock"}


def test_init_writes_expected_files(tmp_path, capsys):
    code, out, _ = run(capsys, "--output", "records", "init", "--state-dir", tmp_path / "d",
                       "--entropy-hex", ENTROPY)
    rec = json.loads(out)
    assert code == 0 and rec["d"] == 16 and rec["n"] == 1024 and rec["version"] == 0
    names = {p.name for p in (tmp_path / "d").iterdir()}
    assert {"role", "pp.bin", "public.key", "secret.key", "genesis.sd", "current"} <= names
    assert oct((tmp_path / "d" / "secret.key").stat().st_mode & 0o777) == "0o600"


def test_init_is_reproducible(tmp_path, capsys):
    for name in ("a", "b"):
        run(capsys, "init", "--state-dir", tmp_path / name, "--entropy-hex", ENTROPY)
    a, b = snapshot_files(tmp_path / "a"), snapshot_files(tmp_path / "b")
    assert a == b and a


@pytest.mark.parametrize("level,n", [("192", 2048), ("256", 4096)])
def test_init_presets(tmp_path, capsys, level, n):
    code, out, _ = run(capsys, "--output", "records", "init", "--state-dir", tmp_path / "d",
                       "--params-preset", level, "--entropy-hex", ENTROPY)
    assert code == 0 and json.loads(out)["n"] == n


def test_init_explicit_params_and_schemes(tmp_path, capsys):
    code, out, _ = run(capsys, "--output", "records", "init", "--state-dir", tmp_path / "d",
                       "--d", 12, "--n", 10, "--scheme", "ecdsa", "--entropy-hex", ENTROPY)
    rec = json.loads(out)
    assert code == 0 and (rec["d"], rec["n"], rec["scheme"]) == (12, 10, "ecdsa_secp256k1")


@pytest.mark.parametrize("argv,code", [
    (["--d", "3", "--n", "3"], 3),
    (["--d", "16"], 3),
    (["--entropy-hex", "zz"], 3),
    (["--entropy-hex", "00"], 3),
    (["--params-preset", "100"], 2),
    (["--scheme", "rsa"], 2),
])
def test_init_rejects_bad_config(tmp_path, capsys, argv, code):
    with pytest.raises(SystemExit) if code == 2 else contextlib.nullcontext():
        assert run(capsys, "init", "--state-dir", tmp_path / "d", *argv)[0] == code
    assert not (tmp_path / "d" / "role").exists()


def test_init_twice_refused(dirs, capsys):
    d, _ = dirs
    assert run(capsys, "init", "--state-dir", d, "--entropy-hex", ENTROPY)[0] == 3


def test_empty_replica_validates(dirs, capsys):
    d, s = dirs
    assert run(capsys, "validate", "--state-dir", s)[0] == 0
    assert run(capsys, "validate", "--state-dir", d)[0] == 0


def test_worked_example_matches_golden_vector(dirs, capsys):
    d, s = dirs
    publish_fruit(capsys, d)
    assert run(capsys, "sync", "--state-dir", s, "--distributor", d)[0] == 0
    code, out, _ = run(capsys, "--output", "records", "publish", "--state-dir", d,
                       "--modify", 2, "peach")
    rec = json.loads(out)
    golden = json.loads((VECTORS / "golden_d16_n1024.json").read_text())["worked_example"]
    assert code == 0 and rec["version"] == 4
    assert rec["fingerprint"] == golden["H_D_star_fingerprint"]
    code, out, _ = run(capsys, "--output", "records", "sync", "--state-dir", s, "--distributor", d)
    assert code == 0 and json.loads(out)["fingerprint"] == golden["H_D_star_fingerprint"]
    code, out, _ = run(capsys, "--output", "records", "validate", "--state-dir", s)
    assert code == 0 and json.loads(out)["ok"]
    digest = decode_hmh((storage.current_files(s) / "digest.hmh").read_bytes())
    assert digest.tolist() and fingerprint(digest) == golden["H_D_star_fingerprint"]


def test_noop_modify(dirs, capsys):
    d, _ = dirs
    publish_fruit(capsys, d)
    fp = json.loads(run(capsys, "--output", "records", "validate", "--state-dir", d)[1])["recomputed"]
    out = json.loads(run(capsys, "--output", "records", "publish", "--state-dir", d,
                         "--modify", 1, "apple")[1])
    assert out["version"] == 4 and out["fingerprint"] == fp


@pytest.mark.parametrize("argv", [
    ["--insert", "1", "dup"],
    ["--modify", "9", "x"],
    ["--delete", "2", "--old", "nope"],
    ["--modify", "2", "x", "--old", "stale"],
])
def test_publish_rejects_inapplicable_delta(dirs, capsys, argv):
    d, _ = dirs
    publish_fruit(capsys, d)
    before = snapshot_files(d)
    code, _, err = run(capsys, "publish", "--state-dir", d, *argv)
    assert code == 8 and "Error" in err
    assert snapshot_files(d) == before


def test_publish_hex_payloads_and_delete(dirs, capsys):
    d, s = dirs
    assert run(capsys, "publish", "--state-dir", d, "--hex", "--insert", "0x10", "00ff")[0] == 0
    assert run(capsys, "publish", "--state-dir", d, "--delete", 16)[0] == 0
    assert run(capsys, "sync", "--state-dir", s, "--distributor", d)[0] == 0
    assert len(storage.load_subscriber(s).db) == 0
    assert run(capsys, "publish", "--state-dir", d, "--hex", "--insert", 1, "zz")[0] == 7


def test_workload_file_is_all_or_nothing(dirs, capsys, tmp_path):
    d, _ = dirs
    good = [UpdateDelta.insert(1, b"a"), UpdateDelta.modify(1, b"a", b"b")]
    path = tmp_path / "wl.tsv"
    path.write_text("".join(format_log_line(x) for x in good))
    assert run(capsys, "publish", "--state-dir", d, "--workload", path)[0] == 0
    before = snapshot_files(d)
    path.write_text(format_log_line(UpdateDelta.insert(2, b"c"))
                    + format_log_line(UpdateDelta.delete(1, b"wrong")))
    assert run(capsys, "publish", "--state-dir", d, "--workload", path)[0] == 8
    assert snapshot_files(d) == before
    path.write_text("garbage\n")
    assert run(capsys, "publish", "--state-dir", d, "--workload", path)[0] == 7


def test_generated_updates_match_hash_full(dirs, capsys):
    d, s = dirs
    code, out, _ = run(capsys, "--output", "records", "publish", "--state-dir", d,
                       "--generate", 2000, "--seed", 4)
    rec = json.loads(out)
    assert code == 0 and rec["version"] == 2000
    full = json.loads(run(capsys, "--output", "records", "hash-full", "--state-dir", d)[1])
    assert full["fingerprint"] == rec["fingerprint"]
    assert run(capsys, "sync", "--state-dir", s, "--distributor", d)[0] == 0
    assert run(capsys, "validate", "--state-dir", s)[0] == 0


def test_hash_full_on_fixture(tmp_path, capsys):
    db = Database({1: b"apple", 2: b"peach", 3: b"banana"})
    (tmp_path / "db.tsv").write_text(db.dumps())
    golden = json.loads((VECTORS / "golden_d16_n1024.json").read_text())["worked_example"]
    code, out, _ = run(capsys, "hash-full", "--db", tmp_path / "db.tsv", "--out", tmp_path / "x.hmh")
    assert code == 0 and out.strip() == golden["H_D_star_fingerprint"]
    assert decode_hmh((tmp_path / "x.hmh").read_bytes()).params.n == 1024
    assert run(capsys, "hash-full")[0] == 3


def test_sync_partial_ranges(dirs, capsys):
    d, s = dirs
    publish_fruit(capsys, d)
    assert run(capsys, "sync", "--state-dir", s, "--distributor", d, "--to", 2)[0] == 0
    assert storage.load_subscriber(s).version == 2
    assert run(capsys, "sync", "--state-dir", s, "--distributor", d, "--to", 2)[0] == 4
    assert run(capsys, "sync", "--state-dir", s, "--distributor", d, "--to", 1)[0] == 4
    assert run(capsys, "sync", "--state-dir", s, "--distributor", d, "--to", 9)[0] == 5
    assert run(capsys, "sync", "--state-dir", s, "--distributor", d, "--from", 0)[0] == 4
    assert run(capsys, "sync", "--state-dir", s, "--distributor", d, "--from", 2)[0] == 0
    code, out, _ = run(capsys, "sync", "--state-dir", s, "--distributor", d)
    assert code == 0 and "already" in out


def _flip_in(path: Path, pos: int):
    data = bytearray(path.read_bytes())
    data[pos] ^= 0x01
    path.write_bytes(bytes(data))


@pytest.mark.parametrize("target,pos", [
    ("log.tsv", -3),      # payload base64
    ("log.tsv", 0),       # version field
    ("sigs.tsv", -5),     # signature hex
    ("head.sd", -1),      # head signature
    ("head.sd", 100),     # head digest
])
def test_sync_against_corrupted_distributor_files(dirs, capsys, target, pos):
    d, s = dirs
    publish_fruit(capsys, d)
    _flip_in(storage.current_files(d) / target, pos)
    before = snapshot_files(s)
    code, _, err = run(capsys, "sync", "--state-dir", s, "--distributor", d)
    assert code == 7, err
    assert snapshot_files(s) == before


def test_validate_detects_corrupted_replica(dirs, capsys):
    d, s = dirs
    publish_fruit(capsys, d)
    run(capsys, "sync", "--state-dir", s, "--distributor", d)
    db_file = storage.current_files(s) / "db.tsv"
    db_file.write_text(db_file.read_text().replace("YXBwbGU=", "YXBwbGY="))
    code, out, _ = run(capsys, "--output", "records", "validate", "--state-dir", s)
    rec = json.loads(out)
    assert code == 9 and not rec["ok"] and rec["reason"] == "digest-mismatch"
    assert rec["recomputed"] != rec["expected"]


def test_compaction_and_full_resync(dirs, capsys):
    d, s = dirs
    publish_fruit(capsys, d)
    assert run(capsys, "compact", "--state-dir", d, "--floor", 2)[0] == 0
    assert run(capsys, "sync", "--state-dir", s, "--distributor", d)[0] == 5
    assert run(capsys, "sync", "--state-dir", s, "--distributor", d, "--full")[0] == 0
    assert storage.load_subscriber(s).version == 3
    assert run(capsys, "validate", "--state-dir", s)[0] == 0
    assert run(capsys, "compact", "--state-dir", d, "--floor", 1)[0] == 4


def test_lock_held(dirs, capsys):
    d, _ = dirs
    with storage.locked(d):
        code, _, err = run(capsys, "publish", "--state-dir", d, "--insert", 1, "x")
    assert code == 10 and "LockHeldError" in err
    assert run(capsys, "publish", "--state-dir", d, "--insert", 1, "x")[0] == 0


def test_crash_during_commit_leaves_old_state(dirs, capsys, monkeypatch):
    d, _ = dirs
    publish_fruit(capsys, d)
    before = storage.load_distributor(d)
    real = os.replace

    def crash(src, dst):
        if Path(dst).name == "current":
            raise OSError("simulated crash")
        return real(src, dst)

    monkeypatch.setattr(storage.os, "replace", crash)
    assert run(capsys, "publish", "--state-dir", d, "--insert", 9, "lost")[0] == 3
    monkeypatch.setattr(storage.os, "replace", real)
    after = storage.load_distributor(d)
    assert after.version == before.version == 3 and after.digest == before.digest
    assert run(capsys, "publish", "--state-dir", d, "--insert", 9, "kept")[0] == 0
    assert storage.load_distributor(d).version == 4
    assert sorted(p.name for p in d.iterdir() if p.name.startswith("gen-")) == \
        [os.readlink(d / "current")]


def test_role_mismatch_and_uninitialized(dirs, capsys, tmp_path):
    d, s = dirs
    assert run(capsys, "publish", "--state-dir", s, "--insert", 1, "x")[0] == 3
    assert run(capsys, "validate", "--state-dir", tmp_path / "nowhere")[0] == 3
    assert run(capsys, "sync", "--state-dir", d, "--distributor", s)[0] == 3


def test_params_mismatch_between_dirs(tmp_path, capsys):
    run(capsys, "init", "--state-dir", tmp_path / "a", "--entropy-hex", ENTROPY)
    run(capsys, "init", "--state-dir", tmp_path / "b", "--entropy-hex", "08" * 32)
    run(capsys, "join", "--state-dir", tmp_path / "s", "--distributor", tmp_path / "a")
    assert run(capsys, "sync", "--state-dir", tmp_path / "s", "--distributor", tmp_path / "b")[0] == 3


def test_usage_errors_exit_2(capsys):
    with pytest.raises(SystemExit) as info:
        main([])
    assert info.value.code == 2
    with pytest.raises(SystemExit) as info:
        main(["publish", "--state-dir", "x"])
    assert info.value.code == 2


def test_genvectors_reproduces_frozen_file(tmp_path, capsys):
    out = tmp_path / "v.json"
    assert run(capsys, "genvectors", "--inputs", VECTORS / "inputs.hex", "--out", out)[0] == 0
    assert out.read_text() == (VECTORS / "golden_d16_n1024.json").read_text()
    assert run(capsys, "genvectors", "--d", 4, "--n", 8, "--inputs", VECTORS / "inputs.hex",
               "--no-worked-example", "--out", out)[0] == 0
    assert out.read_text() == (VECTORS / "golden_d4_n8.json").read_text()


def test_simulate_command(tmp_path, capsys):
    cfg = {"seed": 1, "n_subscribers": 2, "params": {"d": 16, "n": 64}, "scheme": "nullsig",
           "workload": {"generate": {"n_rows": 5, "n_updates": 10}}, "sync_every": 3,
           "faults": [{"target": {"subscriber": 0, "type": "response", "index": 1},
                       "action": "forge_signature"}]}
    path = tmp_path / "s.json"
    path.write_text(json.dumps(cfg))
    code, out, _ = run(capsys, "--output", "records", "simulate", "--config", path)
    recs = [json.loads(line) for line in out.splitlines() if line]
    assert code == 0
    assert [r["status"] for r in recs if r["event"] == "subscriber"] == \
        ["tamper-detected", "converged"]
    code2, out2, _ = run(capsys, "--output", "records", "simulate", "--config", path)
    assert out2 == out
    assert run(capsys, "simulate", "--config", tmp_path / "missing.json")[0] == 3


def test_bench_command(tmp_path, capsys):
    csv = tmp_path / "b.csv"
    code, out, _ = run(capsys, "bench", "--sizes", "50,100", "--reps", 5, "--validate-reps", 2,
                       "--out", csv)
    lines = csv.read_text().splitlines()
    assert code == 0 and lines[0] == "N,op,p50,p95,mean"
    rows = [line.split(",") for line in lines[1:]]
    assert {r[1] for r in rows} == {"publish", "publish_full", "apply", "apply_batch100", "validate"}
    assert {r[0] for r in rows} == {"50", "100"}
    assert all(float(x) >= 0 for r in rows for x in r[2:])
    assert run(capsys, "bench", "--sizes", "abc")[0] == 3


@pytest.mark.slow
def test_hundred_thousand_generated_updates(dirs, capsys):
    d, s = dirs
    code, out, _ = run(capsys, "--output", "records", "publish", "--state-dir", d,
                       "--generate", 100_000, "--seed", 9)
    rec = json.loads(out)
    assert code == 0 and rec["count"] == 100_000 and rec["version"] == 100_000
    full = json.loads(run(capsys, "--output", "records", "hash-full", "--state-dir", d)[1])
    assert full["fingerprint"] == rec["fingerprint"]
    assert run(capsys, "sync", "--state-dir", s, "--distributor", d)[0] == 0
    assert run(capsys, "validate", "--state-dir", s)[0] == 0
