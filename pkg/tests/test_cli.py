import csv
import io
import subprocess
import sys

import pytest

from revstore import Store
from revstore.cli import EXIT_INTEGRITY, EXIT_IO, EXIT_OK, EXIT_USAGE, main

from .conftest import random_bytes
from .helpers import sha1


def run(*argv):
    out = io.StringIO()
    code = main([str(a) for a in argv], out=out)
    return code, out.getvalue()


def table(text):
    return list(csv.DictReader(io.StringIO(text)))


@pytest.fixture
def images(tmp_path, rng):
    base = random_bytes(rng, 200_000)
    edited = bytearray(base)
    edited[5000:9000] = random_bytes(rng, 4000)
    paths = []
    for i, data in enumerate([base, bytes(edited), bytes(edited) + bytes(30000)]):
        p = tmp_path / f"img{i}"
        p.write_bytes(data)
        paths.append(p)
    return paths


def test_backup_restore_roundtrip(tmp_path, images):
    store = tmp_path / "store"
    common = ["--store", store]
    for p in images:
        code, text = run(*common, "backup", "--series", 3, "--input", p, "--chunk-bits", 8,
                         "--segment-bits", 12, "--container-mib", 0.05)
        assert code == EXIT_OK, text
    rows = table(text)
    assert rows[0]["version"] == "2" and rows[0]["reverse_deduplicated"] == "1"
    for v, p in enumerate(images):
        out = tmp_path / f"out{v}"
        code, text = run(*common, "restore", "--series", 3, "--version", v, "--output", out,
                         "--expect", sha1(p.read_bytes()))
        assert code == EXIT_OK
        assert out.read_bytes() == p.read_bytes()
    code, _ = run(*common, "restore", "--series", 3, "--version", 0, "--output", tmp_path / "x",
                  "--expect", "0" * 40)
    assert code == EXIT_INTEGRITY


def test_chunk_then_backup_with_descriptors(tmp_path, images):
    desc = tmp_path / "d.bin"
    code, text = run("chunk", "--input", images[0], "--output", desc, "--chunk-bits", 8,
                     "--segment-bits", 12)
    assert code == EXIT_OK and int(table(text)[0]["bytes"]) == 200_000
    code, _ = run("--store", tmp_path / "s", "backup", "--series", 0, "--input", images[0],
                  "--descriptors", desc)
    assert code == EXIT_OK
    code, _ = run("--store", tmp_path / "s", "backup", "--series", 0, "--input", images[1],
                  "--descriptors", desc)
    assert code == EXIT_USAGE       # listing does not cover this input


def test_revdedup_delete_and_stats(tmp_path, images):
    common = ["--store", tmp_path / "s"]
    for p in images:
        run(*common, "backup", "--series", 0, "--input", p, "--no-reverse", "--chunk-bits", 8,
            "--segment-bits", 12)
    code, text = run(*common, "delete", "--before", 1)
    assert code == EXIT_USAGE       # version 0 still pending
    for v in (0, 1):
        code, text = run(*common, "revdedup", "--series", 0, "--version", v)
        assert code == EXIT_OK
    code, text = run(*common, "revdedup", "--series", 0, "--version", 2)
    assert code == EXIT_USAGE
    code, text = run(*common, "delete", "--before", 1)
    assert code == EXIT_OK
    row = table(text)[0]
    assert row["versions_deleted"] == "1" and row["payload_bytes_read"] == "0"
    code, text = run(*common, "stats")
    assert code == EXIT_OK
    series_part, totals_part = text.split("\r\n\r\n")
    assert table(series_part)[0]["archival"] == "1"
    totals = table(totals_part)[0]
    s = Store(tmp_path / "s")
    assert int(totals["stored_bytes"]) == s.stored_payload()
    assert int(totals["containers"]) == len(s.meta.containers)


def test_stats_after_identical_backups(tmp_path, images):
    common = ["--store", tmp_path / "s"]
    for _ in range(2):
        run(*common, "backup", "--series", 0, "--input", images[0])
    totals = table(run(*common, "stats")[1].split("\r\n\r\n")[1])[0]
    assert int(totals["original_bytes"]) == 2 * 200_000
    assert float(totals["saving"]) == pytest.approx(0.5)


def test_empty_store_stats(tmp_path):
    Store(tmp_path / "s").close()
    code, text = run("--store", tmp_path / "s", "stats")
    totals = table(text.split("\r\n\r\n")[1])[0]
    assert code == EXIT_OK
    assert totals["stored_bytes"] == "0" and totals["containers"] == "0"


def test_usage_and_io_errors(tmp_path):
    assert run()[0] == EXIT_USAGE
    assert run("frobnicate")[0] == EXIT_USAGE
    assert run("bench", "nope")[0] == EXIT_USAGE
    assert run("--store", tmp_path / "s", "restore", "--series", 0, "--version", 0,
               "--output", tmp_path / "o")[0] == EXIT_USAGE
    assert run("--store", tmp_path / "s", "backup", "--series", 0,
               "--input", tmp_path / "missing")[0] == EXIT_IO


def test_gen_writes_manifest(tmp_path):
    code, _ = run("gen", "--dataset", "sg1", "--scale", "1/1024", "--weeks", 2, "--out",
                  tmp_path / "d")
    assert code == EXIT_OK
    rows = table((tmp_path / "d" / "manifest.csv").read_text())
    assert [r["file"] for r in rows] == ["week0.img", "week1.img"]
    for r in rows:
        assert sha1((tmp_path / "d" / r["file"]).read_bytes()) == r["sha1"]


def test_bench_header_and_columns(tmp_path):
    out = tmp_path / "b.csv"
    code, _ = run("bench", "delete", "--scale", "1/1024", "--weeks", 3, "--delete-counts", "1,2",
                  "--output", out, "--chunk-bits", 8, "--segment-bits", 12, "--plot",
                  tmp_path / "b.png")
    assert code == EXIT_OK
    lines = out.read_text().splitlines()
    header = [l for l in lines if l.startswith("#")]
    assert "# experiment=delete" in header and "# workload.alpha=2" in header
    rows = table("\n".join(l for l in lines if not l.startswith("#")))
    fast = [r for r in rows if r["strategy"] == "revdedup"]
    slow = [r for r in rows if r["strategy"] == "marksweep"]
    assert [r["payload_bytes_read"] for r in fast] == ["0", "0"]
    assert all(r["payload_bytes_read"] == r["payload_bytes_total"] for r in slow)
    assert [r["stored_after"] for r in fast] == [r["stored_after"] for r in slow]
    assert (tmp_path / "b.png").stat().st_size > 0


@pytest.mark.parametrize("experiment", ["storage", "restore-frag", "window-sweep"])
def test_bench_experiments_run(experiment):
    code, text = run("bench", experiment, "--scale", "1/1024", "--weeks", 3, "--chunk-bits", 8,
                     "--segment-bits", 12)
    assert code == EXIT_OK
    rows = table("\n".join(l for l in text.splitlines() if not l.startswith("#")))
    assert rows
    if experiment == "storage":
        assert {r["mode"] for r in rows} == {"inline-only", "revdedup", "conv", "chunk-oracle"}
        assert len(rows) == 3 * 4


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "revstore", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "bench" in r.stdout
