import io

import pytest

from revstore import ChunkingParams, IntegrityError, NotFoundError, Store
from revstore.chunker import ChunkingMode
from revstore.metastore import CHUNK_REMOVED, EntryKind
from revstore.restore import Resolver, plan

from .conftest import SMALL, random_bytes
from .helpers import evolve, sha1

FIXED = ChunkingParams(mode=ChunkingMode.FIXED_SIZE, fixed_chunk_size=1024,
                       fixed_chunks_per_segment=2)


def brute_resolve(meta, series_id, version, index):
    """Walk the chain by re-reading recipes from disk; returns (entry, hops)."""
    hops = 0
    v, i = version, index
    while True:
        meta.drop_recipe_cache()
        e = meta.read_recipe(series_id, v).entries[i]
        if e.kind is not EntryKind.INDIRECT:
            return e, hops
        v, i, hops = v + 1, e.ref, hops + 1


@pytest.fixture
def chain_store(tmp_path, rng):
    """Four backups that all share chunk A while everything else changes."""
    a = random_bytes(rng, 1024)
    versions = [a + random_bytes(rng, 3 * 1024) for _ in range(4)]
    s = Store(tmp_path / "s", container_capacity=1 << 16, chunking=FIXED)
    s.create_series(0)
    for d in versions:
        s.ingest(0, d)
    yield s, versions
    s.close()


def test_chain_of_length_three(chain_store):
    s, versions = chain_store
    e, hops = brute_resolve(s.meta, 0, 0, 0)
    assert hops == 3
    assert e == s.meta.read_recipe(0, 3).entries[0]
    assert Resolver(s.meta, 0).resolve(0, 0) == e
    for v, d in enumerate(versions):
        assert s.restore(0, v).digest == sha1(d)


def test_latest_reads_exactly_its_containers(chain_store):
    s, versions = chain_store
    latest = s.meta.read_recipe(0, 3)
    assert all(e.kind is EntryKind.DIRECT for e in latest.entries)
    cids = {s.meta.segment(e.ref).container_id for e in latest.entries}
    assert s.restore(0, 3).containers_read == len(cids)


def test_resolver_matches_brute_force(tmp_path, rng):
    s = Store(tmp_path / "s", container_capacity=4096, chunking=SMALL)
    s.create_series(0, live_len=2)
    data = random_bytes(rng, 40000)
    for _ in range(7):
        data = evolve(rng, data, zeros=True)
        s.ingest(0, data)
    newest = max(v.version for v in s.series(0).retained())
    for v in range(newest + 1):
        resolver = Resolver(s.meta, 0, memo_limit=7)
        fast = plan(s.meta, 0, v)
        for i in range(len(fast)):
            slow, hops = brute_resolve(s.meta, 0, v, i)
            assert hops <= newest - v
            assert resolver.resolve(v, i) == slow == fast[i]


def test_sink_receives_the_stream(small_store, rng):
    small_store.create_series(0)
    data = random_bytes(rng, 20000) + bytes(5000) + random_bytes(rng, 100)
    small_store.backup(0, data)
    buf = io.BytesIO()
    r = small_store.restore(0, 0, sink=buf)
    assert buf.getvalue() == data and r.nbytes == len(data)


@pytest.mark.parametrize("threads,prefetch", [(1, True), (4, False), (4, True)])
def test_prefetch_and_threads_do_not_change_output(tmp_path, rng, threads, prefetch):
    s = Store(tmp_path / "s", container_capacity=2048, chunking=SMALL)
    s.create_series(0)
    data = random_bytes(rng, 30000)
    for _ in range(3):
        data = evolve(rng, data)
        s.ingest(0, data)
    baseline = [s.restore(0, v) for v in range(3)]
    s.close()
    s = Store(tmp_path / "s", threads=threads)
    for v, base in enumerate(baseline):
        r = s.restore(0, v, prefetch=prefetch, batch=3)
        assert (r.digest, r.nbytes, r.containers_read) == (base.digest, base.nbytes, base.containers_read)


def test_removed_chunk_is_an_integrity_error(chain_store):
    s, _ = chain_store
    e = s.meta.read_recipe(0, 3).entries[0]
    seg = s.meta.segment(e.ref)
    s.meta.chunk(seg, e.chunk).flags |= CHUNK_REMOVED
    s.meta.touch_chunk(seg, e.chunk)
    with pytest.raises(IntegrityError, match="entry 0"):
        s.restore(0, 0)


def test_missing_chain_target_is_an_integrity_error(chain_store):
    s, _ = chain_store
    s.meta.delete_recipe(0, 1)
    s.meta.drop_recipe_cache()
    s.series(0).info(1)   # still listed as retained
    with pytest.raises(IntegrityError):
        s.restore(0, 0)


def test_deleted_version_is_not_found(chain_store):
    s, _ = chain_store
    s.delete_expired(s.series(0).info(1).created_at)
    with pytest.raises(NotFoundError):
        s.restore(0, 0)
