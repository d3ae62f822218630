import pytest

from revstore import RejectedError, Store, chunk_bytes
from revstore.metastore import UNDEFINED_TS, Window
from revstore.reclaim import snapshot

from .conftest import SMALL, random_bytes
from .helpers import (check_container_partition, check_index, check_reference_counts,
                      evolve, sha1)


def build(root, rng, weeks=6, series=(0,), capacity=4096):
    """Reverse-deduplicated store; returns it with {(series, version): (digest, data)}."""
    s = Store(root, container_capacity=capacity, chunking=SMALL)
    record = {}
    data = random_bytes(rng, 30000)
    for sid in series:
        s.create_series(sid)
    for _ in range(weeks):
        for sid in series:
            data = evolve(rng, data, zeros=True)
            res, _ = s.ingest(sid, data)
            record[(sid, res.version)] = (sha1(data), data)
    return s, record


def test_cutoff_before_everything_is_a_noop(tmp_path, rng):
    s, record = build(tmp_path / "s", rng)
    before = (s.stored_payload(), dict(s.meta.containers))
    r = s.delete_expired(0)
    assert r.versions_deleted == [] and r.containers_deleted == 0
    assert (s.stored_payload(), dict(s.meta.containers)) == before


def test_cutoff_in_live_window_is_rejected(tmp_path, rng):
    s, record = build(tmp_path / "s", rng)
    latest = s.series(0).info(s.series(0).latest)
    with pytest.raises(RejectedError):
        s.delete_expired(latest.created_at + 1)
    with pytest.raises(RejectedError):
        s.mark_and_sweep(latest.created_at + 1)


def test_pending_reverse_dedup_blocks_delete(tmp_path, rng):
    s = Store(tmp_path / "s", container_capacity=4096, chunking=SMALL)
    s.create_series(0)
    s.backup(0, random_bytes(rng, 5000))
    s.backup(0, random_bytes(rng, 5000))
    with pytest.raises(RejectedError):
        s.delete_expired(s.series(0).info(s.series(0).latest).created_at)


def test_delete_earliest_removes_its_stamped_containers(tmp_path, rng):
    s, record = build(tmp_path / "s", rng)
    ts0 = s.series(0).info(0).created_at
    stamped = {cid for cid, rec in s.meta.containers.items() if rec.timestamp == ts0}
    assert stamped
    others = set(s.meta.containers) - stamped
    r = s.delete_expired(ts0 + 1)
    assert r.versions_deleted == [(0, 0)]
    assert r.containers_read == 0 and r.payload_bytes_read == 0
    assert r.containers_deleted == len(stamped)
    assert set(s.meta.containers) == others
    assert s.series(0).info(0).window is Window.DELETED
    for (sid, v), (digest, _) in record.items():
        if v:
            assert s.restore(sid, v).digest == digest
    check_reference_counts(s)
    check_index(s)
    check_container_partition(s)
    again = s.delete_expired(ts0 + 1)
    assert again.versions_deleted == [] and again.containers_deleted == 0


def test_delete_all_but_latest(tmp_path, rng):
    s, record = build(tmp_path / "s", rng, weeks=7)
    latest = s.series(0).info(s.series(0).latest)
    s.delete_expired(latest.created_at)
    _, data = record[(0, latest.version)]
    reachable = {seg.fp: seg.length for seg in chunk_bytes(data, SMALL) if not seg.is_null}
    assert s.stored_payload() == sum(reachable.values())
    assert all(rec.timestamp == UNDEFINED_TS for rec in s.meta.containers.values())
    assert s.restore(0, latest.version).digest == record[(0, latest.version)][0]


def test_mark_and_sweep_matches_timestamp_delete(tmp_path, rng):
    s, record = build(tmp_path / "s", rng, weeks=6, series=(0, 1))
    s.close()
    a = Store(snapshot(tmp_path / "s", tmp_path / "a"))
    b = Store(snapshot(tmp_path / "s", tmp_path / "b"))
    cutoff = a.series(1).info(2).created_at + 1
    stored = a.stored_payload()
    fast = a.delete_expired(cutoff)
    slow = b.mark_and_sweep(cutoff)
    assert fast.payload_bytes_read == 0
    assert slow.containers_read == len(Store(tmp_path / "s").meta.containers)
    assert slow.payload_bytes_read == stored
    assert sorted(fast.versions_deleted) == sorted(slow.versions_deleted)
    assert a.stored_payload() == b.stored_payload()
    assert fast.bytes_reclaimed == slow.bytes_reclaimed
    for st in (a, b):
        for (sid, v), (digest, _) in record.items():
            if v > 2:
                assert st.restore(sid, v).digest == digest
        check_reference_counts(st)
        check_index(st)


def test_empty_mark_and_sweep_changes_nothing(tmp_path, rng):
    s, record = build(tmp_path / "s", rng)
    refs = s.direct_references()
    containers = dict(s.meta.containers)
    r = s.mark_and_sweep(0)
    assert r.containers_rewritten == 0 and r.containers_deleted == 0
    assert r.containers_read == len(containers)
    assert s.direct_references() == refs
    assert s.meta.containers == containers


def test_mark_and_sweep_without_reverse_dedup(tmp_path, rng):
    s = Store(tmp_path / "s", container_capacity=4096, chunking=SMALL)
    s.create_series(0, conv=True)
    data, digests = random_bytes(rng, 20000), []
    for _ in range(4):
        data = evolve(rng, data)
        digests.append(sha1(data))
        s.backup(0, data)
    with pytest.raises(RejectedError):
        s.delete_expired(s.series(0).info(2).created_at)
    r = s.mark_and_sweep(s.series(0).info(2).created_at)
    assert r.versions_deleted == [(0, 0), (0, 1)]
    assert r.bytes_reclaimed > 0
    for v in (2, 3):
        assert s.restore(0, v).digest == digests[v]
    check_reference_counts(s)
    check_index(s)
