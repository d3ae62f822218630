import numpy as np
import pytest

from revstore.containers import ContainerStore, HEADER_SIZE
from revstore.errors import NotFoundError, RejectedError
from revstore.metastore import UNDEFINED_TS, MetaStore, SegmentMeta

MiB = 1 << 20


def _pack(cs, sizes, ts=UNDEFINED_TS):
    b = cs.open_builder(ts)
    placed = []
    for i, n in enumerate(sizes):
        b, cid, off = cs.add_segment(b, bytes([i % 251]) * n, i)
        placed.append((i, cid, off, n))
    cs.seal(b)
    return placed


def test_average_packing(tmp_path):
    meta = MetaStore(tmp_path)
    cs = ContainerStore(tmp_path, meta, capacity=32 * MiB)
    rng = np.random.default_rng(0)
    sizes = rng.integers(2 * MiB, 6 * MiB + 1, 40).tolist()
    placed = _pack(cs, sizes)
    per = len(placed) / len(meta.containers)
    assert 6 <= per <= 10


def test_oversized_segment_gets_own_container(tmp_path):
    meta = MetaStore(tmp_path)
    cs = ContainerStore(tmp_path, meta, capacity=32 * MiB)
    placed = _pack(cs, [40 * MiB])
    (rec,) = meta.containers.values()
    assert rec.payload_len == 40 * MiB and rec.segment_count == 1
    assert cs.path(placed[0][1]).stat().st_size > 40 * MiB


@pytest.mark.parametrize("seed", range(5))
def test_packing_never_splits_or_overfills(tmp_path, seed):
    meta = MetaStore(tmp_path)
    cap = 1 << 16
    cs = ContainerStore(tmp_path, meta, capacity=cap)
    rng = np.random.default_rng(seed)
    sizes = rng.integers(cap // 16, cap // 4 + 1, 200).tolist() + [cap * 2]
    placed = _pack(cs, sizes)
    for rec in meta.containers.values():
        assert rec.payload_len <= cap or rec.segment_count == 1
    # greedy rule: a container was sealed only because the next segment did not fit
    by_cid = {}
    for sid, cid, off, n in placed:
        by_cid.setdefault(cid, []).append(n)
    cids = sorted(by_cid)
    for a, b in zip(cids, cids[1:]):
        assert sum(by_cid[a]) + by_cid[b][0] > cap
    for sid, cid, off, n in placed:
        data = cs.read_container(cid)
        assert data.directory[sid] == (off, n)
        assert data.segment(sid) == bytes([sid % 251]) * n


def test_read_segment_and_counters(tmp_path):
    meta = MetaStore(tmp_path)
    cs = ContainerStore(tmp_path, meta, capacity=1000)
    b = cs.open_builder()
    b, cid, off = cs.add_segment(b, b"hello world", 0)
    cs.seal(b)
    seg = SegmentMeta(fp=b"f" * 20, length=11, chunk_start=0, chunk_count=0,
                      container_id=cid, offset=off)
    meta.append_segment_meta(seg, [])
    assert off == HEADER_SIZE
    assert cs.read_segment(0) == b"hello world"
    assert cs.counters.containers_read == 1 and cs.counters.payload_bytes_read == 11
    assert cs.counters.payload_bytes_written == 11 and cs.counters.containers_written == 1


def test_delete_requires_timestamp(tmp_path):
    meta = MetaStore(tmp_path)
    cs = ContainerStore(tmp_path, meta, capacity=1000)
    (_, undefined, _, _), = _pack(cs, [10])
    (_, stamped, _, _), = _pack(cs, [10], ts=0)
    with pytest.raises(RejectedError):
        cs.delete_container(undefined)
    cs.delete_container(stamped)
    with pytest.raises(NotFoundError):
        cs.read_container(stamped)
    assert not cs.path(stamped).exists()
    # tombstones survive a reopen
    assert set(MetaStore(tmp_path).containers) == {undefined}


def test_prefetch_is_semantics_free(tmp_path):
    meta = MetaStore(tmp_path)
    cs = ContainerStore(tmp_path, meta, capacity=1000)
    placed = _pack(cs, [300, 300, 300, 300], ts=1)
    cids = sorted({cid for _, cid, _, _ in placed})
    plain = [cs.read_container(c).raw for c in cids]
    cs.prefetch(cids)
    assert [cs.read_container(c).raw for c in cids] == plain
    cs.delete_container(cids[0])
    cs.prefetch(cids)  # deleted container: no-op
