"""Shared checks over a store's metadata."""

from revstore.metastore import EntryKind, UNDEFINED_TS


def check_reference_counts(store):
    seg_refs, chunk_refs = store.direct_references()
    meta = store.meta
    for seg in meta.segments():
        if seg.deleted:
            continue
        assert seg.ref_count == seg_refs.get(seg.seg_id, 0), f"segment {seg.seg_id}"
        for k, c in enumerate(meta.chunks(seg)):
            assert c.direct_refs == chunk_refs.get((seg.seg_id, k), 0), (seg.seg_id, k)
    for (sid, _k) in chunk_refs:
        assert not meta.segment(sid).deleted


def check_index(store):
    from revstore.metastore import MetaStore
    expected = {}
    for seg in store.meta.segments():
        if seg.ref_count > 0 and not seg.deleted:
            assert seg.fp not in expected, "two shared copies of one segment"
            expected[seg.fp] = seg.seg_id
    assert store.meta.index == expected
    store.meta.flush()
    assert MetaStore(store.root).index == expected


def check_container_partition(store):
    meta = store.meta
    for seg in meta.segments():
        if seg.deleted or seg.length == 0:
            continue
        rec = meta.containers[seg.container_id]
        if rec.timestamp == UNDEFINED_TS:
            assert seg.ref_count > 0, f"unstamped container {rec.container_id} holds non-shared segment"
        else:
            assert seg.ref_count == 0, f"stamped container {rec.container_id} holds shared segment"


def check_chains(store, series_id):
    state = store.series(series_id)
    retained = [v.version for v in state.retained()]
    latest = max(retained)
    for v in retained:
        for e in store.meta.read_recipe(series_id, v).entries:
            if e.kind is EntryKind.INDIRECT:
                assert v < latest and v + 1 in retained
    assert all(e.kind is not EntryKind.INDIRECT
               for e in store.meta.read_recipe(series_id, latest).entries)


def evolve(rng, data, edits=4, span=600, zeros=False):
    """Copy ``data`` with a few random overwrites (optionally zero runs)."""
    out = bytearray(data)
    for _ in range(edits):
        n = int(rng.integers(1, span))
        at = int(rng.integers(0, max(1, len(out) - n)))
        fill = bytes(n) if zeros and rng.random() < 0.3 else rng.bytes(n)
        out[at:at + n] = fill
    if rng.random() < 0.3:
        at = int(rng.integers(0, len(out)))
        out[at:at] = rng.bytes(int(rng.integers(1, span)))
    return bytes(out)


def sha1(data):
    import hashlib
    return hashlib.sha1(data).hexdigest()
