"""Out-of-line reverse deduplication of a backup against its successor.

When version ``v`` of a series leaves the live window, its segments lose
one reference each.  Every chunk of ``v`` that also occurs in ``v + 1`` is
re-pointed at the matching entry of ``v + 1``.  Chunks are physically
dropped only from segments no live backup shares any more, and only once no
retained recipe points at them directly.  The containers holding segments
that just became non-shared are rewritten: compacted non-shared segments go
to containers stamped with their backup time, shared segments to
unstamped ones.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import TYPE_CHECKING

from .containers import ContainerBuilder
from .errors import RejectedError
from .metastore import (CHUNK_REMOVED, NO_CONTAINER, REMOVED_OFFSET, UNDEFINED_TS,
                        EntryKind, MetaStore, Recipe, RecipeEntry, SegmentMeta, Window)

if TYPE_CHECKING:
    from .store import Store


@dataclass
class ReverseResult:
    series_id: int
    version: int
    containers_loaded: int
    bytes_reclaimed: int
    entries_redirected: int
    chunks_removed: int
    original_size: int
    elapsed: float

    @property
    def throughput(self) -> float:
        return self.original_size / self.elapsed if self.elapsed > 0 else float("inf")


def build_next_index(meta: MetaStore, recipe: Recipe) -> dict[bytes, int]:
    """Chunk fingerprint -> index of its first DIRECT entry in ``recipe``."""
    index: dict[bytes, int] = {}
    for i, e in enumerate(recipe.entries):
        if e.kind is EntryKind.DIRECT:
            fp = meta.chunk(meta.segment(e.ref), e.chunk).fp
            index.setdefault(fp, i)
    return index


def compact(raw: bytes, layout: list[tuple[int, int]], removed: set[int]
            ) -> tuple[bytes, list[int | None]]:
    """Drop chunks ``removed`` from a stored segment.

    ``layout`` lists (offset, length) of every chunk in ``raw``; removed
    chunks may already be absent (offset None).  Returns the compacted bytes
    and the new offset of each chunk (None when dropped).
    """
    parts = []
    offsets: list[int | None] = []
    pos = 0
    for k, (off, length) in enumerate(layout):
        if off is None or k in removed:
            offsets.append(None)
            continue
        parts.append(raw[off:off + length])
        offsets.append(pos)
        pos += length
    return b"".join(parts), offsets


def compact_segment(meta: MetaStore, seg: SegmentMeta, raw: bytes) -> bytes:
    """Compact a non-shared segment, dropping chunks nothing points at directly."""
    if seg.shared:
        raise RejectedError(f"segment {seg.seg_id} is still shared")
    chunks = meta.chunks(seg)
    layout = [(None if c.removed else c.offset, c.length) for c in chunks]
    removed = {k for k, c in enumerate(chunks) if c.direct_refs == 0}
    data, offsets = compact(raw, layout, removed)
    for k, (c, off) in enumerate(zip(chunks, offsets)):
        if off is None:
            if not c.removed:
                c.flags |= CHUNK_REMOVED
                c.offset = REMOVED_OFFSET
                meta.touch_chunk(seg, k)
        elif off != c.offset:
            c.offset = off
            meta.touch_chunk(seg, k)
    seg.length = len(data)
    meta.touch_segment(seg)
    return data


def select_containers(meta: MetaStore, transitioned: list[int], recipe: Recipe) -> list[int]:
    cids = set()
    for sid in transitioned:
        seg = meta.segment(sid)
        if seg.container_id != NO_CONTAINER and seg.length:
            cids.add(seg.container_id)
    for e in recipe.entries:
        if e.kind is EntryKind.DIRECT:
            seg = meta.segment(e.ref)
            rec = meta.containers.get(seg.container_id)
            if not seg.shared and rec is not None and rec.timestamp == UNDEFINED_TS:
                cids.add(seg.container_id)
    return sorted(cids)


def check_runnable(meta: MetaStore, series_id: int, version: int) -> None:
    state = meta.series_state(series_id)
    if state.conv:
        raise RejectedError(f"series {series_id} uses conventional dedup; reverse dedup is disabled")
    info = state.info(version)
    if info.window is Window.DELETED:
        raise RejectedError(f"version {version} has been deleted")
    if info.revdeduped:
        raise RejectedError(f"version {version} was already reverse-deduplicated")
    if info.window is Window.LIVE:
        raise RejectedError(f"version {version} is still in the live window")
    try:
        nxt = state.info(version + 1)
    except KeyError:
        raise RejectedError(f"version {version} has no following backup") from None
    if nxt.window is Window.DELETED or nxt.revdeduped:
        raise RejectedError(f"version {version + 1} is not available as a reference")
    for older in state.retained():
        if older.version < version and not older.revdeduped:
            raise RejectedError(f"older version {older.version} must be processed first")


def run(store: "Store", series_id: int, version: int) -> ReverseResult:
    meta = store.meta
    check_runnable(meta, series_id, version)
    state = meta.series_state(series_id)
    recipe = meta.read_recipe(series_id, version)
    nxt = meta.read_recipe(series_id, version + 1)
    stored_before = store.containers.stored_payload()
    before = store.containers.counters.snapshot()
    t0 = time.perf_counter()

    # decrement every segment once before classifying any of them
    transitioned = []
    seen = set()
    for e in recipe.entries:
        if e.kind is EntryKind.DIRECT and e.ref not in seen:
            seen.add(e.ref)
            seg = meta.segment(e.ref)
            seg.ref_count -= 1
            meta.touch_segment(seg)
            if seg.ref_count == 0:
                transitioned.append(e.ref)
    state.info(version).revdeduped = True

    index = build_next_index(meta, nxt)
    redirected = 0
    for i, e in enumerate(recipe.entries):
        if e.kind is not EntryKind.DIRECT:
            continue
        seg = meta.segment(e.ref)
        c = meta.chunk(seg, e.chunk)
        if c.is_null:
            new = RecipeEntry.null(e.length)
        elif c.fp in index:
            new = RecipeEntry.indirect(index[c.fp], e.length)
        else:
            continue
        meta.mutate_entry(series_id, version, i, new)
        c.direct_refs -= 1
        meta.touch_chunk(seg, e.chunk)
        redirected += 1

    loaded = select_containers(meta, transitioned, recipe)
    removed_before = _removed_chunks(meta, transitioned)
    stamped: dict[int, ContainerBuilder] = {}
    shared_builder = store.containers.open_builder(UNDEFINED_TS)
    for cid in loaded:
        ctr = store.containers.read_container(cid)
        for sid in ctr.directory:
            seg = meta.segment(sid)
            raw = ctr.segment(sid)
            if seg.shared:
                shared_builder = _place(store, shared_builder, seg, raw)
                continue
            data = compact_segment(meta, seg, raw)
            if not data:
                seg.container_id = NO_CONTAINER
                seg.offset = 0
                meta.touch_segment(seg)
                continue
            b = stamped.get(seg.last_ref_ts) or store.containers.open_builder(seg.last_ref_ts)
            stamped[seg.last_ref_ts] = _place(store, b, seg, data)
    for b in [shared_builder, *stamped.values()]:
        store.containers.seal(b)
    for cid in loaded:
        store.containers.discard(cid)
    meta.save_state(state)
    meta.flush()
    elapsed = time.perf_counter() - t0
    store.save_config()
    return ReverseResult(
        series_id, version, (store.containers.counters - before).containers_read,
        stored_before - store.containers.stored_payload(), redirected,
        _removed_chunks(meta, transitioned) - removed_before, recipe.original_size, elapsed)


def _place(store: "Store", builder: ContainerBuilder, seg: SegmentMeta, data: bytes
           ) -> ContainerBuilder:
    builder, cid, offset = store.containers.add_segment(builder, data, seg.seg_id)
    seg.container_id = cid
    seg.offset = offset
    store.meta.touch_segment(seg)
    return builder


def _removed_chunks(meta: MetaStore, seg_ids) -> int:
    return sum(c.removed for sid in seg_ids for c in meta.chunks(meta.segment(sid)))
