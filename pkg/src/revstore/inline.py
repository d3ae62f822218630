"""Write path: segment-level inline deduplication of one backup."""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

from .chunker import SegmentDescriptor, fingerprint, is_null, segment_fingerprint
from .errors import RejectedError
from .metastore import CHUNK_NULL, ChunkMeta, EntryKind, Recipe, RecipeEntry, SegmentMeta

if TYPE_CHECKING:
    from .store import Store

MAX_NULL_RUN = 0xFFFFFFFF


@dataclass
class BackupResult:
    series_id: int
    version: int
    timestamp: int
    original_size: int
    payload_bytes_written: int
    unique_segments: int
    elapsed: float
    entered_archival: list[int] = field(default_factory=list)
    expired: list[int] = field(default_factory=list)


def check_coverage(segments: list[SegmentDescriptor], size: int) -> None:
    pos = 0
    for seg in segments:
        if seg.offset != pos or not seg.chunks:
            raise RejectedError(f"descriptors do not cover the stream at byte {pos}")
        for c in seg.chunks:
            if c.offset != pos:
                raise RejectedError(f"chunk descriptors do not cover the stream at byte {pos}")
            pos += c.length
        if pos != seg.offset + seg.length:
            raise RejectedError(f"segment at byte {seg.offset} has inconsistent length")
    if pos != size:
        raise RejectedError(f"descriptors cover {pos} bytes, stream has {size}")


def check_fingerprints(segments: list[SegmentDescriptor], view: memoryview) -> None:
    """Reject descriptors whose chunk fingerprints or null flags disagree with the data."""
    for seg in segments:
        if seg.fp != segment_fingerprint([c.fp for c in seg.chunks]):
            raise RejectedError(f"segment at byte {seg.offset} has a wrong fingerprint")
        for c in seg.chunks:
            piece = view[c.offset:c.offset + c.length]
            if fingerprint(piece) != c.fp or is_null(piece) != c.is_null:
                raise RejectedError(f"chunk at byte {c.offset} does not match the data")


def as_conv(segments: list[SegmentDescriptor]) -> list[SegmentDescriptor]:
    """Conventional mode: every chunk is its own segment."""
    return [SegmentDescriptor(c.offset, c.length, segment_fingerprint([c.fp]), (c,))
            for seg in segments for c in seg.chunks]


def backup(store: "Store", series_id: int, data, segments: list[SegmentDescriptor],
           verify: bool = False) -> BackupResult:
    meta = store.meta
    state = meta.series_state(series_id)
    view = memoryview(data).cast("B")
    check_coverage(segments, len(view))
    if verify:
        check_fingerprints(segments, view)
    if state.conv:
        segments = as_conv(segments)

    version = state.next_version()
    ts = store.tick()
    before = store.containers.counters.snapshot()
    t0 = time.perf_counter()

    entries: list[RecipeEntry] = []
    referenced: set[int] = set()
    null_bytes = 0
    unique = 0
    builder = store.containers.open_builder()
    writer = ThreadPoolExecutor(1) if store.threads > 1 else None
    pending = []

    def seal(b):
        if writer:
            pending.append(writer.submit(store.containers.seal, b))
        else:
            store.containers.seal(b)

    for seg in segments:
        null_bytes += sum(c.length for c in seg.chunks if c.is_null)
        if seg.is_null:
            if entries and entries[-1].kind is EntryKind.NULL and entries[-1].length + seg.length <= MAX_NULL_RUN:
                entries[-1] = RecipeEntry.null(entries[-1].length + seg.length)
            else:
                entries.append(RecipeEntry.null(seg.length))
            continue
        seg_id = meta.lookup(seg.fp)
        if seg_id is None:
            payload = view[seg.offset:seg.offset + seg.length]
            if not builder.fits(seg.length):
                seal(builder)
                builder = store.containers.open_builder()
            # placement is known before the segment id; fill both in after append
            builder, cid, offset = store.containers.add_segment(builder, payload, -1)
            chunks = []
            rel = 0
            for c in seg.chunks:
                chunks.append(ChunkMeta(c.fp, c.length, rel, 0, CHUNK_NULL if c.is_null else 0))
                rel += c.length
            sm = SegmentMeta(fp=seg.fp, length=seg.length, chunk_start=0, chunk_count=0,
                             ref_count=1, container_id=cid, offset=offset, last_ref_ts=ts)
            seg_id = meta.append_segment_meta(sm, chunks)
            builder.segments[-1] = (seg_id, builder.segments[-1][1])
            referenced.add(seg_id)
            unique += 1
        elif seg_id not in referenced:
            sm = meta.segment(seg_id)
            sm.ref_count += 1
            sm.last_ref_ts = ts
            meta.touch_segment(sm)
            referenced.add(seg_id)
        sm = meta.segment(seg_id)
        for k, c in enumerate(meta.chunks(sm)):
            c.direct_refs += 1
            meta.touch_chunk(sm, k)
            entries.append(RecipeEntry.direct(seg_id, k, c.length))
    seal(builder)
    if writer:
        for f in pending:
            f.result()
        writer.shutdown()
    meta.flush()

    recipe = Recipe(series_id, version, ts, len(view), entries, null_bytes)
    meta.write_recipe(recipe)
    entered, expired = meta.advance_window(series_id, version, ts)
    elapsed = time.perf_counter() - t0
    written = (store.containers.counters - before).payload_bytes_written
    store.save_config()
    return BackupResult(series_id, version, ts, len(view), written, unique, elapsed,
                        entered, expired)
