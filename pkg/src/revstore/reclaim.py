"""Deletion of expired backups.

``delete_expired`` relies on container timestamps: a stamped container only
holds non-shared segments whose newest referencing backup carries that
timestamp, so every stamped container older than the cutoff can go without
reading it.  ``mark_and_sweep`` is the conventional baseline: recount
references, then read every container and rewrite those that lost segments.
"""

from __future__ import annotations

import shutil
import time
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING

from .errors import RejectedError
from .metastore import UNDEFINED_TS, EntryKind, MetaStore, SegmentMeta, SEG_DELETED, Window

if TYPE_CHECKING:
    from .store import Store


@dataclass
class DeleteResult:
    versions_deleted: list[tuple[int, int]]
    containers_deleted: int
    containers_read: int
    payload_bytes_read: int
    bytes_reclaimed: int
    elapsed: float
    mark_elapsed: float = 0.0
    sweep_elapsed: float = 0.0
    containers_rewritten: int = 0


def expired_versions(meta: MetaStore, cutoff: int, require_revdedup: bool
                     ) -> list[tuple[int, int]]:
    victims = []
    for sid in meta.series_ids():
        state = meta.series_state(sid)
        for info in state.retained():
            if info.created_at >= cutoff:
                continue
            if info.window is Window.LIVE:
                raise RejectedError(
                    f"cutoff {cutoff} reaches series {sid} version {info.version} in the live window")
            if require_revdedup and not info.revdeduped:
                raise RejectedError(
                    f"series {sid} version {info.version} has not been reverse-deduplicated")
            victims.append((sid, info.version))
    return victims


def _drop_recipes(meta: MetaStore, victims) -> None:
    """Forget the victims' recipes, releasing the references they hold."""
    for sid, version in victims:
        state = meta.series_state(sid)
        info = state.info(version)
        recipe = meta.read_recipe(sid, version)
        seen = set()
        for e in recipe.entries:
            if e.kind is not EntryKind.DIRECT:
                continue
            seg = meta.segment(e.ref)
            if not info.revdeduped and e.ref not in seen:
                seen.add(e.ref)
                seg.ref_count -= 1
                meta.touch_segment(seg)
            meta.chunk(seg, e.chunk).direct_refs -= 1
            meta.touch_chunk(seg, e.chunk)
        meta.delete_recipe(sid, version)
        info.window = Window.DELETED
        meta.save_state(state)


def _retire(meta: MetaStore, seg: SegmentMeta) -> None:
    seg.flags |= SEG_DELETED
    seg.ref_count = 0
    meta.touch_segment(seg)


def delete_expired(store: "Store", cutoff: int) -> DeleteResult:
    meta = store.meta
    t0 = time.perf_counter()
    before = store.containers.counters.snapshot()
    stored_before = store.containers.stored_payload()
    victims = expired_versions(meta, cutoff, require_revdedup=True)
    _drop_recipes(meta, victims)
    doomed = {cid for cid, rec in meta.containers.items()
              if rec.timestamp != UNDEFINED_TS and rec.timestamp < cutoff}
    if doomed:
        for seg in meta.segments():
            if seg.container_id in doomed and not seg.deleted:
                _retire(meta, seg)
    for cid in sorted(doomed):
        store.containers.delete_container(cid)
    meta.flush()
    store.save_config()
    delta = store.containers.counters - before
    return DeleteResult(victims, len(doomed), delta.containers_read, delta.payload_bytes_read,
                        stored_before - store.containers.stored_payload(),
                        time.perf_counter() - t0)


def _reachable(meta: MetaStore, seg: SegmentMeta) -> bool:
    if seg.deleted:
        return False
    return seg.ref_count > 0 or any(c.direct_refs > 0 for c in meta.chunks(seg))


def mark_and_sweep(store: "Store", cutoff: int) -> DeleteResult:
    meta = store.meta
    t0 = time.perf_counter()
    before = store.containers.counters.snapshot()
    stored_before = store.containers.stored_payload()

    victims = expired_versions(meta, cutoff, require_revdedup=False)
    _drop_recipes(meta, victims)
    dead = {seg.seg_id for seg in meta.segments() if not seg.deleted and not _reachable(meta, seg)}
    t_mark = time.perf_counter()

    rewritten = 0
    deleted = 0
    for cid in sorted(meta.containers):
        ctr = store.containers.read_container(cid)
        gone = [sid for sid in ctr.directory if sid in dead]
        if not gone:
            continue
        survivors = [sid for sid in ctr.directory if sid not in dead]
        if survivors:
            builder = store.containers.open_builder(ctr.timestamp)
            for sid in survivors:
                seg = meta.segment(sid)
                builder, new_cid, off = store.containers.add_segment(builder, ctr.segment(sid), sid)
                seg.container_id, seg.offset = new_cid, off
                meta.touch_segment(seg)
            store.containers.seal(builder)
            rewritten += 1
        else:
            deleted += 1
        store.containers.discard(cid)
    for sid in dead:
        _retire(meta, meta.segment(sid))
    meta.flush()
    store.save_config()
    t_end = time.perf_counter()
    delta = store.containers.counters - before
    return DeleteResult(victims, deleted, delta.containers_read, delta.payload_bytes_read,
                        stored_before - store.containers.stored_payload(), t_end - t0,
                        mark_elapsed=t_mark - t0, sweep_elapsed=t_end - t_mark,
                        containers_rewritten=rewritten)


def snapshot(root, dest) -> Path:
    """Copy a closed store directory (used to replay deletions from one state)."""
    dest = Path(dest)
    shutil.copytree(root, dest)
    return dest
