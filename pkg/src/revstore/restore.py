"""Reconstruct a retained backup from its recipe.

Entries are resolved first (following chains of indirect references into
newer versions), then every needed container is read once, in order of
first use, and chunks are emitted in entry order.
"""

from __future__ import annotations

import hashlib
import time
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import TYPE_CHECKING, BinaryIO

from .containers import Prefetcher
from .errors import IntegrityError, NotFoundError
from .metastore import NO_CONTAINER, EntryKind, MetaStore, RecipeEntry, Window

if TYPE_CHECKING:
    from .store import Store

_ZEROS = bytes(1 << 20)


@dataclass
class RestoreResult:
    digest: str
    nbytes: int
    containers_read: int
    elapsed: float


class Resolver:
    """Follows indirect references, memoising resolved (version, entry) pairs."""

    def __init__(self, meta: MetaStore, series_id: int, memo_limit: int = 1 << 20):
        self.meta = meta
        self.series_id = series_id
        state = meta.series_state(series_id)
        self.retained = {v.version for v in state.retained()}
        self.newest = max(self.retained, default=-1)
        self.memo: OrderedDict[tuple[int, int], RecipeEntry] = OrderedDict()
        self.memo_limit = memo_limit

    def resolve(self, version: int, index: int) -> RecipeEntry:
        """Return the DIRECT or NULL entry that entry ``index`` of ``version`` leads to."""
        path = []
        v, i = version, index
        while True:
            key = (v, i)
            hit = self.memo.get(key)
            if hit is not None:
                self.memo.move_to_end(key)
                final = hit
                break
            if v not in self.retained:
                raise IntegrityError(
                    f"series {self.series_id} version {version} entry {index}: "
                    f"reference chain reaches missing version {v}")
            try:
                e = self.meta.read_recipe(self.series_id, v).entries[i]
            except IndexError:
                raise IntegrityError(
                    f"series {self.series_id} version {v} has no entry {i}") from None
            except NotFoundError:
                raise IntegrityError(
                    f"series {self.series_id} version {version} entry {index}: "
                    f"recipe of version {v} is missing") from None
            path.append(key)
            if e.kind is not EntryKind.INDIRECT:
                final = e
                break
            if v >= self.newest:
                raise IntegrityError(
                    f"series {self.series_id} version {v} entry {i}: newest backup holds an indirect reference")
            v, i = v + 1, e.ref
        assert len(path) <= self.newest - version + 1, "reference chain too long"
        for key in path:
            self.memo[key] = final
        while len(self.memo) > self.memo_limit:
            self.memo.popitem(last=False)
        return final


def resolve(meta: MetaStore, series_id: int, version: int, index: int) -> RecipeEntry:
    return Resolver(meta, series_id).resolve(version, index)


def plan(meta: MetaStore, series_id: int, version: int) -> list[RecipeEntry]:
    state = meta.series_state(series_id)
    if state.info(version).window is Window.DELETED:
        raise NotFoundError(f"series {series_id} version {version} has been deleted")
    recipe = meta.read_recipe(series_id, version)
    resolver = Resolver(meta, series_id)
    return [e if e.kind is not EntryKind.INDIRECT else resolver.resolve(version, i)
            for i, e in enumerate(recipe.entries)]


def restore(store: "Store", series_id: int, version: int, sink: BinaryIO | None = None,
            prefetch: bool = False, batch: int = 4) -> RestoreResult:
    meta = store.meta
    t0 = time.perf_counter()
    resolved = plan(meta, series_id, version)

    # physical location of every direct chunk, checked before any data moves
    locs = []
    order: list[int] = []
    last_use: dict[int, int] = {}
    for i, e in enumerate(resolved):
        if e.kind is EntryKind.NULL:
            locs.append(None)
            continue
        seg = meta.segment(e.ref)
        c = meta.chunk(seg, e.chunk)
        if seg.deleted or c.removed or seg.container_id == NO_CONTAINER \
                or seg.container_id not in meta.containers:
            raise IntegrityError(
                f"series {series_id} version {version} entry {i}: "
                f"chunk {e.chunk} of segment {e.ref} is not stored")
        cid = seg.container_id
        if cid not in last_use:
            order.append(cid)
        last_use[cid] = i
        locs.append((cid, seg.offset + c.offset, c.length))

    digest = hashlib.sha1()
    nbytes = 0
    before = store.containers.counters.snapshot()
    prefetcher = Prefetcher(store.containers) if prefetch else None
    pool = ThreadPoolExecutor(store.threads) if store.threads > 1 else None
    futures: dict[int, object] = {}
    loaded: dict[int, bytes] = {}
    next_fetch = 0

    def fetch(cid):
        return store.containers.read_container(cid).raw

    def ensure(cid):
        nonlocal next_fetch
        while cid not in loaded:
            target = order[next_fetch]
            if pool:
                # keep one batch of reads in flight
                for j in range(next_fetch, min(next_fetch + batch, len(order))):
                    if order[j] not in futures:
                        futures[order[j]] = pool.submit(fetch, order[j])
                loaded[target] = futures.pop(target).result()
            else:
                loaded[target] = fetch(target)
            if prefetcher and next_fetch % batch == 0:
                prefetcher.hint(order[next_fetch + batch:next_fetch + 2 * batch])
            next_fetch += 1

    try:
        if prefetcher:
            prefetcher.hint(order[:batch])
        for i, (e, loc) in enumerate(zip(resolved, locs)):
            if loc is None:
                remaining = e.length
                while remaining:
                    piece = _ZEROS[:min(remaining, len(_ZEROS))]
                    digest.update(piece)
                    if sink is not None:
                        sink.write(piece)
                    remaining -= len(piece)
                nbytes += e.length
                continue
            cid, off, length = loc
            ensure(cid)
            piece = memoryview(loaded[cid])[off:off + length]
            if len(piece) != length:
                raise IntegrityError(f"entry {i}: container {cid} is truncated")
            digest.update(piece)
            if sink is not None:
                sink.write(piece)
            nbytes += length
            if last_use[cid] == i:
                del loaded[cid]
    finally:
        if pool:
            for f in futures.values():
                f.cancel()
            pool.shutdown()
        if prefetcher:
            prefetcher.close()
    return RestoreResult(digest.hexdigest(), nbytes,
                         (store.containers.counters - before).containers_read,
                         time.perf_counter() - t0)
