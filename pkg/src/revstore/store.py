"""The storage engine facade tying metadata, containers and the operations together."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import BinaryIO

from . import inline, reclaim, restore as restore_mod, reverse
from .chunker import ChunkingParams, SegmentDescriptor, chunk_bytes
from .containers import DEFAULT_CAPACITY, ContainerStore, IoCounters
from .errors import NotFoundError
from .metastore import EntryKind, MetaStore, Window


@dataclass
class StoreStats:
    series: dict[int, dict[str, list[int]]]
    containers: int
    stamped_containers: int
    stored_payload: int
    original_bytes: int
    null_bytes: int

    @property
    def saving(self) -> float:
        logical = self.original_bytes - self.null_bytes
        return 1.0 - self.stored_payload / logical if logical else 0.0


class Store:
    """A deduplicating backup store rooted at a directory.

    ``ingest`` is the usual entry point: it stores a backup with inline
    segment dedup and reverse-deduplicates whatever left the live window.
    """

    CONFIG = "store.json"

    def __init__(self, root, container_capacity: int | None = None,
                 chunking: ChunkingParams | None = None, threads: int = 1,
                 durable: bool = False):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        cfg_path = self.root / self.CONFIG
        cfg = json.loads(cfg_path.read_text()) if cfg_path.exists() else {}
        self.capacity = int(container_capacity or cfg.get("container_capacity", DEFAULT_CAPACITY))
        if chunking is None and "chunking" in cfg:
            chunking = ChunkingParams(**cfg["chunking"])
        self.chunking = chunking or ChunkingParams()
        self.clock = int(cfg.get("clock", 0))
        self.threads = threads
        self.meta = MetaStore(self.root, durable=durable)
        self.containers = ContainerStore(self.root, self.meta, self.capacity, durable=durable)
        self.lifetime = IoCounters(**cfg.get("counters", {}))
        self._saved = self.containers.counters.snapshot()
        self.save_config()

    # -- bookkeeping

    def tick(self) -> int:
        ts = self.clock
        self.clock += 1
        return ts

    def save_config(self) -> None:
        now = self.containers.counters.snapshot()
        delta = now - self._saved
        for k, v in asdict(delta).items():
            setattr(self.lifetime, k, getattr(self.lifetime, k) + v)
        self._saved = now
        cfg = {
            "container_capacity": self.capacity,
            "clock": self.clock,
            "chunking": {**asdict(self.chunking), "mode": self.chunking.mode.value},
            "counters": asdict(self.lifetime),
        }
        tmp = self.root / (self.CONFIG + ".tmp")
        tmp.write_text(json.dumps(cfg, indent=1))
        os.replace(tmp, self.root / self.CONFIG)

    def close(self) -> None:
        self.save_config()
        self.meta.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # -- series

    def create_series(self, series_id: int, live_len: int = 1,
                      archival_len: int | None = None, conv: bool = False):
        return self.meta.create_series(series_id, live_len, archival_len, conv)

    def ensure_series(self, series_id: int, **kwargs):
        try:
            return self.meta.series_state(series_id)
        except NotFoundError:
            return self.create_series(series_id, **kwargs)

    def series(self, series_id: int):
        return self.meta.series_state(series_id)

    # -- operations

    def backup(self, series_id: int, data, segments: list[SegmentDescriptor] | None = None,
               params: ChunkingParams | None = None, verify: bool = False
               ) -> inline.BackupResult:
        """Store ``data`` as the next version of a series.

        ``segments`` is an optional precomputed segmentation; with ``verify``
        its fingerprints are checked against the data before anything is
        written.
        """
        if segments is None:
            segments = chunk_bytes(data, params or self.chunking, self.threads)
        return inline.backup(self, series_id, data, segments, verify)

    def reverse_dedup(self, series_id: int, version: int) -> reverse.ReverseResult:
        return reverse.run(self, series_id, version)

    def ingest(self, series_id: int, data, segments=None, params=None,
               reverse_dedup: bool = True, verify: bool = False):
        """Backup, then reverse-deduplicate every version that entered the archival window."""
        result = self.backup(series_id, data, segments, params, verify)
        jobs = []
        if reverse_dedup and not self.series(series_id).conv:
            for v in result.entered_archival:
                jobs.append(self.reverse_dedup(series_id, v))
        return result, jobs

    def pending_reverse(self, series_id: int) -> list[int]:
        state = self.series(series_id)
        return [v.version for v in state.retained()
                if v.window is not Window.LIVE and not v.revdeduped]

    def restore(self, series_id: int, version: int, sink: BinaryIO | None = None,
                prefetch: bool = False, batch: int = 4) -> restore_mod.RestoreResult:
        return restore_mod.restore(self, series_id, version, sink, prefetch, batch)

    def delete_expired(self, cutoff: int) -> reclaim.DeleteResult:
        return reclaim.delete_expired(self, cutoff)

    def mark_and_sweep(self, cutoff: int) -> reclaim.DeleteResult:
        return reclaim.mark_and_sweep(self, cutoff)

    # -- reporting

    def stored_payload(self) -> int:
        return self.containers.stored_payload()

    def stats(self) -> StoreStats:
        series = {}
        original = nulls = 0
        for sid in self.meta.series_ids():
            state = self.series(sid)
            windows: dict[str, list[int]] = {w.name.lower(): [] for w in Window
                                             if w is not Window.DELETED}
            for info in state.retained():
                windows[info.window.name.lower()].append(info.version)
                recipe = self.meta.read_recipe(sid, info.version)
                original += recipe.original_size
                nulls += recipe.null_bytes
            series[sid] = windows
        recs = self.meta.containers.values()
        return StoreStats(series, len(self.meta.containers),
                          sum(r.timestamp != 2 ** 64 - 1 for r in recs),
                          self.stored_payload(), original, nulls)

    def direct_references(self) -> tuple[dict[int, int], dict[tuple[int, int], int]]:
        """Recount references by walking every retained recipe.

        Returns (segment -> number of not-yet-reverse-deduplicated recipes
        referencing it, (segment, chunk) -> number of DIRECT entries).
        """
        seg_refs: dict[int, int] = {}
        chunk_refs: dict[tuple[int, int], int] = {}
        for sid in self.meta.series_ids():
            for info in self.series(sid).retained():
                recipe = self.meta.read_recipe(sid, info.version)
                segs = set()
                for e in recipe.entries:
                    if e.kind is EntryKind.DIRECT:
                        segs.add(e.ref)
                        chunk_refs[(e.ref, e.chunk)] = chunk_refs.get((e.ref, e.chunk), 0) + 1
                if not info.revdeduped:
                    for s in segs:
                        seg_refs[s] = seg_refs.get(s, 0) + 1
        return seg_refs, chunk_refs
