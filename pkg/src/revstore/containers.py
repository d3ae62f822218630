"""Container files: fixed-capacity units holding whole segments.

A container file ``containers/ctr.<id>`` is a 64-byte header, the segment
payloads back to back, then a directory of (seg_id, offset, length)
records.  Offsets are absolute file offsets, so a segment is read with one
positioned read.
"""

from __future__ import annotations

import os
import queue
import struct
import threading
import zlib
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import CorruptLogError, NotFoundError, RejectedError
from .metastore import UNDEFINED_TS, ContainerRecord, MetaStore

HEADER = struct.Struct("<8sQQI4xQQ12x")
HEADER_SIZE = HEADER.size + 4
DIR_ENTRY = struct.Struct("<QII")
MAGIC = b"RSCONTNR"
DEFAULT_CAPACITY = 32 << 20


@dataclass
class IoCounters:
    containers_written: int = 0
    containers_read: int = 0
    payload_bytes_written: int = 0
    payload_bytes_read: int = 0

    def reset(self) -> None:
        for f in fields(self):
            setattr(self, f.name, 0)

    def snapshot(self) -> "IoCounters":
        return IoCounters(**vars(self))

    def __sub__(self, other: "IoCounters") -> "IoCounters":
        return IoCounters(**{f.name: getattr(self, f.name) - getattr(other, f.name)
                             for f in fields(self)})


@dataclass
class ContainerBuilder:
    container_id: int
    timestamp: int
    capacity: int
    segments: list[tuple[int, bytes]] = field(default_factory=list)
    size: int = 0

    def fits(self, length: int) -> bool:
        # an empty builder takes any segment, even one larger than capacity
        return not self.segments or self.size + length <= self.capacity


@dataclass
class ContainerData:
    container_id: int
    timestamp: int
    directory: dict[int, tuple[int, int]]  # seg_id -> (absolute offset, length)
    raw: bytes

    def segment(self, seg_id: int) -> bytes:
        off, length = self.directory[seg_id]
        return self.raw[off:off + length]

    @property
    def payload_len(self) -> int:
        return sum(length for _, length in self.directory.values())


class ContainerStore:
    def __init__(self, root, meta: MetaStore, capacity: int = DEFAULT_CAPACITY,
                 durable: bool = False):
        self.dir = Path(root) / "containers"
        self.dir.mkdir(parents=True, exist_ok=True)
        self.meta = meta
        self.capacity = capacity
        self.durable = durable
        self.counters = IoCounters()
        self._lock = threading.Lock()

    def path(self, cid: int) -> Path:
        return self.dir / f"ctr.{cid}"

    # -- writing

    def open_builder(self, timestamp: int = UNDEFINED_TS) -> ContainerBuilder:
        return ContainerBuilder(self.meta.new_container_id(), timestamp, self.capacity)

    def add_segment(self, builder: ContainerBuilder, data: bytes, seg_id: int
                    ) -> tuple[ContainerBuilder, int, int]:
        """Place a segment; returns (current builder, container id, file offset).

        When the segment does not fit, ``builder`` is sealed and a fresh one
        with the same timestamp receives the segment.
        """
        if not builder.fits(len(data)):
            self.seal(builder)
            builder = self.open_builder(builder.timestamp)
        offset = HEADER_SIZE + builder.size
        builder.segments.append((seg_id, bytes(data)))
        builder.size += len(data)
        return builder, builder.container_id, offset

    def seal(self, builder: ContainerBuilder) -> ContainerRecord | None:
        if not builder.segments:
            return None
        directory = []
        off = HEADER_SIZE
        for seg_id, data in builder.segments:
            directory.append(DIR_ENTRY.pack(seg_id, off, len(data)))
            off += len(data)
        dir_blob = b"".join(directory)
        head = HEADER.pack(MAGIC, builder.container_id, builder.timestamp,
                           len(builder.segments), builder.size, off)
        path = self.path(builder.container_id)
        with open(path, "wb") as f:
            f.write(head + struct.pack("<I", zlib.crc32(head)))
            for _, data in builder.segments:
                f.write(data)
            f.write(dir_blob + struct.pack("<I", zlib.crc32(dir_blob)))
            if self.durable:
                f.flush()
                os.fsync(f.fileno())
        rec = ContainerRecord(builder.container_id, builder.timestamp,
                              len(builder.segments), builder.size)
        self.meta.record_container(rec)
        with self._lock:
            self.counters.containers_written += 1
            self.counters.payload_bytes_written += builder.size
        builder.segments = []
        builder.size = 0
        return rec

    # -- reading

    def read_container(self, cid: int) -> ContainerData:
        if cid not in self.meta.containers:
            raise NotFoundError(f"container {cid} does not exist")
        path = self.path(cid)
        try:
            raw = path.read_bytes()
        except FileNotFoundError:
            raise NotFoundError(f"container file {path.name} is missing") from None
        head = raw[:HEADER_SIZE]
        if len(head) < HEADER_SIZE or zlib.crc32(head[:-4]) != struct.unpack("<I", head[-4:])[0]:
            raise CorruptLogError(path, 0, "bad container header")
        magic, ccid, ts, count, payload_len, dir_off = HEADER.unpack(head[:-4])
        if magic != MAGIC or ccid != cid:
            raise CorruptLogError(path, 0, "bad container magic")
        dir_blob = raw[dir_off:dir_off + count * DIR_ENTRY.size]
        crc = raw[dir_off + count * DIR_ENTRY.size:dir_off + count * DIR_ENTRY.size + 4]
        if zlib.crc32(dir_blob) != struct.unpack("<I", crc)[0]:
            raise CorruptLogError(path, 1, "bad container directory")
        directory = {seg_id: (off, length) for seg_id, off, length in DIR_ENTRY.iter_unpack(dir_blob)}
        with self._lock:
            self.counters.containers_read += 1
            self.counters.payload_bytes_read += payload_len
        return ContainerData(cid, ts, directory, raw)

    def read_segment(self, seg_id: int) -> bytes:
        seg = self.meta.segment(seg_id)
        if seg.deleted:
            raise NotFoundError(f"segment {seg_id} has been deleted")
        if seg.length == 0:
            return b""
        if seg.container_id not in self.meta.containers:
            raise NotFoundError(f"segment {seg_id}: container {seg.container_id} is gone")
        with open(self.path(seg.container_id), "rb") as f:
            data = os.pread(f.fileno(), seg.length, seg.offset)
        if len(data) != seg.length:
            raise CorruptLogError(self.path(seg.container_id), seg_id, "short segment")
        with self._lock:
            self.counters.containers_read += 1
            self.counters.payload_bytes_read += seg.length
        return data

    # -- removal

    def delete_container(self, cid: int) -> None:
        """Delete a timestamped container; undefined ones are refused."""
        rec = self.meta.containers.get(cid)
        if rec is None:
            raise NotFoundError(f"container {cid} does not exist")
        if rec.timestamp == UNDEFINED_TS:
            raise RejectedError(f"container {cid} has no timestamp and may hold shared segments")
        self._remove(cid)

    def discard(self, cid: int) -> None:
        """Drop a container whose live segments were already rewritten elsewhere."""
        self._remove(cid)

    def _remove(self, cid: int) -> None:
        self.meta.tombstone_container(cid)
        self.path(cid).unlink(missing_ok=True)

    # -- hints

    def prefetch(self, cids) -> None:
        for cid in cids:
            try:
                fd = os.open(self.path(cid), os.O_RDONLY)
            except OSError:
                continue
            try:
                os.posix_fadvise(fd, 0, 0, os.POSIX_FADV_WILLNEED)
            except (OSError, AttributeError):
                pass
            finally:
                os.close(fd)

    def stored_payload(self) -> int:
        return sum(rec.payload_len for rec in self.meta.containers.values())


class Prefetcher:
    """Background thread issuing readahead hints for queued containers."""

    def __init__(self, store: ContainerStore):
        self.store = store
        self._queue: queue.Queue = queue.Queue()
        self._thread = threading.Thread(target=self._run, daemon=True)
        self._thread.start()

    def _run(self):
        while True:
            batch = self._queue.get()
            if batch is None:
                return
            self.store.prefetch(batch)

    def hint(self, cids) -> None:
        self._queue.put(list(cids))

    def close(self) -> None:
        self._queue.put(None)
        self._thread.join()
