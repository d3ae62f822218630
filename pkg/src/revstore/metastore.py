"""Persistent metadata: fixed-entry logs, recipes, series windows, dedup index.

Every log is a flat file of fixed-size little-endian entries, each ending in
a CRC32 of the preceding bytes, so entry ``i`` lives at ``i * size``.
Entries are read on demand and cached; modified entries are written back in
place on :meth:`MetaStore.flush`.  See ``docs/format.md`` for the layouts.
"""

from __future__ import annotations

import enum
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple

from .errors import CorruptLogError, NotFoundError, RejectedError

NO_CONTAINER = 0xFFFFFFFF
UNLIMITED = 0xFFFFFFFF


class FixedLog:
    """Append-mostly file of fixed-size records with per-entry CRC32."""

    def __init__(self, path: Path, fmt: str):
        self.path = Path(path)
        self.body = struct.Struct(fmt)
        self.size = self.body.size + 4
        self.path.touch(exist_ok=True)
        self._f = open(self.path, "r+b")
        length = os.fstat(self._f.fileno()).st_size
        if length % self.size:
            raise CorruptLogError(self.path, length // self.size, "truncated entry")
        self._count = length // self.size

    def __len__(self) -> int:
        return self._count

    def _pack(self, values) -> bytes:
        body = self.body.pack(*values)
        return body + struct.pack("<I", zlib.crc32(body))

    def _unpack(self, raw: bytes, index: int) -> tuple:
        body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
        if zlib.crc32(body) != crc:
            raise CorruptLogError(self.path, index)
        return self.body.unpack(body)

    def read(self, index: int) -> tuple:
        if not 0 <= index < self._count:
            raise NotFoundError(f"{self.path.name}: no entry {index}")
        raw = os.pread(self._f.fileno(), self.size, index * self.size)
        return self._unpack(raw, index)

    def read_many(self, start: int, count: int) -> list[tuple]:
        if count == 0:
            return []
        if start < 0 or start + count > self._count:
            raise NotFoundError(f"{self.path.name}: no entries {start}..{start + count}")
        raw = os.pread(self._f.fileno(), self.size * count, start * self.size)
        return [self._unpack(raw[i * self.size:(i + 1) * self.size], start + i)
                for i in range(count)]

    def write(self, index: int, values) -> None:
        if not 0 <= index < self._count:
            raise NotFoundError(f"{self.path.name}: no entry {index}")
        os.pwrite(self._f.fileno(), self._pack(values), index * self.size)

    def append(self, values) -> int:
        return self.extend([values])

    def extend(self, rows) -> int:
        """Append rows; return the index of the first one."""
        first = self._count
        data = b"".join(self._pack(v) for v in rows)
        os.pwrite(self._f.fileno(), data, first * self.size)
        self._count += len(data) // self.size
        return first

    def scan(self) -> Iterator[tuple]:
        self._f.seek(0)
        batch = 4096
        for start in range(0, self._count, batch):
            yield from self.read_many(start, min(batch, self._count - start))

    def sync(self) -> None:
        self._f.flush()
        os.fsync(self._f.fileno())

    def close(self) -> None:
        self._f.close()


# ---------------------------------------------------------------- segments

SEG_MAGIC = 0x5347  # "GS"
SEG_DELETED = 1


@dataclass
class SegmentMeta:
    fp: bytes
    length: int
    chunk_start: int
    chunk_count: int
    ref_count: int = 1
    container_id: int = NO_CONTAINER
    offset: int = 0
    last_ref_ts: int = 0
    flags: int = 0
    seg_id: int = -1

    @property
    def deleted(self) -> bool:
        return bool(self.flags & SEG_DELETED)

    @property
    def shared(self) -> bool:
        return self.ref_count > 0

    def to_row(self):
        return (self.fp, self.ref_count, self.container_id, self.offset, self.length,
                self.chunk_start, self.chunk_count, self.last_ref_ts, self.flags, SEG_MAGIC)

    @classmethod
    def from_row(cls, seg_id, row) -> "SegmentMeta":
        fp, ref, cid, off, length, cstart, ccount, ts, flags, magic = row
        if magic != SEG_MAGIC:
            raise CorruptLogError("segments.log", seg_id, "bad magic")
        return cls(fp=fp, length=length, chunk_start=cstart, chunk_count=ccount,
                   ref_count=ref, container_id=cid, offset=off, last_ref_ts=ts,
                   flags=flags, seg_id=seg_id)


CHUNK_NULL = 1
CHUNK_REMOVED = 2
REMOVED_OFFSET = 0xFFFFFFFF


@dataclass
class ChunkMeta:
    fp: bytes
    length: int
    offset: int  # within the stored (possibly compacted) segment
    direct_refs: int = 0
    flags: int = 0

    @property
    def is_null(self) -> bool:
        return bool(self.flags & CHUNK_NULL)

    @property
    def removed(self) -> bool:
        return bool(self.flags & CHUNK_REMOVED)

    def to_row(self):
        return (self.fp, self.length, self.offset, self.direct_refs, self.flags)


# ----------------------------------------------------------------- recipes

class EntryKind(enum.IntEnum):
    DIRECT = 1
    INDIRECT = 2
    NULL = 3


class RecipeEntry(NamedTuple):
    """One chunk reference.

    DIRECT: ``ref`` is a seg_id and ``chunk`` the chunk index in it.
    INDIRECT: ``ref`` is an entry index in the next version's recipe.
    NULL: only ``length`` is meaningful.
    """

    kind: EntryKind
    length: int
    ref: int = 0
    chunk: int = 0

    @classmethod
    def direct(cls, seg_id, chunk, length):
        return cls(EntryKind.DIRECT, length, seg_id, chunk)

    @classmethod
    def indirect(cls, target, length):
        return cls(EntryKind.INDIRECT, length, target, 0)

    @classmethod
    def null(cls, length):
        return cls(EntryKind.NULL, length, 0, 0)


@dataclass
class Recipe:
    series_id: int
    version: int
    created_at: int
    original_size: int
    entries: list[RecipeEntry]
    null_bytes: int = 0


RECIPE_MAGIC = b"RSRECIPE"
RECIPE_HEADER = struct.Struct("<8sIIQQQQ12x")
RECIPE_ENTRY = struct.Struct("<B3xIQI8x")
RECIPE_HEADER_SIZE = RECIPE_HEADER.size + 4
RECIPE_ENTRY_SIZE = RECIPE_ENTRY.size + 4


def _with_crc(body: bytes) -> bytes:
    return body + struct.pack("<I", zlib.crc32(body))


def _pack_entry(e: RecipeEntry) -> bytes:
    return _with_crc(RECIPE_ENTRY.pack(e.kind, e.length, e.ref, e.chunk))


# ------------------------------------------------------------------ series

class Window(enum.IntEnum):
    LIVE = 0
    ARCHIVAL = 1
    EXPIRED = 2
    DELETED = 3


@dataclass
class VersionInfo:
    version: int
    created_at: int
    window: Window = Window.LIVE
    revdeduped: bool = False


@dataclass
class SeriesState:
    series_id: int
    live_len: int = 1
    archival_len: int | None = None  # None: unlimited
    conv: bool = False
    versions: list[VersionInfo] = field(default_factory=list)

    def __post_init__(self):
        if self.live_len < 1:
            raise ValueError("live window must hold at least one backup")
        if self.archival_len is not None and self.archival_len < 0:
            raise ValueError("archival window length must be non-negative")

    @property
    def retention_len(self) -> int | None:
        return None if self.archival_len is None else self.live_len + self.archival_len

    def info(self, version: int) -> VersionInfo:
        for v in self.versions:
            if v.version == version:
                return v
        raise NotFoundError(f"series {self.series_id} has no version {version}")

    def retained(self) -> list[VersionInfo]:
        return [v for v in self.versions if v.window is not Window.DELETED]

    @property
    def latest(self) -> int | None:
        return self.versions[-1].version if self.versions else None

    def next_version(self) -> int:
        return 0 if not self.versions else self.versions[-1].version + 1

    def reclassify(self) -> tuple[list[int], list[int]]:
        entered, expired = [], []
        kept = self.retained()
        for age, info in enumerate(reversed(kept)):
            if age < self.live_len:
                new = Window.LIVE
            elif self.archival_len is None or age < self.live_len + self.archival_len:
                new = Window.ARCHIVAL
            else:
                new = Window.EXPIRED
            if new != info.window:
                if new is Window.ARCHIVAL:
                    entered.append(info.version)
                elif new is Window.EXPIRED:
                    expired.append(info.version)
                info.window = new
        return sorted(entered), sorted(expired)


STATE_MAGIC = b"RSSTATE1"
STATE_HEADER = struct.Struct("<8sIIII")
STATE_ENTRY = struct.Struct("<IBB2xQ")


def encode_state(state: SeriesState) -> bytes:
    archival = UNLIMITED if state.archival_len is None else state.archival_len
    flags = 1 if state.conv else 0
    parts = [STATE_HEADER.pack(STATE_MAGIC, state.series_id, state.live_len, archival,
                               flags | (len(state.versions) << 1))]
    for v in state.versions:
        parts.append(STATE_ENTRY.pack(v.version, v.window, v.revdeduped, v.created_at))
    return _with_crc(b"".join(parts))


def decode_state(raw: bytes, path) -> SeriesState:
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptLogError(path, 0)
    magic, sid, live, archival, packed = STATE_HEADER.unpack_from(body)
    if magic != STATE_MAGIC:
        raise CorruptLogError(path, 0, "bad magic")
    state = SeriesState(sid, live, None if archival == UNLIMITED else archival,
                        bool(packed & 1))
    off = STATE_HEADER.size
    for _ in range(packed >> 1):
        ver, win, rd, ts = STATE_ENTRY.unpack_from(body, off)
        state.versions.append(VersionInfo(ver, ts, Window(win), bool(rd)))
        off += STATE_ENTRY.size
    return state


# -------------------------------------------------------------- containers

CTR_MAGIC = b"RSCT"
CTR_CREATE = 1
CTR_TOMBSTONE = 2
UNDEFINED_TS = 2 ** 64 - 1


class ContainerRecord(NamedTuple):
    container_id: int
    timestamp: int
    segment_count: int
    payload_len: int


# ------------------------------------------------------------------- store

class MetaStore:
    """All metadata of one store directory."""

    def __init__(self, root, durable: bool = False):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / "series").mkdir(exist_ok=True)
        self.durable = durable
        self.segment_log = FixedLog(self.root / "segments.log", "<20sIIIIQIQHH")
        self.chunk_log = FixedLog(self.root / "chunks.log", "<20sIIII")
        self.container_log = FixedLog(self.root / "containers.log", "<4sIQQII")
        self._segments: dict[int, SegmentMeta] = {}
        self._chunks: dict[int, ChunkMeta] = {}
        self._dirty_segments: set[int] = set()
        self._dirty_chunks: set[int] = set()
        self._recipes: dict[tuple[int, int], Recipe] = {}
        self._states: dict[int, SeriesState] = {}
        self.containers: dict[int, ContainerRecord] = {}
        self.index: dict[bytes, int] = {}
        self._load_containers()
        self.load_index()

    # -- segments and chunks

    def load_index(self) -> dict[bytes, int]:
        """Rebuild the fingerprint index from the segment log."""
        self.index = {}
        for seg_id, row in enumerate(self.segment_log.scan()):
            meta = SegmentMeta.from_row(seg_id, row)
            if meta.ref_count > 0 and not meta.deleted:
                self.index[meta.fp] = seg_id
        return self.index

    def lookup(self, fp: bytes) -> int | None:
        return self.index.get(fp)

    @property
    def segment_count(self) -> int:
        return len(self.segment_log)

    def segment(self, seg_id: int) -> SegmentMeta:
        meta = self._segments.get(seg_id)
        if meta is None:
            meta = SegmentMeta.from_row(seg_id, self.segment_log.read(seg_id))
            self._segments[seg_id] = meta
        return meta

    def segments(self) -> Iterator[SegmentMeta]:
        for seg_id in range(self.segment_count):
            yield self.segment(seg_id)

    def touch_segment(self, meta: SegmentMeta) -> None:
        self._segments[meta.seg_id] = meta
        self._dirty_segments.add(meta.seg_id)
        if meta.ref_count > 0 and not meta.deleted:
            self.index[meta.fp] = meta.seg_id
        elif self.index.get(meta.fp) == meta.seg_id:
            del self.index[meta.fp]

    def append_segment_meta(self, meta: SegmentMeta, chunks: list[ChunkMeta]) -> int:
        if meta.fp in self.index:
            raise RejectedError(f"segment {meta.fp.hex()} is already indexed")
        meta.chunk_start = self.chunk_log.extend([c.to_row() for c in chunks])
        meta.chunk_count = len(chunks)
        for i, c in enumerate(chunks):
            self._chunks[meta.chunk_start + i] = c
        meta.seg_id = self.segment_log.append(meta.to_row())
        self._segments[meta.seg_id] = meta
        if meta.ref_count > 0:
            self.index[meta.fp] = meta.seg_id
        return meta.seg_id

    def chunk(self, seg: SegmentMeta, k: int) -> ChunkMeta:
        if not 0 <= k < seg.chunk_count:
            raise NotFoundError(f"segment {seg.seg_id} has no chunk {k}")
        idx = seg.chunk_start + k
        c = self._chunks.get(idx)
        if c is None:
            c = ChunkMeta(*self.chunk_log.read(idx))
            self._chunks[idx] = c
        return c

    def chunks(self, seg: SegmentMeta) -> list[ChunkMeta]:
        missing = [i for i in range(seg.chunk_start, seg.chunk_start + seg.chunk_count)
                   if i not in self._chunks]
        if missing:
            rows = self.chunk_log.read_many(seg.chunk_start, seg.chunk_count)
            for i, row in enumerate(rows):
                self._chunks.setdefault(seg.chunk_start + i, ChunkMeta(*row))
        return [self._chunks[i] for i in range(seg.chunk_start, seg.chunk_start + seg.chunk_count)]

    def touch_chunk(self, seg: SegmentMeta, k: int) -> None:
        self._dirty_chunks.add(seg.chunk_start + k)

    # -- containers

    def _load_containers(self) -> None:
        for i, (magic, kind, cid, ts, nseg, plen) in enumerate(self.container_log.scan()):
            if magic != CTR_MAGIC:
                raise CorruptLogError(self.container_log.path, i, "bad magic")
            if kind == CTR_CREATE:
                self.containers[cid] = ContainerRecord(cid, ts, nseg, plen)
            elif kind == CTR_TOMBSTONE:
                self.containers.pop(cid, None)
        self._next_container = 1 + max(
            (row[2] for row in self.container_log.scan()), default=-1)

    def new_container_id(self) -> int:
        cid = self._next_container
        self._next_container += 1
        return cid

    def record_container(self, rec: ContainerRecord) -> None:
        self.container_log.append((CTR_MAGIC, CTR_CREATE, rec.container_id, rec.timestamp,
                                   rec.segment_count, rec.payload_len))
        self.containers[rec.container_id] = rec

    def tombstone_container(self, cid: int) -> None:
        rec = self.containers.pop(cid)
        self.container_log.append((CTR_MAGIC, CTR_TOMBSTONE, cid, rec.timestamp, 0, 0))

    # -- recipes

    def _series_dir(self, series_id: int) -> Path:
        return self.root / "series" / str(series_id)

    def _recipe_path(self, series_id: int, version: int) -> Path:
        return self._series_dir(series_id) / f"recipe.{version}"

    def write_recipe(self, recipe: Recipe) -> None:
        state = self.series_state(recipe.series_id)
        expected = state.next_version()
        if recipe.version != expected:
            raise RejectedError(
                f"series {recipe.series_id}: expected version {expected}, got {recipe.version}")
        if sum(e.length for e in recipe.entries) != recipe.original_size:
            raise RejectedError("recipe entry lengths do not sum to the original size")
        header = _with_crc(RECIPE_HEADER.pack(
            RECIPE_MAGIC, recipe.series_id, recipe.version, recipe.created_at,
            recipe.original_size, recipe.null_bytes, len(recipe.entries)))
        body = b"".join(_pack_entry(e) for e in recipe.entries)
        path = self._recipe_path(recipe.series_id, recipe.version)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp")
        with open(tmp, "wb") as f:
            f.write(header)
            f.write(body)
            if self.durable:
                f.flush()
                os.fsync(f.fileno())
        os.replace(tmp, path)
        self._recipes[(recipe.series_id, recipe.version)] = recipe

    def read_recipe(self, series_id: int, version: int) -> Recipe:
        key = (series_id, version)
        if key in self._recipes:
            return self._recipes[key]
        path = self._recipe_path(series_id, version)
        try:
            raw = path.read_bytes()
        except FileNotFoundError:
            raise NotFoundError(f"no recipe for series {series_id} version {version}") from None
        hdr = raw[:RECIPE_HEADER_SIZE]
        if zlib.crc32(hdr[:-4]) != struct.unpack("<I", hdr[-4:])[0]:
            raise CorruptLogError(path, -1, "bad header checksum")
        magic, sid, ver, ts, size, nulls, count = RECIPE_HEADER.unpack(hdr[:-4])
        if magic != RECIPE_MAGIC:
            raise CorruptLogError(path, -1, "bad magic")
        entries = []
        pos = RECIPE_HEADER_SIZE
        for i in range(count):
            raw_e = raw[pos:pos + RECIPE_ENTRY_SIZE]
            if len(raw_e) != RECIPE_ENTRY_SIZE or zlib.crc32(raw_e[:-4]) != struct.unpack("<I", raw_e[-4:])[0]:
                raise CorruptLogError(path, i)
            kind, length, ref, chunk = RECIPE_ENTRY.unpack(raw_e[:-4])
            entries.append(RecipeEntry(EntryKind(kind), length, ref, chunk))
            pos += RECIPE_ENTRY_SIZE
        recipe = Recipe(sid, ver, ts, size, entries, nulls)
        self._recipes[key] = recipe
        return recipe

    def read_entry(self, series_id: int, version: int, index: int) -> RecipeEntry:
        """Read one entry with a single positioned read."""
        key = (series_id, version)
        if key in self._recipes:
            return self._recipes[key].entries[index]
        path = self._recipe_path(series_id, version)
        with open(path, "rb") as f:
            raw = os.pread(f.fileno(), RECIPE_ENTRY_SIZE,
                           RECIPE_HEADER_SIZE + index * RECIPE_ENTRY_SIZE)
        if len(raw) != RECIPE_ENTRY_SIZE:
            raise NotFoundError(f"recipe {series_id}/{version} has no entry {index}")
        if zlib.crc32(raw[:-4]) != struct.unpack("<I", raw[-4:])[0]:
            raise CorruptLogError(path, index)
        kind, length, ref, chunk = RECIPE_ENTRY.unpack(raw[:-4])
        return RecipeEntry(EntryKind(kind), length, ref, chunk)

    def mutate_entry(self, series_id: int, version: int, index: int, new: RecipeEntry) -> None:
        recipe = self.read_recipe(series_id, version)
        old = recipe.entries[index]
        if old.kind is not EntryKind.DIRECT:
            raise RejectedError(f"entry {index} is {old.kind.name}, only DIRECT may change")
        if new.kind is EntryKind.DIRECT or new.length != old.length:
            raise RejectedError("an entry may only become INDIRECT or NULL of equal length")
        recipe.entries[index] = new
        path = self._recipe_path(series_id, version)
        with open(path, "r+b") as f:
            os.pwrite(f.fileno(), _pack_entry(new), RECIPE_HEADER_SIZE + index * RECIPE_ENTRY_SIZE)

    def delete_recipe(self, series_id: int, version: int) -> None:
        self._recipes.pop((series_id, version), None)
        self._recipe_path(series_id, version).unlink(missing_ok=True)

    def drop_recipe_cache(self) -> None:
        self._recipes.clear()

    # -- series state

    def series_ids(self) -> list[int]:
        ids = set(self._states)
        for p in (self.root / "series").iterdir():
            if p.is_dir() and p.name.isdigit():
                ids.add(int(p.name))
        return sorted(ids)

    def create_series(self, series_id: int, live_len: int = 1,
                      archival_len: int | None = None, conv: bool = False) -> SeriesState:
        if (self._series_dir(series_id) / "state").exists() or series_id in self._states:
            raise RejectedError(f"series {series_id} already exists")
        state = SeriesState(series_id, live_len, archival_len, conv)
        self._states[series_id] = state
        self.save_state(state)
        return state

    def series_state(self, series_id: int) -> SeriesState:
        state = self._states.get(series_id)
        if state is None:
            path = self._series_dir(series_id) / "state"
            try:
                state = decode_state(path.read_bytes(), path)
            except FileNotFoundError:
                raise NotFoundError(f"no series {series_id}") from None
            self._states[series_id] = state
        return state

    def save_state(self, state: SeriesState) -> None:
        d = self._series_dir(state.series_id)
        d.mkdir(parents=True, exist_ok=True)
        tmp = d / "state.tmp"
        tmp.write_bytes(encode_state(state))
        os.replace(tmp, d / "state")

    def advance_window(self, series_id: int, new_version: int,
                       created_at: int) -> tuple[list[int], list[int]]:
        """Slide the series' windows over ``new_version``.

        Returns (versions entering the archival window, versions expiring).
        """
        state = self.series_state(series_id)
        if state.versions and state.versions[-1].version >= new_version:
            raise RejectedError(f"version {new_version} is not newer than the latest")
        state.versions.append(VersionInfo(new_version, created_at))
        moved = state.reclassify()
        self.save_state(state)
        return moved

    # -- persistence

    def flush(self) -> None:
        for seg_id in sorted(self._dirty_segments):
            self.segment_log.write(seg_id, self._segments[seg_id].to_row())
        for idx in sorted(self._dirty_chunks):
            self.chunk_log.write(idx, self._chunks[idx].to_row())
        self._dirty_segments.clear()
        self._dirty_chunks.clear()
        if self.durable:
            for log in (self.segment_log, self.chunk_log, self.container_log):
                log.sync()

    def close(self) -> None:
        self.flush()
        for log in (self.segment_log, self.chunk_log, self.container_log):
            log.close()
