"""Single-pass chunk and segment boundary detection.

Chunk boundaries come from a Rabin rolling hash over a sliding window; a
position is a chunk cut when the lowest ``chunk_bits`` bits of the hash are
all ones and the chunk has reached its minimum size.  A chunk cut is
additionally a segment cut when the lowest ``segment_bits`` bits are all
ones and the segment has reached its minimum size.  Sizes are bounded to
[avg/2, 2*avg] for both units.

Forced cuts: a chunk reaching its maximum size is cut unconditionally and
is never a segment cut by itself.  A segment is cut at the first chunk cut
where one more maximum-size chunk could push it past its maximum size, so
segment cuts always coincide with chunk cuts and chunk cuts never depend
on the segment settings.
"""

from __future__ import annotations

import enum
import hashlib
import io
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import BinaryIO, Iterable

import numpy as np

from . import _rabin

FINGERPRINT_SIZE = 20
NULL_FP = hashlib.sha1(b"").digest()


class ChunkingMode(str, enum.Enum):
    CONTENT_DEFINED = "content-defined"
    FIXED_SIZE = "fixed-size"


@dataclass(frozen=True)
class ChunkingParams:
    chunk_bits: int = 12
    segment_bits: int = 22
    window_size: int = 48
    mode: ChunkingMode = ChunkingMode.CONTENT_DEFINED
    fixed_chunk_size: int = 4096
    fixed_chunks_per_segment: int = 1024

    def __post_init__(self):
        if self.segment_bits <= self.chunk_bits:
            raise ValueError("segment_bits must exceed chunk_bits")
        if self.chunk_bits < 2:
            raise ValueError("chunk_bits must be at least 2")
        if self.window_size < 16:
            raise ValueError("window_size must be at least 16")
        if self.fixed_chunk_size <= 0 or self.fixed_chunks_per_segment <= 0:
            raise ValueError("fixed-size parameters must be positive")
        object.__setattr__(self, "mode", ChunkingMode(self.mode))

    @property
    def avg_chunk(self) -> int:
        return 1 << self.chunk_bits

    @property
    def min_chunk(self) -> int:
        return 1 << (self.chunk_bits - 1)

    @property
    def max_chunk(self) -> int:
        return 1 << (self.chunk_bits + 1)

    @property
    def avg_segment(self) -> int:
        return 1 << self.segment_bits

    @property
    def min_segment(self) -> int:
        return 1 << (self.segment_bits - 1)

    @property
    def max_segment(self) -> int:
        return 1 << (self.segment_bits + 1)


@dataclass(frozen=True)
class ChunkDescriptor:
    offset: int
    length: int
    fp: bytes
    is_null: bool


@dataclass(frozen=True)
class SegmentDescriptor:
    offset: int
    length: int
    fp: bytes
    chunks: tuple[ChunkDescriptor, ...] = field(repr=False)

    @property
    def is_null(self) -> bool:
        return all(c.is_null for c in self.chunks)


class ChunkingError(OSError):
    """Reading the input stream failed; ``position`` is the byte offset reached."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} at byte {position}")
        self.position = position


def fingerprint(data) -> bytes:
    return hashlib.sha1(data).digest()


def is_null(data) -> bool:
    if len(data) == 0:
        return True
    return not np.frombuffer(data, dtype=np.uint8).any()


def segment_fingerprint(chunk_fps: Iterable[bytes]) -> bytes:
    """Fingerprint of a segment: SHA-1 over its member chunk fingerprints."""
    h = hashlib.sha1()
    for fp in chunk_fps:
        h.update(fp)
    return h.digest()


class RollingHash:
    """Incremental Rabin fingerprint of the last ``window_size`` bytes."""

    def __init__(self, window_size: int = 48):
        self.window_size = window_size
        self._append = _rabin.append_table()
        self._pop = _rabin.pop_table(window_size)
        self._window = bytearray(window_size)
        self._pos = 0
        self.value = 0

    def roll(self, in_byte: int) -> int:
        slot = self._pos % self.window_size
        out_byte = self._window[slot]
        self._window[slot] = in_byte
        self._pos += 1
        self.value = int(_rabin.roll(np.uint64(self.value), in_byte, out_byte,
                                     self._append, self._pop))
        return self.value

    def update(self, data: bytes) -> int:
        for b in data:
            self.roll(b)
        return self.value


def rolling_hashes(data, window_size: int = 48) -> np.ndarray:
    """Window hash ending at each offset; bytes before offset 0 count as zero."""
    buf = np.frombuffer(bytes(data), dtype=np.uint8)
    return _rabin.rolling_hashes(buf, window_size, _rabin.append_table(),
                                 _rabin.pop_table(window_size))


class _Scanner:
    def __init__(self, params: ChunkingParams):
        self.params = params
        self.append_t = _rabin.append_table()
        self.pop_t = _rabin.pop_table(params.window_size)
        self.state = np.zeros(4, dtype=np.int64)
        self.tail = np.zeros(params.window_size, dtype=np.uint8)

    def feed(self, block: bytes) -> list[tuple[int, bool]]:
        p = self.params
        w = p.window_size
        buf = np.concatenate([self.tail, np.frombuffer(block, dtype=np.uint8)])
        self.state[3] -= w  # data[0] of buf sits w bytes before the block start
        cap = len(block) // p.min_chunk + 2
        cuts = np.empty(cap, dtype=np.int64)
        flags = np.empty(cap, dtype=np.bool_)
        n = _rabin.scan(buf, w, self.state, w, self.append_t, self.pop_t,
                        p.min_chunk, p.max_chunk, np.uint64(p.avg_chunk - 1),
                        p.min_segment, p.max_segment, np.uint64(p.avg_segment - 1),
                        cuts, flags)
        self.state[3] += len(buf)
        self.tail = buf[-w:].copy()
        return list(zip(cuts[:n].tolist(), flags[:n].tolist()))


def find_boundaries(data, params: ChunkingParams) -> list[tuple[int, bool]]:
    """Cut offsets with a segment flag; the final offset is len(data)."""
    n = len(data)
    if n == 0:
        return []
    if params.mode is ChunkingMode.FIXED_SIZE:
        size = params.fixed_chunk_size
        per = params.fixed_chunks_per_segment
        offsets = list(range(size, n, size)) + [n]
        return [(off, (i + 1) % per == 0 or off == n) for i, off in enumerate(offsets)]
    cuts = _Scanner(params).feed(bytes(data) if not isinstance(data, bytes) else data)
    if not cuts or cuts[-1][0] != n:
        cuts.append((n, True))
    else:
        cuts[-1] = (n, True)
    return cuts


def _describe(data: memoryview, base: int, cuts: list[tuple[int, bool]], start: int,
              pool: ThreadPoolExecutor | None) -> list[SegmentDescriptor]:
    """Build descriptors for ``data`` whose first byte sits at absolute ``base``."""
    spans = []
    prev = start
    for off, _ in cuts:
        spans.append((prev, off))
        prev = off

    def one(span):
        lo, hi = span
        piece = data[lo - base:hi - base]
        return ChunkDescriptor(lo, hi - lo, fingerprint(piece), is_null(piece))

    chunks = list(pool.map(one, spans)) if pool else [one(s) for s in spans]
    segments = []
    members: list[ChunkDescriptor] = []
    for chunk, (_, seg) in zip(chunks, cuts):
        members.append(chunk)
        if seg:
            seg_off = members[0].offset
            seg_len = chunk.offset + chunk.length - seg_off
            segments.append(SegmentDescriptor(
                seg_off, seg_len, segment_fingerprint(c.fp for c in members), tuple(members)))
            members = []
    return segments


def chunk_bytes(data, params: ChunkingParams | None = None, threads: int = 1
                ) -> list[SegmentDescriptor]:
    params = params or ChunkingParams()
    cuts = find_boundaries(data, params)
    if not cuts:
        return []
    view = memoryview(data).cast("B") if not isinstance(data, memoryview) else data
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return _describe(view, 0, cuts, 0, pool)
    return _describe(view, 0, cuts, 0, None)


def chunk_stream(stream: BinaryIO | bytes | bytearray | memoryview,
                 params: ChunkingParams | None = None, threads: int = 1,
                 block_size: int = 8 << 20) -> list[SegmentDescriptor]:
    """Chunk a byte string or a sequential binary stream into segments."""
    params = params or ChunkingParams()
    if isinstance(stream, (bytes, bytearray, memoryview)):
        return chunk_bytes(stream, params, threads)
    if params.mode is ChunkingMode.FIXED_SIZE:
        return chunk_bytes(_read_all(stream, block_size), params, threads)

    scanner = _Scanner(params)
    pending = bytearray()  # bytes since the last segment cut
    pending_base = 0
    pos = 0
    segments: list[SegmentDescriptor] = []
    open_cuts: list[tuple[int, bool]] = []
    pool = ThreadPoolExecutor(threads) if threads > 1 else None
    try:
        while True:
            try:
                block = stream.read(block_size)
            except OSError as exc:
                raise ChunkingError(f"read failed: {exc}", pos) from exc
            if not block:
                break
            pos += len(block)
            pending += block
            open_cuts += scanner.feed(block)
            last_seg = max((i for i, (_, s) in enumerate(open_cuts) if s), default=-1)
            if last_seg >= 0:
                done = open_cuts[:last_seg + 1]
                segments += _describe(memoryview(pending), pending_base, done,
                                      pending_base, pool)
                consumed = done[-1][0] - pending_base
                del pending[:consumed]
                pending_base = done[-1][0]
                open_cuts = open_cuts[last_seg + 1:]
        if pending:
            if not open_cuts or open_cuts[-1][0] != pos:
                open_cuts.append((pos, True))
            else:
                open_cuts[-1] = (pos, True)
            segments += _describe(memoryview(pending), pending_base, open_cuts,
                                  pending_base, pool)
    finally:
        if pool:
            pool.shutdown()
    return segments


def _read_all(stream: BinaryIO, block_size: int) -> bytes:
    out = io.BytesIO()
    while True:
        try:
            block = stream.read(block_size)
        except OSError as exc:
            raise ChunkingError(f"read failed: {exc}", out.tell()) from exc
        if not block:
            return out.getvalue()
        out.write(block)


# descriptor listing: one 48-byte record per chunk
DESCRIPTOR_RECORD = struct.Struct("<QII20s12x")
FLAG_SEGMENT_START = 1
FLAG_NULL = 2


def write_descriptors(segments: Iterable[SegmentDescriptor], out: BinaryIO) -> int:
    count = 0
    for seg in segments:
        for i, c in enumerate(seg.chunks):
            flags = (FLAG_SEGMENT_START if i == 0 else 0) | (FLAG_NULL if c.is_null else 0)
            out.write(DESCRIPTOR_RECORD.pack(c.offset, c.length, flags, c.fp))
            count += 1
    return count


def read_descriptors(src: BinaryIO) -> list[SegmentDescriptor]:
    data = src.read()
    if len(data) % DESCRIPTOR_RECORD.size:
        raise ValueError("descriptor listing is truncated")
    segments: list[SegmentDescriptor] = []
    members: list[ChunkDescriptor] = []

    def close():
        if members:
            off = members[0].offset
            end = members[-1].offset + members[-1].length
            segments.append(SegmentDescriptor(
                off, end - off, segment_fingerprint(c.fp for c in members), tuple(members)))

    for off, length, flags, fp in DESCRIPTOR_RECORD.iter_unpack(data):
        if flags & FLAG_SEGMENT_START:
            close()
            members = []
        members.append(ChunkDescriptor(off, length, fp, bool(flags & FLAG_NULL)))
    close()
    return segments
