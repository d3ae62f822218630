"""Deduplicating backup storage with inline segment dedup and reverse chunk dedup."""

from .chunker import (ChunkDescriptor, ChunkingMode, ChunkingParams, SegmentDescriptor,
                      chunk_bytes, chunk_stream, fingerprint, is_null)
from .containers import IoCounters
from .errors import CorruptLogError, IntegrityError, NotFoundError, RejectedError, StoreError
from .metastore import EntryKind, Recipe, RecipeEntry, Window
from .store import Store

__all__ = [
    "ChunkDescriptor", "ChunkingMode", "ChunkingParams", "SegmentDescriptor",
    "chunk_bytes", "chunk_stream", "fingerprint", "is_null", "IoCounters",
    "CorruptLogError", "IntegrityError", "NotFoundError", "RejectedError", "StoreError",
    "EntryKind", "Recipe", "RecipeEntry", "Window", "Store",
]
