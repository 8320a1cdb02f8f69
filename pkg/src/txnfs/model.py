"""Shared value types and pure block helpers.

Everything here is immutable or side-effect free, so the backend, the client
and the harness can share it freely across threads.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, List, NamedTuple, Optional, Sequence, Tuple

DEFAULT_BLOCK_SIZE = 1024
GENESIS_TS = 0
ROOT_ID = 1


class VersioningMode(enum.Enum):
    FILE_VERSIONED = "file"
    BLOCK_VERSIONED = "block"
    BLOCK_MULTIVERSIONED = "block-mv"

    @property
    def multiversioned(self) -> bool:
        return self is VersioningMode.BLOCK_MULTIVERSIONED


class CachePolicy(enum.Enum):
    UPDATE_ALL = "update-all"
    INVALIDATE_ONLY = "invalidate-only"
    FREQUENCY = "frequency"
    STALE = "stale"


class FileKind(enum.Enum):
    REGULAR = "regular"
    DIRECTORY = "directory"


class AssertKind(enum.Enum):
    AT_LEAST = "at_least"
    AT_MOST = "at_most"
    EXACTLY = "exactly"


class BlockRef(NamedTuple):
    file_id: int
    block_no: int


@dataclass(frozen=True)
class WriteRecord:
    block: BlockRef
    offset: int
    data: bytes

    def __post_init__(self):
        if not self.data:
            raise ValueError("write record must carry at least one byte")
        if self.offset < 0:
            raise ValueError("negative in-block offset")

    @property
    def end(self) -> int:
        return self.offset + len(self.data)


@dataclass(frozen=True)
class LengthAssertion:
    file_id: int
    kind: AssertKind
    length: int

    def __post_init__(self):
        if self.length < 0:
            raise ValueError("asserted length must be >= 0")

    def holds(self, actual: int) -> bool:
        if self.kind is AssertKind.AT_LEAST:
            return actual >= self.length
        if self.kind is AssertKind.AT_MOST:
            return actual <= self.length
        return actual == self.length


@dataclass(frozen=True)
class FileMeta:
    file_id: int
    length: int = 0
    mode: int = 0o644
    kind: FileKind = FileKind.REGULAR
    meta_version: int = GENESIS_TS

    @property
    def is_dir(self) -> bool:
        return self.kind is FileKind.DIRECTORY


def block_span(offset: int, length: int, block_size: int) -> List[Tuple[int, int, int]]:
    """Split the byte range ``[offset, offset + length)`` into per-block pieces.

    Returns ``(block_no, in_block_offset, span_len)`` triples in ascending
    block order.
    """
    if block_size < 1:
        raise ValueError("block_size must be >= 1")
    spans = []
    pos, end = offset, offset + length
    while pos < end:
        block_no, in_off = divmod(pos, block_size)
        n = min(block_size - in_off, end - pos)
        spans.append((block_no, in_off, n))
        pos += n
    return spans


def overlay_interval(intervals: List[Tuple[int, bytes]], offset: int, data: bytes) -> List[Tuple[int, bytes]]:
    """Lay ``data`` at ``offset`` over a sorted list of disjoint ``(start, bytes)``
    intervals, merging anything it overlaps or touches. The new bytes win."""
    end = offset + len(data)
    before, merged, after = [], [], []
    for iv in intervals:
        s, b = iv
        e = s + len(b)
        if e < offset:
            before.append(iv)
        elif s > end:
            after.append(iv)
        else:
            merged.append(iv)
    if not merged:
        return before + [(offset, bytes(data))] + after
    lo = min(offset, merged[0][0])
    hi = max(end, max(s + len(b) for s, b in merged))
    buf = bytearray(hi - lo)
    for s, b in merged:
        buf[s - lo:s - lo + len(b)] = b
    buf[offset - lo:end - lo] = data
    return before + [(lo, bytes(buf))] + after


def coalesce_writes(writes: Iterable[WriteRecord]) -> List[WriteRecord]:
    """Normalize a write list: later writes win, touching ranges merge, output
    sorted by ``(block_no, offset)``."""
    per_block: dict = {}
    for w in writes:
        per_block[w.block] = overlay_interval(per_block.get(w.block, []), w.offset, w.data)
    out = []
    for ref in sorted(per_block):
        out.extend(WriteRecord(ref, s, b) for s, b in per_block[ref])
    return out


def merge_read_view(base: bytes, own_writes: Sequence[WriteRecord]) -> bytes:
    buf = bytearray(base)
    for w in own_writes:
        buf[w.offset:w.end] = w.data
    return bytes(buf)


def normalize_assertions(assertions: Iterable[LengthAssertion]) -> List[LengthAssertion]:
    """Collapse per-file assertions to the tightest equivalent set.

    All assertions of one transaction describe the same committed length, so
    they combine into a lower bound, an upper bound, or one exact value.
    """
    bounds: dict = {}
    for a in assertions:
        lo, hi = bounds.get(a.file_id, (0, None))
        if a.kind in (AssertKind.AT_LEAST, AssertKind.EXACTLY):
            lo = max(lo, a.length)
        if a.kind in (AssertKind.AT_MOST, AssertKind.EXACTLY):
            hi = a.length if hi is None else min(hi, a.length)
        bounds[a.file_id] = (lo, hi)
    out = []
    for fid in sorted(bounds):
        lo, hi = bounds[fid]
        if hi is not None and lo == hi:
            out.append(LengthAssertion(fid, AssertKind.EXACTLY, lo))
            continue
        if lo > 0:
            out.append(LengthAssertion(fid, AssertKind.AT_LEAST, lo))
        if hi is not None:
            out.append(LengthAssertion(fid, AssertKind.AT_MOST, hi))
    return out


# -- namespace and commit payloads ------------------------------------------


@dataclass(frozen=True)
class MetaRead:
    """A namespace observation: ``path`` resolved to ``file_id`` (None if absent).

    ``listing`` marks a directory-content read, which additionally conflicts
    with any change to the directory's entries.
    """
    path: str
    file_id: Optional[int]
    ts: int
    listing: bool = False


@dataclass(frozen=True)
class Create:
    path: str
    tmp_id: int
    mode: int = 0o644


@dataclass(frozen=True)
class Mkdir:
    path: str
    tmp_id: int
    mode: int = 0o755


@dataclass(frozen=True)
class Unlink:
    path: str


@dataclass(frozen=True)
class Rename:
    old: str
    new: str


@dataclass(frozen=True)
class SetLength:
    file_id: int
    length: int
    grow_only: bool = False


MetaOp = (Create, Mkdir, Unlink, Rename, SetLength)


@dataclass
class CommitRequest:
    txn_read_ts: int
    read_set: List[Tuple[BlockRef, int]] = field(default_factory=list)
    write_set: List[WriteRecord] = field(default_factory=list)
    meta_reads: List[MetaRead] = field(default_factory=list)
    meta_ops: list = field(default_factory=list)
    assertions: List[LengthAssertion] = field(default_factory=list)
    tag: Optional[str] = None

    @property
    def read_only(self) -> bool:
        return not self.write_set and not self.meta_ops


class AbortKind(enum.Enum):
    STALE_READ = "StaleRead"
    LENGTH_VIOLATION = "LengthViolation"
    NAMESPACE_CONFLICT = "NamespaceConflict"
    SNAPSHOT_TOO_OLD = "SnapshotTooOld"


@dataclass(frozen=True)
class CommitResult:
    committed: bool
    commit_ts: Optional[int] = None
    reason: Optional[AbortKind] = None
    detail: object = None
    created: dict = field(default_factory=dict)

    @classmethod
    def ok(cls, ts: int, created: Optional[dict] = None) -> "CommitResult":
        return cls(True, ts, created=dict(created or {}))

    @classmethod
    def abort(cls, reason: AbortKind, detail=None) -> "CommitResult":
        return cls(False, None, reason, detail)


# -- cache feed items -------------------------------------------------------


@dataclass(frozen=True)
class BlockData:
    block: BlockRef
    data: bytes
    write_ts: int


@dataclass(frozen=True)
class BlockInvalidate:
    block: BlockRef
    write_ts: int = 0


@dataclass(frozen=True)
class FileInvalidate:
    file_id: int


@dataclass(frozen=True)
class MetaUpdate:
    meta: FileMeta


@dataclass(frozen=True)
class NameInvalidate:
    path: str


@dataclass(frozen=True)
class CacheUpdateBatch:
    upto_ts: int
    items: tuple = ()


# -- paths ------------------------------------------------------------------


def split_path(path: str) -> List[str]:
    if not path.startswith("/"):
        raise ValueError(f"path must be absolute: {path!r}")
    parts = [p for p in path.split("/") if p]
    for p in parts:
        if p in (".", ".."):
            raise ValueError(f"relative components are not supported: {path!r}")
    return parts


def norm_path(path: str) -> str:
    return "/" + "/".join(split_path(path))


def parent_and_name(path: str) -> Tuple[str, str]:
    parts = split_path(path)
    if not parts:
        raise ValueError("the root has no parent")
    return "/" + "/".join(parts[:-1]), parts[-1]


def join_path(parent: str, name: str) -> str:
    return parent.rstrip("/") + "/" + name
