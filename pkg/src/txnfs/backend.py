"""In-memory transactional block store.

One ``Backend`` holds every file's blocks, the namespace and the file
metadata as version chains. Each chain keeps its latest value as a single
``(value, ts)`` tuple plus an undo list of displaced versions, so readers can
serve snapshots without taking the commit lock.

Commits are validated optimistically and applied inside one critical section;
the sequencer hands out the commit timestamps.
"""
from __future__ import annotations

import base64
import bisect
import hashlib
import heapq
import json
import logging
import math
import threading
from collections import Counter, deque
from typing import Dict, List, NamedTuple, Optional, Tuple

from .errors import ProtocolError, SnapshotTooOld, not_a_directory, not_found
from .model import (
    DEFAULT_BLOCK_SIZE,
    ROOT_ID,
    AbortKind,
    BlockData,
    BlockInvalidate,
    BlockRef,
    CachePolicy,
    CacheUpdateBatch,
    CommitRequest,
    CommitResult,
    Create,
    FileInvalidate,
    FileKind,
    FileMeta,
    MetaUpdate,
    Mkdir,
    NameInvalidate,
    Rename,
    SetLength,
    Unlink,
    VersioningMode,
    block_span,
    coalesce_writes,
    join_path,
    parent_and_name,
    split_path,
)

log = logging.getLogger(__name__)

DEFAULT_UNDO_WINDOW = 1024
DEFAULT_FREQUENCY_FRACTION = 0.2
DECAY_INTERVAL = 10_000


class UndoEntry(NamedTuple):
    value: object
    ts: int
    superseded_by: int


class VersionChain:
    """Latest version of one item plus the undo entries it displaced."""

    __slots__ = ("head", "undo")

    def __init__(self, value=None, ts: int = 0):
        self.head = (value, ts)
        self.undo = deque()

    def set(self, value, ts: int) -> None:
        old_value, old_ts = self.head
        # undo entry goes in before the head moves, so a racing reader that
        # sees the new head always finds the old version
        self.undo.append(UndoEntry(old_value, old_ts, ts))
        self.head = (value, ts)

    def at(self, ts: int, multiversion: bool) -> Tuple[object, int]:
        head = self.head
        if head[1] <= ts:
            return head
        if not multiversion:
            raise SnapshotTooOld(ts)
        for entry in reversed(tuple(self.undo)):
            if entry.ts <= ts < entry.superseded_by:
                return entry.value, entry.ts
        raise SnapshotTooOld(ts)


class _LogEntry(NamedTuple):
    ts: int
    blocks: tuple
    files: tuple
    paths: tuple


def block_digests(content: bytes, block_size: int) -> List[str]:
    return [
        hashlib.sha256(content[i:i + block_size]).hexdigest()
        for i in range(0, len(content), block_size)
    ]


class _Plan:
    """Staged namespace/metadata/block changes of one commit (not yet visible)."""

    def __init__(self, next_id: int):
        self.next_id = next_id
        self.ids: Dict[int, int] = {}
        self.entries: Dict[Tuple[int, str], Optional[int]] = {}
        self.metas: Dict[int, FileMeta] = {}
        self.listings: set = set()
        self.paths: List[str] = []
        self.shrink_to: Dict[int, int] = {}

    def alloc(self, tmp_id: int) -> int:
        if tmp_id in self.ids:
            raise ProtocolError(f"temporary id {tmp_id} created twice")
        real = self.next_id
        self.next_id += 1
        self.ids[tmp_id] = real
        return real


class _Conflict(Exception):
    def __init__(self, path):
        super().__init__(path)
        self.path = path


class Backend:
    """The monolithic block, metadata and namespace service."""

    def __init__(
        self,
        mode: VersioningMode = VersioningMode.BLOCK_VERSIONED,
        block_size: int = DEFAULT_BLOCK_SIZE,
        undo_window: Optional[int] = DEFAULT_UNDO_WINDOW,
        max_file_size: Optional[int] = None,
        frequency_fraction: float = DEFAULT_FREQUENCY_FRACTION,
    ):
        if block_size < 1:
            raise ValueError("block_size must be >= 1")
        self.mode = VersioningMode(mode)
        self.block_size = block_size
        self.undo_window = undo_window
        self.max_file_size = max_file_size
        self.frequency_fraction = frequency_fraction
        self._zero = bytes(block_size)

        self._commit_lock = threading.Lock()
        self._seq_lock = threading.Lock()
        self._seq = 0
        self._current = 0
        self._next_id = ROOT_ID + 1

        self._blocks: Dict[BlockRef, VersionChain] = {}
        self._metas: Dict[int, VersionChain] = {
            ROOT_ID: VersionChain(FileMeta(ROOT_ID, 0, 0o755, FileKind.DIRECTORY, 0), 0)
        }
        self._entries: Dict[Tuple[int, str], VersionChain] = {}
        self._children: Dict[int, set] = {ROOT_ID: set()}
        self._listings: Dict[int, VersionChain] = {ROOT_ID: VersionChain(0, 0)}
        self._file_ts: Dict[int, int] = {}

        self._undo_queue = deque()
        self._log: List[_LogEntry] = []
        self._log_ts: List[int] = []
        self._log_floor = 0
        self._fetches: Counter = Counter()
        self._commits_since_decay = 0
        # test hook: accept every commit without validation
        self._skip_validation = False

    # -- sequencer ---------------------------------------------------------

    def seq_next(self) -> int:
        with self._seq_lock:
            self._seq += 1
            return self._seq

    def current_read_timestamp(self) -> int:
        return self._current

    # -- reads -------------------------------------------------------------

    def _check_ts(self, at_ts: int) -> None:
        if at_ts < 0 or at_ts > self._current:
            raise ProtocolError(f"read timestamp {at_ts} is ahead of the latest commit")

    def get_block(self, ref: BlockRef, at_ts: int, if_write_ts: Optional[int] = None):
        """Return ``(data, write_ts)`` of ``ref`` as of ``at_ts``.

        With ``if_write_ts`` set, ``data`` is None when the version visible at
        ``at_ts`` is the one the caller already holds.
        """
        self._check_ts(at_ts)
        ref = BlockRef(*ref)
        self._fetches[ref] += 1
        chain = self._blocks.get(ref)
        if chain is None:
            data, ts = self._zero, 0
        else:
            data, ts = chain.at(at_ts, self.mode.multiversioned)
        if if_write_ts is not None and ts == if_write_ts:
            return None, ts
        return data, ts

    def _kind_of(self, file_id: int) -> Optional[FileKind]:
        chain = self._metas.get(file_id)
        if chain is None:
            return None
        meta = chain.head[0]
        return meta.kind if meta is not None else None

    def _resolve(self, path: str, at_ts: Optional[int], mv: bool) -> Optional[int]:
        """Walk ``path`` at ``at_ts`` (None = latest)."""
        fid = ROOT_ID
        for name in split_path(path):
            if self._kind_of(fid) is not FileKind.DIRECTORY:
                raise not_a_directory(path)
            chain = self._entries.get((fid, name))
            if chain is None:
                return None
            value = chain.head[0] if at_ts is None else chain.at(at_ts, mv)[0]
            if value is None:
                return None
            fid = value
        return fid

    def _meta_at(self, file_id: int, at_ts: Optional[int], mv: bool) -> Optional[FileMeta]:
        chain = self._metas.get(file_id)
        if chain is None:
            return None
        return chain.head[0] if at_ts is None else chain.at(at_ts, mv)[0]

    def get_meta(self, path_or_id, at_ts: int) -> Optional[FileMeta]:
        self._check_ts(at_ts)
        mv = self.mode.multiversioned
        if isinstance(path_or_id, str):
            fid = self._resolve(path_or_id, at_ts, mv)
            if fid is None:
                return None
        else:
            fid = int(path_or_id)
        return self._meta_at(fid, at_ts, mv)

    def list_dir(self, path: str, at_ts: int) -> List[Tuple[str, int, FileKind]]:
        self._check_ts(at_ts)
        mv = self.mode.multiversioned
        fid = self._resolve(path, at_ts, mv)
        if fid is None:
            raise not_found(path)
        if self._kind_of(fid) is not FileKind.DIRECTORY:
            raise not_a_directory(path)
        self._listings[fid].at(at_ts, mv)
        out = []
        for name in sorted(tuple(self._children[fid])):
            child = self._entries[(fid, name)].at(at_ts, True)[0]
            if child is not None:
                out.append((name, child, self._kind_of(child)))
        return out

    # -- commit ------------------------------------------------------------

    def _check_well_formed(self, req: CommitRequest) -> None:
        created = set()
        for op in req.meta_ops:
            if isinstance(op, (Create, Mkdir)):
                if op.tmp_id >= 0:
                    raise ProtocolError("temporary file ids must be negative")
                created.add(op.tmp_id)
            elif not isinstance(op, (Unlink, Rename, SetLength)):
                raise ProtocolError(f"unknown meta op {op!r}")
        for w in req.write_set:
            if w.end > self.block_size:
                raise ProtocolError(f"write crosses block boundary: {w!r}")
            fid = w.block.file_id
            if fid < 0 and fid not in created:
                raise ProtocolError(f"write to unknown temporary file {fid}")
        for op in req.meta_ops:
            if isinstance(op, SetLength) and op.file_id < 0 and op.file_id not in created:
                raise ProtocolError(f"length change on unknown temporary file {op.file_id}")
        if req.txn_read_ts > self._current:
            raise ProtocolError("read timestamp is ahead of the latest commit")

    def _validate(self, req: CommitRequest):
        """Return ``(AbortKind, detail)`` for the first failing check, else None."""
        snapshot = req.read_only and self.mode.multiversioned
        at = req.txn_read_ts if snapshot else None
        file_mode = self.mode is VersioningMode.FILE_VERSIONED
        for ref, ts in req.read_set:
            ref = BlockRef(*ref)
            if file_mode:
                if self._file_ts.get(ref.file_id, 0) > ts:
                    return AbortKind.STALE_READ, ref
                continue
            chain = self._blocks.get(ref)
            if chain is None:
                continue
            if snapshot:
                if ts >= at:
                    continue
                try:
                    version_ts = chain.at(at, True)[1]
                except SnapshotTooOld:
                    return AbortKind.SNAPSHOT_TOO_OLD, ref
            else:
                version_ts = chain.head[1]
            if version_ts > ts:
                return AbortKind.STALE_READ, ref
        for mr in req.meta_reads:
            try:
                fid = self._resolve(mr.path, at, True)
                if fid != mr.file_id:
                    return AbortKind.NAMESPACE_CONFLICT, mr.path
                if mr.listing:
                    listing = self._listings.get(fid)
                    version_ts = listing.head[1] if at is None else listing.at(at, True)[1]
                    if version_ts > mr.ts:
                        return AbortKind.NAMESPACE_CONFLICT, mr.path
            except SnapshotTooOld:
                return AbortKind.SNAPSHOT_TOO_OLD, mr.path
            except OSError:
                return AbortKind.NAMESPACE_CONFLICT, mr.path
        for a in req.assertions:
            try:
                meta = self._meta_at(a.file_id, at, True)
            except SnapshotTooOld:
                return AbortKind.SNAPSHOT_TOO_OLD, a.file_id
            length = meta.length if meta is not None else 0
            if not a.holds(length):
                return AbortKind.LENGTH_VIOLATION, a.file_id
        return None

    # staged view helpers

    def _staged_entry(self, plan: _Plan, key) -> Optional[int]:
        if key in plan.entries:
            return plan.entries[key]
        chain = self._entries.get(key)
        return chain.head[0] if chain is not None else None

    def _staged_meta(self, plan: _Plan, fid: int) -> Optional[FileMeta]:
        if fid in plan.metas:
            return plan.metas[fid]
        chain = self._metas.get(fid)
        return chain.head[0] if chain is not None else None

    def _staged_resolve(self, plan: _Plan, path: str) -> Optional[int]:
        fid = ROOT_ID
        for name in split_path(path):
            meta = self._staged_meta(plan, fid)
            if meta is None or not meta.is_dir:
                raise _Conflict(path)
            fid = self._staged_entry(plan, (fid, name))
            if fid is None:
                return None
        return fid

    def _staged_children(self, plan: _Plan, dir_id: int) -> List[str]:
        names = set(self._children.get(dir_id, ()))
        names.update(n for (p, n) in plan.entries if p == dir_id)
        return [n for n in names if self._staged_entry(plan, (dir_id, n)) is not None]

    def _parent_dir(self, plan: _Plan, path: str) -> Tuple[int, str]:
        parent, name = parent_and_name(path)
        pid = self._staged_resolve(plan, parent)
        if pid is None or not self._staged_meta(plan, pid).is_dir:
            raise _Conflict(path)
        return pid, name

    def _plan(self, req: CommitRequest) -> _Plan:
        plan = _Plan(self._next_id)
        for op in req.meta_ops:
            if isinstance(op, (Create, Mkdir)):
                pid, name = self._parent_dir(plan, op.path)
                if self._staged_entry(plan, (pid, name)) is not None:
                    raise _Conflict(op.path)
                real = plan.alloc(op.tmp_id)
                kind = FileKind.DIRECTORY if isinstance(op, Mkdir) else FileKind.REGULAR
                plan.metas[real] = FileMeta(real, 0, op.mode, kind)
                plan.entries[(pid, name)] = real
                plan.listings.add(pid)
                if kind is FileKind.DIRECTORY:
                    plan.listings.add(real)
                plan.paths.append(op.path)
            elif isinstance(op, Unlink):
                pid, name = self._parent_dir(plan, op.path)
                fid = self._staged_entry(plan, (pid, name))
                if fid is None:
                    raise _Conflict(op.path)
                if self._staged_meta(plan, fid).is_dir and self._staged_children(plan, fid):
                    raise _Conflict(op.path)
                plan.entries[(pid, name)] = None
                plan.listings.add(pid)
                plan.paths.append(op.path)
            elif isinstance(op, Rename):
                self._plan_rename(plan, op)
            else:
                fid = plan.ids.get(op.file_id, op.file_id)
                meta = self._staged_meta(plan, fid)
                if meta is None or meta.is_dir:
                    raise ProtocolError(f"cannot set the length of {op.file_id}")
                new_len = max(meta.length, op.length) if op.grow_only else op.length
                if self.max_file_size is not None and new_len > self.max_file_size:
                    raise ProtocolError("file too large")
                if new_len < meta.length:
                    plan.shrink_to[fid] = min(plan.shrink_to.get(fid, meta.length), new_len)
                if new_len != meta.length:
                    plan.metas[fid] = FileMeta(fid, new_len, meta.mode, meta.kind)
        return plan

    def _plan_rename(self, plan: _Plan, op: Rename) -> None:
        opid, oname = self._parent_dir(plan, op.old)
        src = self._staged_entry(plan, (opid, oname))
        if src is None:
            raise _Conflict(op.old)
        old_parts, new_parts = split_path(op.old), split_path(op.new)
        if new_parts[:len(old_parts)] == old_parts and new_parts != old_parts:
            raise _Conflict(op.new)
        npid, nname = self._parent_dir(plan, op.new)
        dst = self._staged_entry(plan, (npid, nname))
        if dst == src:
            return
        if dst is not None:
            src_dir = self._staged_meta(plan, src).is_dir
            dst_meta = self._staged_meta(plan, dst)
            if src_dir != dst_meta.is_dir:
                raise _Conflict(op.new)
            if dst_meta.is_dir and self._staged_children(plan, dst):
                raise _Conflict(op.new)
        plan.entries[(opid, oname)] = None
        plan.entries[(npid, nname)] = src
        plan.listings.update((opid, npid))
        plan.paths.extend((op.old, op.new))

    def _stage_blocks(self, plan: _Plan, req: CommitRequest) -> Dict[BlockRef, bytes]:
        bs = self.block_size
        out: Dict[BlockRef, bytes] = {}

        def current(ref):
            if ref in out:
                return out[ref]
            chain = self._blocks.get(ref)
            return chain.head[0] if chain is not None else self._zero

        for fid, zero_from in plan.shrink_to.items():
            old = self._metas[fid].head[0] if fid in self._metas else None
            old_len = old.length if old is not None else 0
            for block_no, off, n in block_span(zero_from, old_len - zero_from, bs):
                ref = BlockRef(fid, block_no)
                if ref not in self._blocks and ref not in out:
                    continue
                buf = bytearray(current(ref))
                buf[off:off + n] = bytes(n)
                out[ref] = bytes(buf)
        write_end: Dict[int, int] = {}
        for w in coalesce_writes(
            w if w.block.file_id >= 0 else type(w)(BlockRef(plan.ids[w.block.file_id], w.block.block_no), w.offset, w.data)
            for w in req.write_set
        ):
            buf = bytearray(current(w.block))
            buf[w.offset:w.end] = w.data
            out[w.block] = bytes(buf)
            end = w.block.block_no * bs + w.end
            write_end[w.block.file_id] = max(write_end.get(w.block.file_id, 0), end)
        for fid, end in write_end.items():
            meta = self._staged_meta(plan, fid)
            if meta is None or meta.is_dir:
                raise ProtocolError(f"write to non-regular file {fid}")
            if end > meta.length:
                if self.max_file_size is not None and end > self.max_file_size:
                    raise ProtocolError("file too large")
                plan.metas[fid] = FileMeta(fid, end, meta.mode, meta.kind)
        return out

    def validate_and_commit(self, req: CommitRequest) -> CommitResult:
        self._check_well_formed(req)
        with self._commit_lock:
            if not self._skip_validation:
                failed = self._validate(req)
                if failed is not None:
                    return CommitResult.abort(*failed)
            if req.read_only:
                return CommitResult.ok(self._read_only_point(req))
            try:
                plan = self._plan(req)
            except _Conflict as exc:
                return CommitResult.abort(AbortKind.NAMESPACE_CONFLICT, exc.path)
            staged_blocks = self._stage_blocks(plan, req)
            ts = self.seq_next()
            self._apply(plan, staged_blocks, ts)
            self._current = ts
            self._after_commit(ts)
            return CommitResult.ok(ts, {tmp: real for tmp, real in plan.ids.items()})

    def _read_only_point(self, req: CommitRequest) -> int:
        """Timestamp a validated read-only transaction serializes at.

        Its read timestamp, unless (without multiversioning) some observation
        came from a cache entry only known valid before it; such values were
        checked against the latest state, so the transaction sits there.
        """
        if self.mode.multiversioned:
            return req.txn_read_ts
        t = req.txn_read_ts
        if all(ts >= t for _, ts in req.read_set) and all(m.ts >= t for m in req.meta_reads):
            return t
        return self._current

    def _push(self, chain: VersionChain, value, ts: int) -> None:
        chain.set(value, ts)
        self._undo_queue.append((ts, chain))

    def _apply(self, plan: _Plan, blocks: Dict[BlockRef, bytes], ts: int) -> None:
        self._next_id = plan.next_id
        for fid, meta in plan.metas.items():
            meta = FileMeta(fid, meta.length, meta.mode, meta.kind, ts)
            chain = self._metas.get(fid)
            if chain is None:
                chain = self._metas[fid] = VersionChain(None, 0)
                if meta.is_dir:
                    self._children[fid] = set()
                    self._listings[fid] = VersionChain(0, 0)
            self._push(chain, meta, ts)
        for key, value in plan.entries.items():
            chain = self._entries.get(key)
            if chain is None:
                chain = self._entries[key] = VersionChain(None, 0)
                self._children[key[0]].add(key[1])
            self._push(chain, value, ts)
        for dir_id in plan.listings:
            self._push(self._listings[dir_id], ts, ts)
        touched_files = set(plan.metas)
        for ref, data in blocks.items():
            chain = self._blocks.get(ref)
            if chain is None:
                chain = self._blocks[ref] = VersionChain(self._zero, 0)
            self._push(chain, data, ts)
            touched_files.add(ref.file_id)
        for fid in touched_files:
            self._file_ts[fid] = ts
        entry = _LogEntry(ts, tuple(sorted(blocks)), tuple(sorted(plan.metas)), tuple(plan.paths))
        self._log.append(entry)
        self._log_ts.append(ts)

    def _after_commit(self, ts: int) -> None:
        self._commits_since_decay += 1
        if self._commits_since_decay >= DECAY_INTERVAL:
            self._commits_since_decay = 0
            for ref in list(self._fetches):
                self._fetches[ref] //= 2
        if self.undo_window is not None and ts - self.undo_window > 0:
            self._gc(ts - self.undo_window)

    # -- undo retention ----------------------------------------------------

    def _gc(self, retain_after: int) -> int:
        pruned = 0
        queue = self._undo_queue
        while queue and queue[0][0] <= retain_after:
            _, chain = queue.popleft()
            chain.undo.popleft()
            pruned += 1
        if retain_after > self._log_floor:
            cut = bisect.bisect_right(self._log_ts, retain_after)
            del self._log[:cut]
            del self._log_ts[:cut]
            self._log_floor = retain_after
        return pruned

    def gc_undo(self, retain_after: int) -> int:
        """Drop undo entries only needed by snapshots older than ``retain_after``."""
        if retain_after > self._current:
            raise ProtocolError("cannot retain beyond the latest commit")
        with self._commit_lock:
            return self._gc(retain_after)

    # -- cache feed --------------------------------------------------------

    def _hot_threshold(self) -> float:
        counts = [c for c in self._fetches.values() if c > 0]
        if not counts:
            return math.inf
        k = max(1, math.ceil(self.frequency_fraction * len(counts)))
        return heapq.nlargest(k, counts)[-1]

    def cache_feed(self, since_ts: int, policy: CachePolicy) -> CacheUpdateBatch:
        policy = CachePolicy(policy)
        if policy is CachePolicy.STALE:
            return CacheUpdateBatch(since_ts, ())
        with self._commit_lock:
            upto = self._current
            if since_ts >= upto:
                return CacheUpdateBatch(upto, ())
            if since_ts < self._log_floor:
                items = [FileInvalidate(fid) for fid in sorted(self._metas)]
                items.append(NameInvalidate("/"))
                return CacheUpdateBatch(upto, tuple(items))
            start = bisect.bisect_right(self._log_ts, since_ts)
            refs: Dict[BlockRef, None] = {}
            files: Dict[int, None] = {}
            paths: Dict[str, None] = {}
            for entry in self._log[start:]:
                refs.update(dict.fromkeys(entry.blocks))
                files.update(dict.fromkeys(entry.files))
                paths.update(dict.fromkeys(entry.paths))
            items = [NameInvalidate(p) for p in paths]
            items.extend(MetaUpdate(self._metas[fid].head[0]) for fid in files)
            threshold = self._hot_threshold() if policy is CachePolicy.FREQUENCY else 0
            for ref in refs:
                data, ts = self._blocks[ref].head
                if policy is CachePolicy.UPDATE_ALL or (
                    policy is CachePolicy.FREQUENCY and self._fetches.get(ref, 0) >= threshold
                ):
                    items.append(BlockData(ref, data, ts))
                else:
                    items.append(BlockInvalidate(ref, ts))
            return CacheUpdateBatch(upto, tuple(items))

    # -- state dumps -------------------------------------------------------

    def _walk(self):
        """Yield ``(path, FileMeta)`` for every reachable entry, depth first."""
        stack = [("/", ROOT_ID)]
        while stack:
            path, fid = stack.pop()
            meta = self._metas[fid].head[0]
            yield path, meta
            if meta.is_dir:
                for name in sorted(self._children[fid], reverse=True):
                    child = self._entries[(fid, name)].head[0]
                    if child is not None:
                        stack.append((join_path(path, name), child))

    def _content(self, meta: FileMeta) -> bytes:
        bs = self.block_size
        parts = []
        for block_no in range(math.ceil(meta.length / bs)):
            chain = self._blocks.get(BlockRef(meta.file_id, block_no))
            data = chain.head[0] if chain is not None else self._zero
            parts.append(data[:min(bs, meta.length - block_no * bs)])
        return b"".join(parts)

    def dump(self) -> dict:
        """Deterministic digest of the latest state (namespace + block digests)."""
        with self._commit_lock:
            files = {}
            for path, meta in self._walk():
                rec = {"file_id": meta.file_id, "kind": meta.kind.value, "mode": meta.mode, "length": meta.length}
                if not meta.is_dir:
                    rec["blocks"] = block_digests(self._content(meta), self.block_size)
                files[path] = rec
            return {"ts": self._current, "block_size": self.block_size, "files": files}

    def snapshot(self) -> dict:
        """Full latest-version state, restorable with ``from_snapshot``."""
        with self._commit_lock:
            return self._snapshot()

    def _snapshot(self) -> dict:
        metas = {}
        for fid, chain in self._metas.items():
            meta = chain.head[0]
            if meta is not None:
                metas[str(fid)] = [meta.length, meta.mode, meta.kind.value, meta.meta_version]
        entries = sorted(
            [pid, name, chain.head[0], chain.head[1]]
            for (pid, name), chain in self._entries.items()
            if chain.head[0] is not None
        )
        blocks = sorted(
            [ref.file_id, ref.block_no, base64.b64encode(chain.head[0]).decode("ascii"), chain.head[1]]
            for ref, chain in self._blocks.items()
        )
        return {
            "ts": self._current,
            "seq": self._seq,
            "next_id": self._next_id,
            "mode": self.mode.value,
            "block_size": self.block_size,
            "metas": metas,
            "entries": entries,
            "blocks": blocks,
        }

    @classmethod
    def from_snapshot(cls, snap: dict, **kwargs) -> "Backend":
        kwargs.setdefault("mode", VersioningMode(snap["mode"]))
        kwargs.setdefault("block_size", snap["block_size"])
        be = cls(**kwargs)
        be._current = snap["ts"]
        be._seq = snap["seq"]
        be._next_id = snap["next_id"]
        be._log_floor = snap["ts"]
        for fid, (length, mode, kind, version) in snap["metas"].items():
            fid = int(fid)
            meta = FileMeta(fid, length, mode, FileKind(kind), version)
            be._metas[fid] = VersionChain(meta, version)
            if meta.is_dir:
                be._children.setdefault(fid, set())
                be._listings.setdefault(fid, VersionChain(0, 0))
        for pid, name, fid, ts in snap["entries"]:
            be._entries[(pid, name)] = VersionChain(fid, ts)
            be._children[pid].add(name)
            newest = max(ts, be._listings[pid].head[1])
            be._listings[pid].head = (newest, newest)
        for fid, block_no, data, ts in snap["blocks"]:
            be._blocks[BlockRef(fid, block_no)] = VersionChain(base64.b64decode(data), ts)
            be._file_ts[fid] = max(be._file_ts.get(fid, 0), ts)
        for fid, chain in be._metas.items():
            be._file_ts[fid] = max(be._file_ts.get(fid, 0), chain.head[1])
        return be

    def state_digest(self) -> str:
        """Hash over everything a commit may change, including the undo log."""
        with self._commit_lock:
            undo = sorted(
                (repr(key), [(repr(e.value), e.ts, e.superseded_by) for e in chain.undo])
                for store in (self._blocks, self._metas, self._entries, self._listings)
                for key, chain in store.items()
            )
            doc = {
                "snapshot": self._snapshot(),
                "undo": undo,
                "log": [list(map(repr, e)) for e in self._log],
                "file_ts": sorted(self._file_ts.items()),
            }
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()
