"""Transactional client: a block cache plus per-transaction POSIX-style file API.

A ``Mount`` is one client instance (one cloud-function container). Its cache
is refreshed only inside :meth:`Mount.begin`; everything a ``Txn`` reads is
served as of the transaction's read timestamp merged with the transaction's
own buffered effects, and every observation is recorded so the backend can
validate it at commit.

Typical use::

    mount = Mount(backend)
    txn = mount.begin()
    fd = txn.open("/data", os.O_RDWR | os.O_CREAT)
    txn.pwrite(fd, b"hello", 0)
    result = txn.commit()
"""
from __future__ import annotations

import enum
import errno
import itertools
import os
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, NamedTuple, Optional, Tuple

from .errors import (
    SnapshotTooOld,
    TransactionAborted,
    TransactionClosed,
    TransportError,
    fs_error,
    not_a_directory,
    not_found,
)
from .model import (
    ROOT_ID,
    AbortKind,
    AssertKind,
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
    LengthAssertion,
    MetaRead,
    MetaUpdate,
    Mkdir,
    NameInvalidate,
    Rename,
    SetLength,
    Unlink,
    VersioningMode,
    WriteRecord,
    block_span,
    join_path,
    norm_path,
    normalize_assertions,
    overlay_interval,
    parent_and_name,
    split_path,
)

MARKER_DIR = "/.txn_markers"

SHARED = "shared"
EXCLUSIVE = "exclusive"


class TxnState(enum.Enum):
    ACTIVE = "active"
    COMMITTED = "committed"
    ABORTED = "aborted"
    INDETERMINATE = "indeterminate"


class _Entry(NamedTuple):
    value: object
    write_ts: int
    fetched_at: int


class Mount:
    """A client instance with its own block and name cache.

    ``backend`` is anything exposing the backend read/commit/feed calls: a
    :class:`~txnfs.backend.Backend` in-process, or a
    :class:`~txnfs.wire.RemoteBackend`.
    """

    def __init__(
        self,
        backend,
        policy: CachePolicy = CachePolicy.INVALIDATE_ONLY,
        *,
        fold_in: bool = True,
        retry_limit: int = 64,
        record: bool = False,
    ):
        self.backend = backend
        self.policy = CachePolicy(policy)
        self.block_size = backend.block_size
        self.mode = VersioningMode(backend.mode)
        self.fold_in = fold_in
        self.retry_limit = retry_limit
        self.record = record
        self.cache_upto = 0
        self._blocks: Dict[BlockRef, _Entry] = {}
        self._names: Dict[str, _Entry] = {}
        self._refs_by_file: Dict[int, set] = {}
        self._paths_by_file: Dict[int, set] = {}
        self._lock = threading.Lock()

    # -- cache maintenance -------------------------------------------------

    def _valid_at(self, entry: _Entry) -> int:
        return max(entry.fetched_at, self.cache_upto)

    def _put_block(self, ref: BlockRef, data: bytes, write_ts: int, fetched_at: int) -> None:
        old = self._blocks.get(ref)
        if old is not None and old.write_ts > write_ts:
            return
        self._blocks[ref] = _Entry(data, write_ts, fetched_at)
        self._refs_by_file.setdefault(ref.file_id, set()).add(ref)

    def _drop_block(self, ref: BlockRef) -> None:
        if self._blocks.pop(ref, None) is not None:
            self._refs_by_file.get(ref.file_id, set()).discard(ref)

    def _put_name(self, path: str, meta: Optional[FileMeta], fetched_at: int) -> None:
        self._names[path] = _Entry(meta, 0, fetched_at)
        if meta is not None:
            self._paths_by_file.setdefault(meta.file_id, set()).add(path)

    def _drop_names(self, prefix: str) -> None:
        if prefix == "/":
            self._names.clear()
            self._paths_by_file.clear()
            return
        below = prefix + "/"
        for path in [p for p in self._names if p == prefix or p.startswith(below)]:
            entry = self._names.pop(path)
            if entry.value is not None:
                self._paths_by_file.get(entry.value.file_id, set()).discard(path)

    def _drop_file(self, file_id: int) -> None:
        for ref in self._refs_by_file.pop(file_id, ()):
            self._blocks.pop(ref, None)
        for path in self._paths_by_file.pop(file_id, ()):
            self._names.pop(path, None)

    def apply_feed(self, batch: CacheUpdateBatch) -> None:
        upto = batch.upto_ts
        for item in batch.items:
            if isinstance(item, BlockData):
                self._put_block(item.block, item.data, item.write_ts, upto)
            elif isinstance(item, BlockInvalidate):
                entry = self._blocks.get(item.block)
                if entry is not None and entry.write_ts < item.write_ts:
                    self._drop_block(item.block)
            elif isinstance(item, FileInvalidate):
                self._drop_file(item.file_id)
            elif isinstance(item, MetaUpdate):
                meta = item.meta
                for path in list(self._paths_by_file.get(meta.file_id, ())):
                    if path in self._names:
                        self._names[path] = _Entry(meta, 0, upto)
            elif isinstance(item, NameInvalidate):
                self._drop_names(item.path)
        self.cache_upto = max(self.cache_upto, upto)

    def cache_digest(self) -> Tuple:
        """Order-independent view of the block cache, for tests."""
        return tuple(sorted((ref, e.value, e.write_ts) for ref, e in self._blocks.items()))

    # -- transactions ------------------------------------------------------

    def begin(self) -> "Txn":
        started = time.monotonic()
        with self._lock:
            if self.policy is CachePolicy.STALE:
                read_ts = self.backend.current_read_timestamp()
            else:
                batch = self.backend.cache_feed(self.cache_upto, self.policy)
                self.apply_feed(batch)
                read_ts = batch.upto_ts
        txn = Txn(self, read_ts)
        txn.begin_started, txn.begin_ended = started, time.monotonic()
        return txn

    def _finish(self, txn: "Txn", result: Optional[CommitResult]) -> None:
        """Fold what ``txn`` fetched (and, on commit, wrote) into the cache."""
        with self._lock:
            floor = self.cache_upto
            for ref, (data, wts) in txn._fetched.items():
                if txn.read_ts >= floor:
                    self._put_block(ref, data, wts, txn.read_ts)
            for path, meta in txn._fetched_names.items():
                if txn.read_ts >= floor:
                    self._put_name(path, meta, txn.read_ts)
            if result is None or not result.committed or txn.read_only:
                return
            ts = result.commit_ts
            for fid in txn._meta_touched:
                self._drop_file(fid)
            for op in txn._meta_ops:
                if isinstance(op, SetLength):
                    for path in list(self._paths_by_file.get(op.file_id, ())):
                        self._names.pop(path, None)
            for path in txn._paths_touched:
                self._drop_names(path)
            for ref, ivs in txn._writes.items():
                base = txn._base.get(ref)
                full = len(ivs) == 1 and ivs[0][0] == 0 and len(ivs[0][1]) == self.block_size
                foldable = (
                    self.fold_in
                    and ts >= floor
                    and ref.file_id >= 0
                    and ref.file_id not in txn._meta_touched
                    and (full or (base is not None and ref in txn._read_set))
                )
                if foldable:
                    buf = bytearray(base if base is not None else bytes(self.block_size))
                    for off, data in ivs:
                        buf[off:off + len(data)] = data
                    self._put_block(ref, bytes(buf), ts, ts)
                else:
                    self._drop_block(ref)

    def run_idempotent(self, key: str, work: Callable[["Txn"], object], before_commit=None) -> "Outcome":
        return run_idempotent(self, key, work, before_commit=before_commit)


@dataclass
class _Handle:
    file_id: int
    path: str
    readable: bool
    writable: bool
    append: bool
    position: int = 0


@dataclass
class _LocalFile:
    """Transaction-local view of one file's length.

    Without an own truncate the local length is ``max(committed, grow)``;
    after one it is fully determined by the transaction.
    """
    file_id: int
    base_length: int
    kind: FileKind = FileKind.REGULAR
    exact: Optional[int] = None
    grow: int = 0
    zero_from: Optional[int] = None

    @property
    def length(self) -> int:
        base = self.base_length if self.exact is None else self.exact
        return max(base, self.grow)


class Txn:
    """One transaction. Not thread-safe; use one per activity."""

    _tmp_ids = itertools.count(1)

    def __init__(self, mount: Mount, read_ts: int):
        self.mount = mount
        self.read_ts = read_ts
        self.state = TxnState.ACTIVE
        self.result: Optional[CommitResult] = None
        self.block_size = mount.block_size
        self.begin_started = self.begin_ended = 0.0
        self.commit_started = self.commit_ended = 0.0
        self.events: Optional[list] = [] if mount.record else None
        self._mv = mount.mode.multiversioned

        self._read_set: Dict[BlockRef, int] = {}
        self._writes: Dict[BlockRef, List[Tuple[int, bytes]]] = {}
        self._meta_reads: Dict[Tuple[str, bool], MetaRead] = {}
        self._meta_ops: list = []
        self._assertions: List[LengthAssertion] = []

        self._base: Dict[BlockRef, bytes] = {}
        self._fetched: Dict[BlockRef, Tuple[bytes, int]] = {}
        self._fetched_names: Dict[str, Optional[FileMeta]] = {}
        self._base_names: Dict[str, Optional[FileMeta]] = {}
        self._overlay: Dict[Tuple[int, str], Optional[int]] = {}
        self._base_path: Dict[int, str] = {ROOT_ID: "/"}
        self._kinds: Dict[int, FileKind] = {ROOT_ID: FileKind.DIRECTORY}
        self._files: Dict[int, _LocalFile] = {}
        self._fds: Dict[int, _Handle] = {}
        self._next_fd = 3
        self._meta_touched: set = set()
        self._paths_touched: set = set()

    # -- bookkeeping -------------------------------------------------------

    @property
    def active(self) -> bool:
        return self.state is TxnState.ACTIVE

    @property
    def read_only(self) -> bool:
        return not self._writes and not self._meta_ops

    def _require_active(self) -> None:
        if self.state is not TxnState.ACTIVE:
            raise TransactionClosed(f"transaction is {self.state.value}")

    def _event(self, *ev) -> None:
        if self.events is not None:
            self.events.append(list(ev))

    def _local_abort(self, reason: AbortKind, detail=None):
        self.state = TxnState.ABORTED
        self.result = CommitResult.abort(reason, detail)
        self.mount._finish(self, None)
        return TransactionAborted(reason, detail)

    def _backend_call(self, fn, *args):
        try:
            return fn(*args)
        except SnapshotTooOld:
            raise self._local_abort(AbortKind.SNAPSHOT_TOO_OLD, args[0]) from None

    def _fd(self, fd: int) -> _Handle:
        self._require_active()
        try:
            return self._fds[fd]
        except KeyError:
            raise fs_error(errno.EBADF) from None

    def _new_tmp_id(self) -> int:
        return -next(Txn._tmp_ids)

    # -- length observations (recorded against the committed length) ------

    def _observe_exact(self, lf: _LocalFile) -> None:
        if lf.exact is not None or lf.file_id < 0:
            return
        if lf.length > lf.grow:
            self._assert(lf.file_id, AssertKind.EXACTLY, lf.length)
        else:
            self._assert(lf.file_id, AssertKind.AT_MOST, lf.grow)

    def _observe_at_least(self, lf: _LocalFile, n: int) -> None:
        if lf.exact is None and lf.file_id >= 0 and n > lf.grow:
            self._assert(lf.file_id, AssertKind.AT_LEAST, n)

    def _observe_at_most(self, lf: _LocalFile, n: int) -> None:
        if lf.exact is None and lf.file_id >= 0:
            self._assert(lf.file_id, AssertKind.AT_MOST, n)

    def _assert(self, fid: int, kind: AssertKind, length: int) -> None:
        self._assertions.append(LengthAssertion(fid, kind, length))
        self._event("assert", fid, kind.value, length)

    # -- namespace ---------------------------------------------------------

    def _base_lookup(self, path: str) -> Optional[FileMeta]:
        """Committed metadata for ``path`` as seen by this transaction."""
        if path in self._base_names:
            return self._base_names[path]
        mount = self.mount
        entry = mount._names.get(path)
        meta, ts = None, None
        if entry is not None and entry.fetched_at <= self.read_ts:
            valid = mount._valid_at(entry)
            if valid >= self.read_ts:
                meta, ts = entry.value, self.read_ts
            elif not self._mv:
                meta, ts = entry.value, valid
        if ts is None:
            meta = self._backend_call(mount.backend.get_meta, path, self.read_ts)
            ts = self.read_ts
            self._fetched_names[path] = meta
        self._base_names[path] = meta
        fid = meta.file_id if meta is not None else None
        self._meta_reads.setdefault((path, False), MetaRead(path, fid, ts))
        if meta is not None:
            self._base_path.setdefault(meta.file_id, path)
            self._kinds[meta.file_id] = meta.kind
            if meta.file_id not in self._files and not meta.is_dir:
                self._files[meta.file_id] = _LocalFile(meta.file_id, meta.length)
        return meta

    def _lookup(self, path: str) -> Optional[int]:
        fid = ROOT_ID
        parts = split_path(path)
        for i, name in enumerate(parts):
            if self._kinds.get(fid) is not FileKind.DIRECTORY:
                raise not_a_directory(path)
            key = (fid, name)
            if key in self._overlay:
                fid = self._overlay[key]
            elif fid < 0:
                fid = None
            else:
                meta = self._base_lookup(join_path(self._base_path[fid], name))
                fid = meta.file_id if meta is not None else None
            if fid is None:
                return None
        return fid

    def _parent(self, path: str) -> Tuple[int, str]:
        parent, name = parent_and_name(path)
        pid = self._lookup(parent)
        if pid is None:
            raise not_found(parent)
        if self._kinds.get(pid) is not FileKind.DIRECTORY:
            raise not_a_directory(parent)
        return pid, name

    def _children(self, dir_id: int) -> Dict[str, int]:
        names: Dict[str, int] = {}
        if dir_id >= 0 and dir_id in self._base_path:
            base = self._base_path[dir_id]
            listing = self._backend_call(self.mount.backend.list_dir, base, self.read_ts)
            self._meta_reads[(base, True)] = MetaRead(base, dir_id, self.read_ts, True)
            for name, cid, kind in listing:
                names[name] = cid
                self._kinds.setdefault(cid, kind)
                self._base_path.setdefault(cid, join_path(base, name))
        for (pid, name), cid in self._overlay.items():
            if pid == dir_id:
                if cid is None:
                    names.pop(name, None)
                else:
                    names[name] = cid
        return names

    def exists(self, path: str) -> bool:
        self._require_active()
        path = norm_path(path)
        fid = self._lookup(path)
        self._event("resolve", path, fid)
        return fid is not None

    def _local_file(self, fid: int) -> _LocalFile:
        return self._files[fid]

    # -- file API ----------------------------------------------------------

    def open(self, path: str, flags: int = os.O_RDONLY, mode: int = 0o644) -> int:
        self._require_active()
        path = norm_path(path)
        acc = flags & (os.O_RDONLY | os.O_WRONLY | os.O_RDWR)
        readable = acc in (os.O_RDONLY, os.O_RDWR)
        writable = acc in (os.O_WRONLY, os.O_RDWR)
        fid = self._lookup(path)
        if fid is None:
            if not flags & os.O_CREAT:
                raise not_found(path)
            pid, name = self._parent(path)
            fid = self._new_tmp_id()
            self._overlay[(pid, name)] = fid
            self._kinds[fid] = FileKind.REGULAR
            self._files[fid] = _LocalFile(fid, 0, exact=0, zero_from=0)
            self._meta_ops.append(Create(path, fid, mode))
            self._paths_touched.add(path)
            self._event("create", path, fid, mode)
        else:
            if flags & os.O_CREAT and flags & os.O_EXCL:
                raise fs_error(errno.EEXIST, path)
            if self._kinds.get(fid) is FileKind.DIRECTORY and writable:
                raise fs_error(errno.EISDIR, path)
            self._event("resolve", path, fid)
            if flags & os.O_TRUNC and writable:
                self._truncate_id(fid, 0)
        handle = _Handle(fid, path, readable, writable, bool(flags & os.O_APPEND))
        if handle.append and fid in self._files:
            lf = self._files[fid]
            self._observe_exact(lf)
            handle.position = lf.length
        fd = self._next_fd
        self._next_fd += 1
        self._fds[fd] = handle
        return fd

    def close(self, fd: int) -> None:
        self._fd(fd)
        del self._fds[fd]

    def _read_range(self, fid: int, offset: int, n: int) -> bytes:
        bs = self.block_size
        lf = self._files[fid]
        out = bytearray()
        for block_no, off, span in block_span(offset, n, bs):
            ref = BlockRef(fid, block_no)
            own = self._writes.get(ref, [])
            start = block_no * bs
            zero_at = bs if lf.zero_from is None else max(0, min(bs, lf.zero_from - start))
            if _uncovered(own, off, min(off + span, zero_at)):
                buf = bytearray(self._base_block(ref))
                if zero_at < bs:
                    buf[zero_at:] = bytes(bs - zero_at)
            else:
                buf = bytearray(bs)
            for s, data in own:
                buf[s:s + len(data)] = data
            out += buf[off:off + span]
        return bytes(out)

    def _base_block(self, ref: BlockRef) -> bytes:
        if ref in self._base:
            return self._base[ref]
        mount, T = self.mount, self.read_ts
        entry = mount._blocks.get(ref)
        data = rec_ts = None
        if entry is not None and entry.write_ts <= T and entry.fetched_at <= T:
            valid = mount._valid_at(entry)
            if valid >= T:
                data, rec_ts = entry.value, T
            elif self._mv:
                fresh, wts = self._backend_call(mount.backend.get_block, ref, T, entry.write_ts)
                if fresh is None:
                    data, rec_ts = entry.value, T
                else:
                    data, rec_ts = fresh, T
                    self._fetched[ref] = (fresh, wts)
            else:
                data, rec_ts = entry.value, valid
        if data is None:
            data, wts = self._backend_call(mount.backend.get_block, ref, T)
            rec_ts = T
            self._fetched[ref] = (data, wts)
        self._base[ref] = data
        prev = self._read_set.get(ref)
        self._read_set[ref] = rec_ts if prev is None else min(prev, rec_ts)
        return data

    def pread(self, fd: int, count: int, offset: int) -> bytes:
        h = self._fd(fd)
        if not h.readable:
            raise fs_error(errno.EBADF, h.path)
        if offset < 0:
            raise fs_error(errno.EINVAL, h.path)
        if h.file_id not in self._files:
            raise fs_error(errno.EISDIR, h.path)
        if count <= 0:
            return b""
        lf = self._files[h.file_id]
        length = lf.length
        if offset >= length:
            self._observe_at_most(lf, offset)
            data = b""
        else:
            end = offset + count
            if end <= length:
                self._observe_at_least(lf, end)
            else:
                self._observe_exact(lf)
                end = length
            data = self._read_range(h.file_id, offset, end - offset)
        self._event("read", h.file_id, offset, count, data)
        return data

    def read(self, fd: int, count: int) -> bytes:
        h = self._fd(fd)
        data = self.pread(fd, count, h.position)
        h.position += len(data)
        return data

    def pwrite(self, fd: int, data: bytes, offset: int) -> int:
        h = self._fd(fd)
        if not h.writable:
            raise fs_error(errno.EBADF, h.path)
        if offset < 0:
            raise fs_error(errno.EINVAL, h.path)
        data = bytes(data)
        if not data:
            return 0
        lf = self._files[h.file_id]
        fid = h.file_id
        pos = offset
        for block_no, off, span in block_span(offset, len(data), self.block_size):
            ref = BlockRef(fid, block_no)
            self._writes[ref] = overlay_interval(self._writes.get(ref, []), off, data[pos - offset:pos - offset + span])
            pos += span
        end = offset + len(data)
        if end > lf.length:
            lf.grow = end
            last = self._meta_ops[-1] if self._meta_ops else None
            if isinstance(last, SetLength) and last.grow_only and last.file_id == fid:
                self._meta_ops[-1] = SetLength(fid, end, True)
            else:
                self._meta_ops.append(SetLength(fid, end, True))
        self._event("write", fid, offset, data)
        return len(data)

    def write(self, fd: int, data: bytes) -> int:
        h = self._fd(fd)
        if h.append and h.file_id in self._files:
            lf = self._files[h.file_id]
            self._observe_exact(lf)
            h.position = lf.length
        n = self.pwrite(fd, data, h.position)
        h.position += n
        return n

    def seek(self, fd: int, offset: int, whence: int = os.SEEK_SET) -> int:
        h = self._fd(fd)
        if whence == os.SEEK_SET:
            pos = offset
        elif whence == os.SEEK_CUR:
            pos = h.position + offset
        elif whence == os.SEEK_END:
            lf = self._files[h.file_id]
            self._observe_exact(lf)
            pos = lf.length + offset
        else:
            raise fs_error(errno.EINVAL, h.path)
        if pos < 0:
            raise fs_error(errno.EINVAL, h.path)
        h.position = pos
        return pos

    def _truncate_id(self, fid: int, new_len: int) -> None:
        if new_len < 0:
            raise fs_error(errno.EINVAL)
        lf = self._files[fid]
        bs = self.block_size
        for ref in [r for r in self._writes if r.file_id == fid]:
            start = ref.block_no * bs
            if start >= new_len:
                del self._writes[ref]
            elif start + bs > new_len:
                cut = new_len - start
                ivs = [(s, d[:cut - s]) for s, d in self._writes[ref] if s < cut]
                if ivs:
                    self._writes[ref] = ivs
                else:
                    del self._writes[ref]
        lf.zero_from = new_len if lf.zero_from is None else min(lf.zero_from, new_len)
        lf.exact, lf.grow = new_len, 0
        self._meta_ops.append(SetLength(fid, new_len))
        self._meta_touched.add(fid)
        self._event("truncate", fid, new_len)

    def truncate(self, target, new_len: int) -> None:
        self._require_active()
        if isinstance(target, int):
            fid = self._fd(target).file_id
            if not self._fds[target].writable:
                raise fs_error(errno.EBADF)
        else:
            path = norm_path(target)
            fid = self._lookup(path)
            if fid is None:
                raise not_found(path)
            self._event("resolve", path, fid)
        if self._kinds.get(fid) is FileKind.DIRECTORY:
            raise fs_error(errno.EISDIR)
        self._truncate_id(fid, new_len)

    ftruncate = truncate

    # -- metadata ----------------------------------------------------------

    def stat(self, path: str) -> FileMeta:
        self._require_active()
        path = norm_path(path)
        fid = self._lookup(path)
        if fid is None:
            raise not_found(path)
        self._event("resolve", path, fid)
        kind = self._kinds[fid]
        if kind is FileKind.DIRECTORY:
            meta = self._base_names.get(path)
            return FileMeta(fid, 0, meta.mode if meta else 0o755, kind, meta.meta_version if meta else 0)
        lf = self._files[fid]
        self._observe_exact(lf)
        base = self._base_names.get(self._base_path.get(fid, ""))
        mode = base.mode if base is not None else next(
            (op.mode for op in self._meta_ops if isinstance(op, Create) and op.tmp_id == fid), 0o644
        )
        return FileMeta(fid, lf.length, mode, kind, base.meta_version if base else self.read_ts)

    def fstat(self, fd: int) -> FileMeta:
        h = self._fd(fd)
        lf = self._files[h.file_id]
        self._observe_exact(lf)
        return FileMeta(h.file_id, lf.length)

    def listdir(self, path: str) -> List[Tuple[str, int, FileKind]]:
        self._require_active()
        path = norm_path(path)
        fid = self._lookup(path)
        if fid is None:
            raise not_found(path)
        if self._kinds[fid] is not FileKind.DIRECTORY:
            raise not_a_directory(path)
        entries = sorted(self._children(fid).items())
        self._event("listdir", path, [name for name, _ in entries])
        return [(name, cid, self._kinds[cid]) for name, cid in entries]

    def mkdir(self, path: str, mode: int = 0o755) -> None:
        self._require_active()
        path = norm_path(path)
        if self._lookup(path) is not None:
            raise fs_error(errno.EEXIST, path)
        pid, name = self._parent(path)
        fid = self._new_tmp_id()
        self._overlay[(pid, name)] = fid
        self._kinds[fid] = FileKind.DIRECTORY
        self._meta_ops.append(Mkdir(path, fid, mode))
        self._paths_touched.add(path)
        self._event("mkdir", path, fid, mode)

    def unlink(self, path: str) -> None:
        self._require_active()
        path = norm_path(path)
        fid = self._lookup(path)
        if fid is None:
            raise not_found(path)
        if fid == ROOT_ID:
            raise fs_error(errno.EBUSY, path)
        if self._kinds[fid] is FileKind.DIRECTORY and self._children(fid):
            raise fs_error(errno.ENOTEMPTY, path)
        pid, name = self._parent(path)
        self._overlay[(pid, name)] = None
        self._meta_ops.append(Unlink(path))
        self._paths_touched.add(path)
        self._event("unlink", path)

    rmdir = unlink

    def rename(self, old: str, new: str) -> None:
        self._require_active()
        old, new = norm_path(old), norm_path(new)
        src = self._lookup(old)
        if src is None:
            raise not_found(old)
        old_parts, new_parts = split_path(old), split_path(new)
        if not old_parts or not new_parts:
            raise fs_error(errno.EBUSY)
        if new_parts[:len(old_parts)] == old_parts and new_parts != old_parts:
            raise fs_error(errno.EINVAL, new)
        npid, nname = self._parent(new)
        dst = self._lookup(new)
        if dst == src:
            return
        if dst is not None:
            src_dir = self._kinds[src] is FileKind.DIRECTORY
            dst_dir = self._kinds[dst] is FileKind.DIRECTORY
            if src_dir and not dst_dir:
                raise not_a_directory(new)
            if dst_dir and not src_dir:
                raise fs_error(errno.EISDIR, new)
            if dst_dir and self._children(dst):
                raise fs_error(errno.ENOTEMPTY, new)
        opid, oname = self._parent(old)
        self._overlay[(opid, oname)] = None
        self._overlay[(npid, nname)] = src
        self._meta_ops.append(Rename(old, new))
        self._paths_touched.update((old, new))
        self._event("rename", old, new)

    # -- elided coordination -----------------------------------------------

    def lock(self, fd: int, start: int = 0, length: int = 0, kind: str = EXCLUSIVE) -> bool:
        """Byte-range locks always succeed locally; commit validation subsumes them."""
        self._fd(fd)
        if kind not in (SHARED, EXCLUSIVE):
            raise ValueError(f"unknown lock kind {kind!r}")
        return True

    def unlock(self, fd: int, start: int = 0, length: int = 0) -> bool:
        self._fd(fd)
        return True

    def fsync(self, fd: int) -> bool:
        self._fd(fd)
        return True

    # -- completion --------------------------------------------------------

    def commit_request(self) -> CommitRequest:
        writes = [
            WriteRecord(ref, s, d)
            for ref in sorted(self._writes)
            for s, d in self._writes[ref]
        ]
        return CommitRequest(
            txn_read_ts=self.read_ts,
            read_set=sorted(self._read_set.items()),
            write_set=writes,
            meta_reads=list(self._meta_reads.values()),
            meta_ops=list(self._meta_ops),
            assertions=normalize_assertions(self._assertions),
        )

    def commit(self, tag: Optional[str] = None) -> CommitResult:
        self._require_active()
        req = self.commit_request()
        req.tag = tag
        self.commit_started = time.monotonic()
        try:
            result = self.mount.backend.validate_and_commit(req)
        except TransportError:
            self.commit_ended = time.monotonic()
            self.state = TxnState.INDETERMINATE
            self.mount._finish(self, None)
            raise
        self.commit_ended = time.monotonic()
        self.result = result
        self.state = TxnState.COMMITTED if result.committed else TxnState.ABORTED
        self.mount._finish(self, result)
        return result

    def abort(self) -> None:
        self._require_active()
        self.state = TxnState.ABORTED
        self.result = None
        self.mount._finish(self, None)


def _uncovered(intervals, lo: int, hi: int) -> bool:
    """True if some byte of ``[lo, hi)`` lies outside the sorted intervals."""
    pos = lo
    for s, data in intervals:
        if pos >= hi:
            return False
        e = s + len(data)
        if e <= pos:
            continue
        if s > pos:
            return True
        pos = e
    return pos < hi


# -- idempotent invocations --------------------------------------------------


class Outcome(NamedTuple):
    executed: bool
    result: object = None


SKIPPED = Outcome(False)


class RetryLimitExceeded(RuntimeError):
    pass


def run_idempotent(mount: Mount, key: str, work, before_commit=None) -> Outcome:
    """Run ``work(txn)`` at most once per ``key``, retrying aborted attempts.

    A marker file under ``/.txn_markers`` commits atomically with the work's
    effects, so a retried request that already succeeded is skipped.
    ``before_commit`` is an optional hook called right before commit (used to
    inject crashes).
    """
    if "/" in key or not key:
        raise ValueError(f"invalid idempotence key {key!r}")
    marker = join_path(MARKER_DIR, key)
    for _ in range(mount.retry_limit):
        txn = mount.begin()
        try:
            if txn.exists(marker):
                txn.abort()
                return SKIPPED
            if not txn.exists(MARKER_DIR):
                txn.mkdir(MARKER_DIR)
            result = work(txn)
            txn.close(txn.open(marker, os.O_CREAT | os.O_EXCL | os.O_WRONLY))
            if before_commit is not None:
                before_commit(txn)
            outcome = txn.commit(tag=key)
        except (TransactionAborted, TransportError):
            continue
        except BaseException:
            if txn.active:
                txn.abort()
            raise
        if outcome.committed:
            return Outcome(True, result)
    raise RetryLimitExceeded(key)
