import errno
import os
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import apply_in_order
from txnfs.backend import Backend
from txnfs.client import EXCLUSIVE, MARKER_DIR, SHARED, Mount, TxnState, run_idempotent
from txnfs.errors import TransactionAborted, TransactionClosed, TransportError
from txnfs.model import (
    AbortKind,
    AssertKind,
    BlockRef,
    CachePolicy,
    LengthAssertion,
    SetLength,
    VersioningMode,
)
from txnfs.transport import InstrumentedBackend

BS = 1024
MV = VersioningMode.BLOCK_MULTIVERSIONED
BV = VersioningMode.BLOCK_VERSIONED
RW = os.O_RDWR


def system(mode=BV, policy=CachePolicy.INVALIDATE_ONLY, block_size=BS, **kw):
    be = Backend(mode, block_size, **kw)
    return be, Mount(InstrumentedBackend(be), policy)


def make_file(mount, path, data):
    txn = mount.begin()
    fd = txn.open(path, os.O_CREAT | RW)
    if data:
        txn.pwrite(fd, data, 0)
    assert txn.commit().committed
    return txn.result.created[next(iter(txn.result.created))]


def calls(mount):
    return mount.backend.total_calls()


def assertions(txn, fid=None):
    return [a for a in txn.commit_request().assertions if fid is None or a.file_id == fid]


class TestBegin:
    def test_fresh(self):
        _, m = system()
        assert m.begin().read_ts == 0

    def test_after_commit(self):
        _, m = system()
        make_file(m, "/f", b"x")
        assert m.begin().read_ts == 1

    def test_stale_policy_keeps_cache(self):
        digests = {}
        for policy in (CachePolicy.STALE, CachePolicy.UPDATE_ALL):
            be, reader = system(policy=policy)
            writer = Mount(be)
            fid = make_file(writer, "/f", b"a" * BS)
            t = reader.begin()
            t.pread(t.open("/f"), BS, 0)
            t.commit()
            before = reader.cache_digest()
            t = writer.begin()
            t.pwrite(t.open("/f", RW), b"b" * BS, 0)
            assert t.commit().committed
            reader.begin().abort()
            digests[policy] = (before, reader.cache_digest())
            assert fid > 0
        stale_before, stale_after = digests[CachePolicy.STALE]
        assert stale_before == stale_after
        ua_before, ua_after = digests[CachePolicy.UPDATE_ALL]
        assert ua_before != ua_after
        assert any(v == b"b" * BS for _, v, _ in ua_after)


class TestOpen:
    def test_existing_read_only(self):
        _, m = system()
        make_file(m, "/f", b"hello")
        txn = m.begin()
        fd = txn.open("/f")
        assert txn.seek(fd, 0, os.SEEK_CUR) == 0
        reads = txn.commit_request().meta_reads
        assert [(r.path, r.listing) for r in reads] == [("/f", False)]

    def test_missing_without_create(self):
        _, m = system()
        with pytest.raises(FileNotFoundError):
            m.begin().open("/g")

    def test_concurrent_create_one_wins(self):
        be, a = system()
        b = Mount(be)
        ta, tb = a.begin(), b.begin()
        ta.open("/g", os.O_CREAT | RW)
        tb.open("/g", os.O_CREAT | RW)
        ra, rb = ta.commit(), tb.commit()
        assert ra.committed and not rb.committed
        assert rb.reason is AbortKind.NAMESPACE_CONFLICT

    def test_exclusive_create_on_existing(self):
        _, m = system()
        make_file(m, "/f", b"x")
        with pytest.raises(FileExistsError):
            m.begin().open("/f", os.O_CREAT | os.O_EXCL | RW)

    def test_write_open_of_directory(self):
        _, m = system()
        t = m.begin()
        t.mkdir("/d")
        with pytest.raises(IsADirectoryError):
            t.open("/d", RW)

    def test_o_trunc_records_zero_length(self):
        _, m = system()
        fid = make_file(m, "/f", b"abc")
        t = m.begin()
        fd = t.open("/f", RW | os.O_TRUNC)
        assert SetLength(fid, 0) in t.commit_request().meta_ops
        assert t.pread(fd, 10, 0) == b""

    def test_append_positions_at_length(self):
        _, m = system()
        fid = make_file(m, "/f", b"abc")
        t = m.begin()
        fd = t.open("/f", RW | os.O_APPEND)
        t.write(fd, b"de")
        assert assertions(t, fid) == [LengthAssertion(fid, AssertKind.EXACTLY, 3)]
        assert t.commit().committed
        t = m.begin()
        assert t.pread(t.open("/f"), 10, 0) == b"abcde"


class TestRead:
    def setup_method(self):
        self.be, self.m = system()
        self.fid = make_file(self.m, "/f", bytes(range(100)))

    def test_read_past_eof_truncated(self):
        t = self.m.begin()
        data = t.pread(t.open("/f"), 50, 80)
        assert data == bytes(range(80, 100))
        assert assertions(t) == [LengthAssertion(self.fid, AssertKind.EXACTLY, 100)]

    def test_read_beyond_eof(self):
        t = self.m.begin()
        assert t.pread(t.open("/f"), 10, 200) == b""
        assert assertions(t) == [LengthAssertion(self.fid, AssertKind.AT_MOST, 200)]

    def test_read_within_file(self):
        t = self.m.begin()
        fd = t.open("/f")
        assert t.read(fd, 10) == bytes(range(10))
        assert t.read(fd, 5) == bytes(range(10, 15))
        assert assertions(t) == [LengthAssertion(self.fid, AssertKind.AT_LEAST, 15)]
        assert t.commit_request().read_set == [(BlockRef(self.fid, 0), t.read_ts)]

    def test_read_your_writes_without_fetch(self):
        _, m = system()
        make_file(m, "/e", b"")
        t = m.begin()
        fd = t.open("/e", RW)
        t.pwrite(fd, b"xy", 10)
        before = calls(m)
        assert t.pread(fd, 2, 10) == b"xy"
        assert calls(m) == before
        assert t.commit_request().read_set == []
        # bytes 0..10 come from the committed file, so they are fetched and recorded
        assert t.pread(fd, 12, 0) == bytes(10) + b"xy"
        assert len(t.commit_request().read_set) == 1

    def test_snapshot_too_old_aborts_immediately(self):
        be, reader = system(BV)
        writer = Mount(be)
        make_file(writer, "/s", b"a" * BS)
        t = reader.begin()
        fd = t.open("/s")
        w = writer.begin()
        w.pwrite(w.open("/s", RW), b"b", 0)
        assert w.commit().committed
        with pytest.raises(TransactionAborted) as exc:
            t.pread(fd, 1, 0)
        assert exc.value.reason is AbortKind.SNAPSHOT_TOO_OLD
        assert t.state is TxnState.ABORTED
        with pytest.raises(TransactionClosed):
            t.pread(fd, 1, 0)

    def test_bad_descriptor(self):
        t = self.m.begin()
        with pytest.raises(OSError) as exc:
            t.pread(99, 1, 0)
        assert exc.value.errno == errno.EBADF


class TestWrite:
    def test_local_length(self):
        _, m = system()
        make_file(m, "/n", b"")
        t = m.begin()
        fd = t.open("/n", RW)
        assert t.write(fd, b"0123456789") == 10
        assert t.fstat(fd).length == 10

    def test_sparse_write_zero_fills(self):
        _, m = system()
        make_file(m, "/z", b"")
        t = m.begin()
        t.pwrite(t.open("/z", RW), b"z", 2048)
        assert t.commit().committed
        t = m.begin()
        fd = t.open("/z")
        assert t.pread(fd, 2048, 0) == bytes(2048)
        assert t.pread(fd, 5, 2048) == b"z"

    def test_megabyte_of_writes_without_round_trips(self):
        _, m = system()
        make_file(m, "/big", b"")
        t = m.begin()
        fd = t.open("/big", RW)
        before = calls(m)
        chunk = bytes(range(256)) * 16
        for _ in range(256):
            t.write(fd, chunk)
        assert calls(m) == before
        assert t.commit().committed
        t = m.begin()
        assert t.fstat(t.open("/big")).length == 1 << 20

    def test_read_only_handle(self):
        _, m = system()
        make_file(m, "/f", b"x")
        t = m.begin()
        with pytest.raises(OSError) as exc:
            t.pwrite(t.open("/f"), b"y", 0)
        assert exc.value.errno == errno.EBADF


class TestSeek:
    def setup_method(self):
        self.be, self.m = system()
        self.fid = make_file(self.m, "/f", bytes(100))

    def test_set_records_nothing(self):
        t = self.m.begin()
        fd = t.open("/f")
        assert t.seek(fd, 10) == 10
        req = t.commit_request()
        assert req.read_set == [] and req.assertions == []

    def test_cur(self):
        t = self.m.begin()
        fd = t.open("/f")
        t.read(fd, 7)
        assert t.seek(fd, 0, os.SEEK_CUR) == 7

    def test_end_asserts_length_and_conflicts_with_append(self):
        t = self.m.begin()
        fd = t.open("/f", RW)
        assert t.seek(fd, -10, os.SEEK_END) == 90
        assert assertions(t) == [LengthAssertion(self.fid, AssertKind.EXACTLY, 100)]
        other = Mount(self.be)
        o = other.begin()
        o.write(o.open("/f", RW | os.O_APPEND), b"more")
        assert o.commit().committed
        t.write(fd, b"!")
        res = t.commit()
        assert res.reason is AbortKind.LENGTH_VIOLATION

    def test_negative_position(self):
        t = self.m.begin()
        with pytest.raises(OSError) as exc:
            t.seek(t.open("/f"), -1)
        assert exc.value.errno == errno.EINVAL


class TestTruncate:
    def setup_method(self):
        self.be, self.m = system()
        self.fid = make_file(self.m, "/f", b"x" * 100)

    def test_shrink_then_read_beyond(self):
        t = self.m.begin()
        t.truncate("/f", 50)
        assert t.pread(t.open("/f"), 10, 60) == b""
        # length is fully determined by this txn's own truncate, nothing to assert
        assert assertions(t) == []

    def test_grow_zero_fills(self):
        t = self.m.begin()
        t.truncate("/f", 50)
        t.truncate("/f", 100)
        assert t.pread(t.open("/f"), 10, 60) == bytes(10)
        assert t.commit().committed
        t = self.m.begin()
        fd = t.open("/f")
        assert t.pread(fd, 100, 0) == b"x" * 50 + bytes(50)

    def test_same_length_is_still_an_intent(self):
        t = self.m.begin()
        t.truncate("/f", 100)
        assert SetLength(self.fid, 100) in t.commit_request().meta_ops

    def test_truncate_drops_own_writes_beyond(self):
        t = self.m.begin()
        fd = t.open("/f", RW)
        t.pwrite(fd, b"abcdef", 10)
        t.ftruncate(fd, 12)
        t.truncate(fd, 20)
        assert t.pread(fd, 10, 10) == b"ab" + bytes(8)

    def test_missing_and_directory(self):
        t = self.m.begin()
        with pytest.raises(FileNotFoundError):
            t.truncate("/nope", 1)
        t.mkdir("/d")
        with pytest.raises(IsADirectoryError):
            t.truncate("/d", 0)


class TestNamespace:
    def test_mkdir_then_create_inside(self):
        _, m = system()
        t = m.begin()
        t.mkdir("/d")
        fd = t.open("/d/f", os.O_CREAT | RW)
        t.write(fd, b"hi")
        res = t.commit()
        assert res.committed
        t = m.begin()
        assert [n for n, _, _ in t.listdir("/d")] == ["f"]
        assert t.pread(t.open("/d/f"), 2, 0) == b"hi"

    def test_rename_seen_either_name_never_both(self):
        be, m = system(MV, undo_window=None)
        fid = make_file(m, "/a", b"data")
        for i in range(5):
            make_file(m, f"/pad{i}", b"")
        reader = Mount(be).begin()
        assert reader.read_ts == 6
        t = m.begin()
        t.rename("/a", "/b")
        assert t.commit().commit_ts == 7
        assert reader.stat("/a").file_id == fid
        with pytest.raises(FileNotFoundError):
            reader.stat("/b")
        assert reader.commit().committed
        late = Mount(be).begin()
        assert not late.exists("/a") and late.stat("/b").file_id == fid

    def test_concurrent_unlinks(self):
        be, a = system()
        make_file(a, "/a", b"")
        b = Mount(be)
        ta, tb = a.begin(), b.begin()
        ta.unlink("/a")
        tb.unlink("/a")
        assert ta.commit().committed
        res = tb.commit()
        assert res.reason is AbortKind.NAMESPACE_CONFLICT

    def test_errors(self):
        _, m = system()
        t = m.begin()
        t.mkdir("/d")
        t.open("/d/x", os.O_CREAT | RW)
        with pytest.raises(FileExistsError):
            t.mkdir("/d")
        with pytest.raises(OSError) as exc:
            t.unlink("/d")
        assert exc.value.errno == errno.ENOTEMPTY
        with pytest.raises(FileNotFoundError):
            t.rename("/nope", "/x")
        with pytest.raises(NotADirectoryError):
            t.listdir("/d/x")

    def test_stat_own_created_file(self):
        _, m = system()
        t = m.begin()
        fd = t.open("/new", os.O_CREAT | RW)
        t.write(fd, b"12345")
        assert t.stat("/new").length == 5

    def test_readdir_fresh_root(self):
        _, m = system()
        assert m.begin().listdir("/") == []

    def test_stat_keeps_snapshot_length(self):
        be, m = system(MV)
        make_file(m, "/f", b"abc")
        t = m.begin()
        other = Mount(be).begin()
        other.write(other.open("/f", RW | os.O_APPEND), b"defg")
        assert other.commit().committed
        assert t.stat("/f").length == 3

    def test_rename_directory_moves_children(self):
        _, m = system()
        t = m.begin()
        t.mkdir("/d")
        t.close(t.open("/d/f", os.O_CREAT | RW))
        assert t.commit().committed
        t = m.begin()
        t.rename("/d", "/e")
        assert t.exists("/e/f") and not t.exists("/d/f")
        assert t.commit().committed
        t = m.begin()
        assert t.exists("/e/f") and not t.exists("/d")


class TestLocksAndSync:
    def test_contended_exclusive_lock_succeeds(self):
        be, a = system()
        make_file(a, "/f", b"x" * 10)
        b = Mount(be)
        ta, tb = a.begin(), b.begin()
        assert ta.lock(ta.open("/f", RW), 0, 10, EXCLUSIVE)
        assert tb.lock(tb.open("/f", RW), 0, 10, EXCLUSIVE)

    def test_lock_unlock_lock(self):
        _, m = system()
        make_file(m, "/f", b"x")
        t = m.begin()
        fd = t.open("/f")
        assert t.lock(fd, 0, 1, SHARED) and t.unlock(fd, 0, 1) and t.lock(fd, 0, 1, EXCLUSIVE)

    def test_thousand_locks_no_traffic(self):
        _, m = system()
        make_file(m, "/f", b"x")
        t = m.begin()
        fd = t.open("/f")
        before = calls(m)
        for i in range(1000):
            t.lock(fd, i, 1, SHARED if i % 2 else EXCLUSIVE)
        assert calls(m) == before
        assert t.commit_request().read_set == []

    def test_fsync(self):
        _, m = system()
        make_file(m, "/f", b"x")
        t = m.begin()
        rw, ro = t.open("/f", RW), t.open("/f")
        t.write(rw, b"abc")
        before = calls(m)
        assert t.fsync(rw) and t.fsync(ro)
        assert calls(m) == before

    def test_crash_after_fsync_leaves_nothing(self):
        be, m = system()
        make_file(m, "/f", b"old")
        before = be.state_digest()
        t = m.begin()
        fd = t.open("/f", RW)
        t.pwrite(fd, b"new", 0)
        t.fsync(fd)
        del t
        assert be.state_digest() == before


class TestCommitAbort:
    def test_read_only_multiversioned_always_commits(self):
        be, m = system(MV)
        make_file(m, "/f", b"a" * 2 * BS)
        writer = Mount(be)
        reader = m.begin()
        fd = reader.open("/f")
        reader.pread(fd, BS, 0)
        for _ in range(3):
            w = writer.begin()
            w.pwrite(w.open("/f", RW), b"b" * 2 * BS, 0)
            assert w.commit().committed
        assert reader.pread(fd, BS, BS) == b"a" * BS
        res = reader.commit()
        assert res.committed and res.commit_ts == reader.read_ts

    def test_empty_txn(self):
        _, m = system()
        make_file(m, "/f", b"")
        t = m.begin()
        assert t.commit().commit_ts == t.read_ts

    def test_stale_read_victim(self):
        be, a = system()
        make_file(a, "/f", b"a" * BS)
        b = Mount(be)
        victim = a.begin()
        vfd = victim.open("/f", RW)
        victim.pread(vfd, 4, 0)
        w = b.begin()
        w.pwrite(w.open("/f", RW), b"w", 0)
        assert w.commit().committed
        victim.pwrite(vfd, b"v", 100)
        before = be.state_digest()
        res = victim.commit()
        assert res.reason is AbortKind.STALE_READ
        assert be.state_digest() == before

    def test_unusable_after_commit(self):
        _, m = system()
        t = m.begin()
        t.commit()
        with pytest.raises(TransactionClosed):
            t.open("/x", os.O_CREAT)
        with pytest.raises(TransactionClosed):
            t.commit()

    def test_abort_sends_nothing(self):
        _, m = system()
        make_file(m, "/f", b"")
        t = m.begin()
        fd = t.open("/f", RW)
        before = calls(m)
        t.pwrite(fd, bytes(1 << 20), 0)
        t.abort()
        assert calls(m) == before

    def test_abort_then_begin(self):
        _, m = system()
        make_file(m, "/f", b"keep")
        t = m.begin()
        t.pwrite(t.open("/f", RW), b"lost", 0)
        t.abort()
        t2 = m.begin()
        assert t2.read_ts >= t.read_ts
        assert t2.pread(t2.open("/f"), 4, 0) == b"keep"

    def test_transport_loss_is_indeterminate(self):
        be = Backend()
        m = Mount(InstrumentedBackend(be, lose_reply=1.0))
        t = m.begin()
        t.open("/f", os.O_CREAT | RW)
        with pytest.raises(TransportError):
            t.commit()
        assert t.state is TxnState.INDETERMINATE
        assert be.current_read_timestamp() == 1


class TestIdempotence:
    def work(self, txn):
        fd = txn.open("/counter", os.O_CREAT | RW)
        data = txn.pread(fd, 8, 0)
        value = int(data or b"0") + 1
        txn.pwrite(fd, b"%08d" % value, 0)
        return value

    def counter(self, m):
        t = m.begin()
        return int(t.pread(t.open("/counter"), 8, 0))

    def test_first_then_retry(self):
        be, m = system()
        out = run_idempotent(m, "k1", self.work)
        assert out.executed and out.result == 1
        t = m.begin()
        assert t.exists(f"{MARKER_DIR}/k1")
        before = be.state_digest()
        again = m.run_idempotent("k1", self.work)
        assert not again.executed
        assert be.state_digest() == before
        assert self.counter(m) == 1

    def test_crash_between_work_and_commit(self):
        be, m = system()
        crashes = iter([True])

        def crash(txn):
            if next(crashes, False):
                raise TransportError("injected crash")

        out = run_idempotent(m, "k2", self.work, before_commit=crash)
        assert out.executed
        assert self.counter(m) == 1

    def test_lost_reply_retry_skips(self):
        be = Backend()
        flaky = InstrumentedBackend(be, lose_reply=1.0)
        m = Mount(flaky)
        first = iter([True])
        real = flaky.validate_and_commit

        def once(req):
            flaky.lose_reply = 1.0 if next(first, False) else 0.0
            return real(req)

        flaky.validate_and_commit = once
        out = run_idempotent(m, "k3", self.work)
        assert not out.executed  # the first attempt did commit; the retry sees the marker
        assert "k3" in flaky.lost_replies
        assert self.counter(Mount(be)) == 1

    def test_invalid_key(self):
        _, m = system()
        with pytest.raises(ValueError):
            run_idempotent(m, "a/b", self.work)

    def test_work_error_surfaces(self):
        _, m = system()

        def boom(txn):
            raise KeyError("bad")

        with pytest.raises(KeyError):
            run_idempotent(m, "k4", boom)


class TestProperties:
    @settings(max_examples=60, deadline=None)
    @given(st.binary(min_size=0, max_size=300),
           st.lists(st.one_of(
               st.tuples(st.just("w"), st.integers(0, 400), st.binary(min_size=1, max_size=70)),
               st.tuples(st.just("t"), st.integers(0, 400)),
               st.tuples(st.just("r"), st.integers(0, 450), st.integers(1, 120)),
           ), max_size=25))
    def test_read_your_writes(self, initial, ops):
        be = Backend(block_size=32)
        m = Mount(be)
        make_file(m, "/f", initial)
        t = m.begin()
        fd = t.open("/f", RW)
        model = bytearray(initial)
        for op in ops:
            if op[0] == "w":
                model[:] = apply_in_order(bytes(model), [(op[1], op[2])])
                t.pwrite(fd, op[2], op[1])
            elif op[0] == "t":
                model[:] = model[:op[1]] + bytes(max(0, op[1] - len(model)))
                t.truncate(fd, op[1])
            else:
                assert t.pread(fd, op[2], op[1]) == bytes(model[op[1]:op[1] + op[2]])
        assert t.commit().committed
        t = m.begin()
        assert t.pread(t.open("/f"), 10_000, 0) == bytes(model)

    def test_snapshot_stability(self):
        for mode in (MV, BV):
            be, m = system(mode)
            make_file(m, "/f", b"s" * 3 * BS)
            t = m.begin()
            fd = t.open("/f")
            first = t.pread(fd, 3 * BS, 0)
            w = Mount(be).begin()
            w.pwrite(w.open("/f", RW), b"n" * 3 * BS, 0)
            assert w.commit().committed
            assert t.pread(fd, 3 * BS, 0) == first

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 300), st.integers(1, 100)), min_size=1, max_size=10),
           st.integers(0, 250))
    def test_footprint_covers_answers(self, reads, length):
        be = Backend(block_size=16)
        m = Mount(be)
        fid = make_file(m, "/f", bytes(length))
        t = m.begin()
        fd = t.open("/f")
        for off, n in reads:
            data = t.pread(fd, n, off)
            req = t.commit_request()
            covered = {ref.block_no for ref, _ in req.read_set}
            for i in range(off, off + len(data)):
                assert i // 16 in covered
            # every length allowed by the assertions yields an answer of the same size
            holds = [L for L in range(0, 450) if all(a.holds(L) for a in req.assertions)]
            assert length in holds
            assert {len(bytes(L)[off:off + n]) for L in holds} == {len(data)}

    def test_no_mutation_before_commit(self):
        be, m = system()
        make_file(m, "/f", b"x" * 4 * BS)
        t = m.begin()
        m.backend.log.clear()
        fd = t.open("/f", RW)
        t.pread(fd, 2 * BS, BS)
        t.pwrite(fd, b"y" * BS, 0)
        t.mkdir("/d")
        t.listdir("/")
        t.truncate(fd, 10)
        assert set(m.backend.log) <= {"get_block", "get_meta", "list_dir"}
        t.commit()
        assert m.backend.log[-1] == "commit"

    def test_random_concurrent_values_match_snapshot(self):
        rng = random.Random(9)
        for mode in VersioningMode:
            for policy in CachePolicy:
                be = Backend(mode, 16)
                mounts = [Mount(be, policy) for _ in range(3)]
                make_file(mounts[0], "/f", bytes(64))
                history = {0: bytes(64)}
                for _ in range(60):
                    m = rng.choice(mounts)
                    t = m.begin()
                    snap = max(k for k in history if k <= t.read_ts)
                    fd = t.open("/f", RW)
                    off = rng.randrange(64)
                    try:
                        got = t.pread(fd, 20, off)
                        t.pwrite(fd, bytes([rng.randrange(256)]) * 4, rng.randrange(60))
                    except TransactionAborted:
                        continue
                    res = t.commit()
                    if res.committed:
                        assert got == history[snap][off:off + 20]
                        state = bytearray(history[max(history)])
                        for ref_w in t.commit_request().write_set:
                            pos = ref_w.block.block_no * 16 + ref_w.offset
                            state[pos:pos + len(ref_w.data)] = ref_w.data
                        history[res.commit_ts] = bytes(state)
