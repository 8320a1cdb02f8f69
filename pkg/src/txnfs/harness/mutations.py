"""A scripted valid history and 20 corruptions of it the checker must reject.

The base history is produced by real clients against a real backend, with
small blocks so that partial-block reads, zero-filled gaps, truncation,
namespace changes and one stale-read abort all show up in a few dozen
events.
"""
from __future__ import annotations

import base64
import copy
import os

from ..backend import Backend
from ..client import Mount
from ..model import VersioningMode
from .history import txn_record

BLOCK_SIZE = 16


def base_history() -> dict:
    backend = Backend(VersioningMode.BLOCK_VERSIONED, BLOCK_SIZE)
    mounts = [Mount(backend, record=True) for _ in range(3)]
    seqs = [0, 0, 0]
    txns = []

    def run(client, body, commit=True):
        txn = mounts[client].begin()
        body(txn)
        if commit:
            finish(client, txn)
        return txn

    def finish(client, txn):
        txn.commit()
        seqs[client] += 1
        txns.append(txn_record(client, seqs[client], txn))

    def c0_t1(t):
        fd = t.open("/a", os.O_CREAT | os.O_RDWR)
        t.pwrite(fd, bytes(range(65, 65 + 40)), 0)
        t.mkdir("/d")
        fx = t.open("/d/x", os.O_CREAT | os.O_WRONLY)
        t.pwrite(fx, b"xxxxxxxxxx", 0)

    def c1_t1(t):
        fd = t.open("/a", os.O_RDWR)
        t.pread(fd, 40, 0)
        t.pread(fd, 8, 40)
        t.pwrite(fd, b"B" * 16, 0)

    def c2_t1(t):
        fd = t.open("/a")
        t.pread(fd, 64, 0)
        t.stat("/a")
        t.listdir("/")
        t.listdir("/d")

    def c0_t2(t):
        t.truncate("/a", 20)
        fd = t.open("/a", os.O_RDWR)
        t.pwrite(fd, b"CCCCC", 30)

    def c1_t2(t):
        fd = t.open("/a")
        t.pread(fd, 64, 0)
        t.rename("/d/x", "/d/y")

    def c2_t2(t):
        t.listdir("/d")
        fd = t.open("/d/y")
        t.pread(fd, 16, 0)
        t.unlink("/a")

    def c0_t3(t):
        t.exists("/a")
        fd = t.open("/d/y", os.O_RDWR | os.O_APPEND)
        t.read(fd, 4)
        t.write(fd, b"zz")

    def c1_t3(t):
        fd = t.open("/d/y")
        t.pread(fd, 32, 0)

    for client, body in ((0, c0_t1), (1, c1_t1), (2, c2_t1), (0, c0_t2), (1, c1_t2),
                         (2, c2_t2), (0, c0_t3), (1, c1_t3)):
        run(client, body)

    # overlapping pair: client 0 reads a block client 1 overwrote meanwhile
    def c0_t4(t):
        fd = t.open("/d/y")
        t.pread(fd, 4, 0)

    stale = run(0, c0_t4, commit=False)
    writer = run(1, lambda t: t.pwrite(t.open("/d/y", os.O_RDWR), b"W" * 12, 0), commit=False)
    finish(1, writer)
    stale.pwrite(stale.open("/d/y", os.O_RDWR), b"S", 20)
    finish(0, stale)
    return {"block_size": BLOCK_SIZE, "mode": backend.mode.value, "txns": txns}


# -- helpers ---------------------------------------------------------------


def _txn(h, client, seq):
    for rec in h["txns"]:
        if rec["client"] == client and rec["seq"] == seq:
            return rec
    raise LookupError((client, seq))


def _event(rec, kind, nth=0):
    found = [ev for ev in rec["events"] if ev[0] == kind]
    return found[nth]


def _payload(ev, idx):
    return bytearray(base64.b64decode(ev[idx]))


def _set_payload(ev, idx, data):
    ev[idx] = base64.b64encode(bytes(data)).decode("ascii")


# -- mutations -------------------------------------------------------------


def read_byte_flipped(h):
    ev = _event(_txn(h, 2, 1), "read")
    data = _payload(ev, 4)
    data[3] ^= 0xFF
    _set_payload(ev, 4, data)


def read_truncated(h):
    ev = _event(_txn(h, 2, 1), "read")
    _set_payload(ev, 4, _payload(ev, 4)[:-1])


def read_extended(h):
    ev = _event(_txn(h, 1, 2), "read")
    _set_payload(ev, 4, _payload(ev, 4) + b"C")


def read_offset_shifted(h):
    _event(_txn(h, 1, 1), "read")[2] += 1


def stale_read_committed(h):
    rec = _txn(h, 0, 4)
    rec["outcome"] = "committed"
    rec["commit_ts"] = max(r["commit_ts"] or 0 for r in h["txns"]) + 1
    rec["reason"] = None


def read_from_future(h):
    # client 2's first read shows the content committed after it
    later = _event(_txn(h, 1, 2), "read")
    ev = _event(_txn(h, 2, 1), "read")
    ev[4] = later[4]


def commit_ts_swapped(h):
    a, b = _txn(h, 1, 1), _txn(h, 0, 2)
    a["commit_ts"], b["commit_ts"] = b["commit_ts"], a["commit_ts"]


def snapshot_before_preceding_commit(h):
    rec = _txn(h, 2, 1)
    rec["read_ts"] = rec["commit_ts"] = rec["read_ts"] - 1


def begin_moved_after_commit(h):
    reader, writer = _txn(h, 2, 1), _txn(h, 0, 2)
    shift = writer["commit_end"] + 1.0 - reader["begin_start"]
    for key in ("begin_start", "begin_end", "commit_start", "commit_end"):
        reader[key] += shift


def exact_assertion_changed(h):
    ev = next(e for e in _txn(h, 2, 1)["events"] if e[0] == "assert" and e[2] == "exactly")
    ev[3] += 1


def at_least_assertion_raised(h):
    ev = next(e for e in _txn(h, 1, 1)["events"] if e[0] == "assert" and e[2] == "at_least")
    ev[3] = 10_000


def assertion_kind_flipped(h):
    ev = next(e for e in _txn(h, 1, 2)["events"] if e[0] == "assert" and e[2] == "exactly")
    ev[2], ev[3] = "at_most", ev[3] - 1


def resolve_wrong_id(h):
    _event(_txn(h, 1, 1), "resolve")[2] += 100


def resolve_missed_file(h):
    _event(_txn(h, 2, 1), "resolve")[2] = None


def listing_extra_name(h):
    _event(_txn(h, 2, 1), "listdir")[2].append("ghost")


def listing_missing_name(h):
    _event(_txn(h, 2, 2), "listdir")[2].pop()


def write_dropped(h):
    rec = _txn(h, 1, 1)
    rec["events"] = [e for e in rec["events"] if e[0] != "write"]


def truncate_dropped(h):
    rec = _txn(h, 0, 2)
    rec["events"] = [e for e in rec["events"] if e[0] != "truncate"]


def commit_ts_duplicated(h):
    _txn(h, 1, 2)["commit_ts"] = _txn(h, 0, 2)["commit_ts"]


def rename_source_replaced(h):
    _event(_txn(h, 1, 2), "rename")[1] = "/d/nope"


MUTATIONS = (
    read_byte_flipped,
    read_truncated,
    read_extended,
    read_offset_shifted,
    stale_read_committed,
    read_from_future,
    commit_ts_swapped,
    snapshot_before_preceding_commit,
    begin_moved_after_commit,
    exact_assertion_changed,
    at_least_assertion_raised,
    assertion_kind_flipped,
    resolve_wrong_id,
    resolve_missed_file,
    listing_extra_name,
    listing_missing_name,
    write_dropped,
    truncate_dropped,
    commit_ts_duplicated,
    rename_source_replaced,
)


def mutated_histories(base=None) -> dict:
    """Map mutation name to a corrupted deep copy of ``base``."""
    base = base if base is not None else base_history()
    out = {}
    for fn in MUTATIONS:
        h = copy.deepcopy(base)
        fn(h)
        out[fn.__name__] = h
    return out
