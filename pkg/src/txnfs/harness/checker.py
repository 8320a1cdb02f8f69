"""Strict-serializability checker for recorded histories.

Committed transactions are replayed one at a time on a plain in-memory model
of the file system (paths mapped to ids, each file a ``bytearray``). Update
transactions are placed at their commit timestamp; read-only ones directly
after the update that produced the state they committed at. Every recorded
observation is compared with the model as it stood right before the
transaction, merged with the transaction's own earlier effects.

Real-time order is checked separately: if one commit returned before another
transaction began, the second must have started from a snapshot that
includes the first.
"""
from __future__ import annotations

import base64
import binascii
from dataclasses import dataclass, field
from typing import Dict, List, Optional

from ..backend import block_digests
from ..model import ROOT_ID, AssertKind, FileKind, split_path
from .history import OUTCOMES

UPDATE_EVENTS = frozenset({"write", "truncate", "create", "mkdir", "unlink", "rename"})
EVENT_ARITY = {
    "resolve": 3, "create": 4, "mkdir": 4, "unlink": 2, "rename": 3,
    "listdir": 3, "read": 5, "write": 4, "truncate": 3, "assert": 4,
}
REQUIRED = ("client", "seq", "read_ts", "begin_start", "commit_end", "outcome", "commit_ts", "events")


class MalformedHistory(ValueError):
    """The history is structurally unusable (not a correctness verdict)."""


@dataclass
class Valid:
    committed: int
    state: "Oracle"

    ok = True

    def __bool__(self):
        return True


@dataclass
class Violation:
    witness: dict
    state: Optional["Oracle"] = None

    ok = False

    def __bool__(self):
        return False

    def describe(self) -> str:
        w = self.witness
        where = f"client {w.get('client')} txn {w.get('seq')}"
        if w.get("event_index") is not None:
            where += f" event {w['event_index']}"
        return f"{w['rule']}: {w['message']} ({where})"


class _Found(Exception):
    def __init__(self, rule, message, **extra):
        super().__init__(message)
        self.rule = rule
        self.message = message
        self.extra = extra


class Oracle:
    """Latest-state model: flat path map plus per-file byte strings."""

    def __init__(self):
        self.names: Dict[str, int] = {"/": ROOT_ID}
        self.kinds: Dict[int, FileKind] = {ROOT_ID: FileKind.DIRECTORY}
        self.modes: Dict[int, int] = {ROOT_ID: 0o755}
        self.files: Dict[int, bytearray] = {}
        self.ts = 0

    def dump(self, block_size: int) -> dict:
        """Same shape as the backend's ``dump()``."""
        out = {}
        for path, fid in self.names.items():
            kind = self.kinds[fid]
            rec = {"file_id": fid, "kind": kind.value, "mode": self.modes[fid]}
            if kind is FileKind.DIRECTORY:
                rec["length"] = 0
            else:
                content = bytes(self.files[fid])
                rec["length"] = len(content)
                rec["blocks"] = block_digests(content, block_size)
            out[path] = rec
        return {"ts": self.ts, "block_size": block_size, "files": out}


def _children(names: Dict[str, int], path: str) -> List[str]:
    prefix = "/" if path == "/" else path + "/"
    return sorted(
        p[len(prefix):] for p in names
        if p != "/" and p.startswith(prefix) and "/" not in p[len(prefix):]
    )


def _parent(path: str) -> str:
    parts = split_path(path)
    return "/" + "/".join(parts[:-1])


class _TxnView:
    """One transaction's view: the oracle plus copy-on-write local changes."""

    def __init__(self, oracle: Oracle, created: Dict[int, int]):
        self.base = oracle
        self.created = created
        self.names = oracle.names
        self.own_names = False
        self.kinds: Dict[int, FileKind] = {}
        self.modes: Dict[int, int] = {}
        self.files: Dict[int, bytearray] = {}

    def real(self, fid):
        if fid is None or fid >= 0:
            return fid
        if fid not in self.created:
            raise MalformedHistory(f"temporary id {fid} missing from the created map")
        return self.created[fid]

    def kind(self, fid):
        return self.kinds.get(fid) or self.base.kinds.get(fid)

    def content(self, fid):
        if fid in self.files:
            return self.files[fid]
        return self.base.files.get(fid)

    def writable(self, fid) -> bytearray:
        if fid not in self.files:
            cur = self.base.files.get(fid)
            if cur is None:
                raise _Found("read", f"file {fid} does not exist")
            self.files[fid] = bytearray(cur)
        return self.files[fid]

    def mutable_names(self):
        if not self.own_names:
            self.names = dict(self.names)
            self.own_names = True
        return self.names

    def require_dir(self, path):
        fid = self.names.get(path)
        if fid is None or self.kind(fid) is not FileKind.DIRECTORY:
            raise _Found("namespace", f"{path} is not an existing directory")

    def apply(self, ev) -> None:
        kind = ev[0]
        if kind == "resolve":
            _, path, fid = ev
            expected = self.names.get(path)
            if self.real(fid) != expected:
                raise _Found("namespace", f"{path} resolved to {self.real(fid)}, expected {expected}",
                             expected=expected, actual=self.real(fid))
        elif kind in ("create", "mkdir"):
            _, path, tmp, mode = ev
            if path in self.names:
                raise _Found("namespace", f"created {path} but it already exists")
            self.require_dir(_parent(path))
            fid = self.real(tmp)
            self.mutable_names()[path] = fid
            self.kinds[fid] = FileKind.REGULAR if kind == "create" else FileKind.DIRECTORY
            self.modes[fid] = mode
            if kind == "create":
                self.files[fid] = bytearray()
        elif kind == "unlink":
            path = ev[1]
            fid = self.names.get(path)
            if fid is None:
                raise _Found("namespace", f"unlinked {path} which does not exist")
            if self.kind(fid) is FileKind.DIRECTORY and _children(self.names, path):
                raise _Found("namespace", f"removed non-empty directory {path}")
            del self.mutable_names()[path]
        elif kind == "rename":
            self._rename(ev[1], ev[2])
        elif kind == "listdir":
            _, path, names = ev
            expected = _children(self.names, path)
            if list(names) != expected:
                raise _Found("namespace", f"listing of {path} was {names}, expected {expected}",
                             expected=expected, actual=list(names))
        elif kind == "read":
            _, fid, off, count, data = ev
            fid = self.real(fid)
            content = self.content(fid)
            if content is None:
                raise _Found("read", f"read from missing file {fid}")
            expected = bytes(content[off:off + count])
            if data != expected:
                raise _Found("read", f"read of file {fid} at {off} returned a value not in its snapshot",
                             expected=_b64(expected), actual=_b64(data))
        elif kind == "write":
            _, fid, off, data = ev
            buf = self.writable(self.real(fid))
            if off > len(buf):
                buf.extend(bytes(off - len(buf)))
            buf[off:off + len(data)] = data
        elif kind == "truncate":
            _, fid, length = ev
            buf = self.writable(self.real(fid))
            if length < len(buf):
                del buf[length:]
            else:
                buf.extend(bytes(length - len(buf)))
        elif kind == "assert":
            _, fid, akind, length = ev
            content = self.base.files.get(self.real(fid))
            actual = None if content is None else len(content)
            if actual is None or not _holds(AssertKind(akind), length, actual):
                raise _Found("assertion", f"length of file {fid} is {actual}, asserted {akind} {length}",
                             expected=actual, actual=length)

    def _rename(self, old, new):
        src = self.names.get(old)
        if src is None:
            raise _Found("namespace", f"renamed {old} which does not exist")
        self.require_dir(_parent(new))
        names = self.mutable_names()
        dst = names.get(new)
        if dst is not None and dst != src:
            if self.kind(dst) is FileKind.DIRECTORY and _children(names, new):
                raise _Found("namespace", f"rename replaced non-empty directory {new}")
            del names[new]
        prefix = old + "/"
        moved = {p: f for p, f in names.items() if p == old or p.startswith(prefix)}
        for p in moved:
            del names[p]
        for p, f in moved.items():
            names[new + p[len(old):]] = f

    def commit(self, ts: int) -> None:
        base = self.base
        if self.own_names:
            base.names = self.names
        base.kinds.update(self.kinds)
        base.modes.update(self.modes)
        base.files.update(self.files)
        base.ts = max(base.ts, ts)


def _holds(kind: AssertKind, length: int, actual: int) -> bool:
    if kind is AssertKind.AT_LEAST:
        return actual >= length
    if kind is AssertKind.AT_MOST:
        return actual <= length
    return actual == length


def _b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def _decode_events(rec) -> list:
    out = []
    for ev in rec["events"]:
        if not isinstance(ev, list) or not ev or ev[0] not in EVENT_ARITY or len(ev) != EVENT_ARITY[ev[0]]:
            raise MalformedHistory(f"bad event {ev!r}")
        ev = list(ev)
        try:
            if ev[0] == "read":
                ev[4] = base64.b64decode(ev[4], validate=True)
            elif ev[0] == "write":
                ev[3] = base64.b64decode(ev[3], validate=True)
        except (binascii.Error, TypeError) as exc:
            raise MalformedHistory(f"bad payload in {ev[0]} event") from exc
        out.append(ev)
    return out


def _validate_shape(history) -> list:
    if not isinstance(history, dict) or not isinstance(history.get("txns"), list):
        raise MalformedHistory("history must be an object with a 'txns' list")
    if not isinstance(history.get("block_size"), int) or history["block_size"] < 1:
        raise MalformedHistory("missing block_size")
    txns = history["txns"]
    for rec in txns:
        if not isinstance(rec, dict) or any(k not in rec for k in REQUIRED):
            raise MalformedHistory(f"record missing fields: {rec!r:.200}")
        if rec["outcome"] not in OUTCOMES or rec["outcome"] == "indeterminate":
            raise MalformedHistory(f"unresolved or unknown outcome {rec['outcome']!r}")
        if rec["outcome"] == "committed" and not isinstance(rec["commit_ts"], int):
            raise MalformedHistory("committed record without commit_ts")
        if not isinstance(rec["read_ts"], int):
            raise MalformedHistory("read_ts must be an integer")
    return txns


def _witness(rule, message, rec=None, index=None, **extra) -> dict:
    w = {"rule": rule, "message": message, "event_index": index}
    if rec is not None:
        w.update(client=rec["client"], seq=rec["seq"], read_ts=rec["read_ts"], commit_ts=rec["commit_ts"])
    w.update(extra)
    return w


def _check_real_time(committed) -> Optional[dict]:
    """Non-overlapping pairs: an earlier commit must be in a later snapshot."""
    by_end = sorted(committed, key=lambda r: r[0]["commit_end"])
    by_begin = sorted(committed, key=lambda r: r[0]["begin_start"])
    best = None
    i = 0
    for rec, _, _ in by_begin:
        while i < len(by_end) and by_end[i][0]["commit_end"] < rec["begin_start"]:
            cand = by_end[i][0]
            if best is None or cand["commit_ts"] > best["commit_ts"]:
                best = cand
            i += 1
        if best is not None and best["commit_ts"] > rec["read_ts"]:
            return _witness(
                "real-time",
                f"began after a commit at {best['commit_ts']} returned but read at {rec['read_ts']}",
                rec, earlier_client=best["client"], earlier_seq=best["seq"],
            )
    return None


def check_strict_serializability(history) -> "Valid | Violation":
    """Return :class:`Valid` or the first :class:`Violation` found.

    Raises :class:`MalformedHistory` for structurally broken input.
    """
    txns = _validate_shape(history)
    committed = []
    for rec in txns:
        if rec["outcome"] != "committed":
            continue
        events = _decode_events(rec)
        is_update = any(ev[0] in UPDATE_EVENTS for ev in events)
        committed.append((rec, events, is_update))

    seen_ts = {}
    for rec, _, is_update in committed:
        ts, rts = rec["commit_ts"], rec["read_ts"]
        if is_update:
            if ts <= rts:
                return Violation(_witness("commit-order", f"update committed at {ts} not after its snapshot {rts}", rec))
            if ts in seen_ts:
                other = seen_ts[ts]
                return Violation(_witness("commit-order", f"two updates committed at {ts}", rec,
                                          other_client=other["client"], other_seq=other["seq"]))
            seen_ts[ts] = rec
        elif ts < rts:
            return Violation(_witness("commit-order", f"read-only txn committed at {ts} before its snapshot {rts}", rec))

    witness = _check_real_time(committed)
    if witness is not None:
        return Violation(witness)

    oracle = Oracle()
    order = sorted(committed, key=lambda c: (c[0]["commit_ts"], 0 if c[2] else 1, c[0]["client"], c[0]["seq"]))
    for rec, events, _ in order:
        created = {int(k): v for k, v in (rec.get("created") or {}).items()}
        view = _TxnView(oracle, created)
        for i, ev in enumerate(events):
            try:
                view.apply(ev)
            except _Found as found:
                return Violation(_witness(found.rule, found.message, rec, i, **found.extra), oracle)
        view.commit(rec["commit_ts"])
    return Valid(len(committed), oracle)


def replay_state(history, block_size: Optional[int] = None) -> dict:
    """Final state of a valid history in ``Backend.dump()`` form."""
    verdict = check_strict_serializability(history)
    if not verdict:
        raise ValueError(verdict.describe())
    return verdict.state.dump(block_size or history["block_size"])
