"""Length-prefixed JSON protocol between clients and the backend.

A frame is a 4-byte big-endian body length followed by a UTF-8 JSON object
whose ``"t"`` field names the message kind. Keys are sorted so encodings are
byte-stable; block bytes travel as base64 text.
"""
from __future__ import annotations

import base64
import json
import logging
import socket
import socketserver
import struct
import threading
from typing import List, Optional, Tuple

from .errors import MalformedFrame, ProtocolError, SnapshotTooOld, TransportError
from .model import (
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
)

log = logging.getLogger(__name__)

KINDS = frozenset({"begin", "get_block", "get_meta", "list_dir", "commit", "feed", "gc", "dump"})
HEADER = struct.Struct(">I")
MAX_FRAME = 64 * 1024 * 1024


def encode(msg: dict) -> bytes:
    body = json.dumps(msg, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    return HEADER.pack(len(body)) + body


def decode(buf: bytes) -> Optional[Tuple[dict, int]]:
    """Decode one frame from the front of ``buf``.

    Returns ``(message, consumed)``, or None if the frame is not complete yet.
    """
    if len(buf) < HEADER.size:
        return None
    (length,) = HEADER.unpack_from(buf)
    if length > MAX_FRAME:
        raise MalformedFrame(f"frame of {length} bytes exceeds the limit")
    end = HEADER.size + length
    if len(buf) < end:
        return None
    try:
        msg = json.loads(bytes(buf[HEADER.size:end]).decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise MalformedFrame(f"invalid body: {exc}") from None
    if not isinstance(msg, dict):
        raise MalformedFrame("body is not a JSON object")
    if msg.get("t") not in KINDS:
        raise MalformedFrame(f"unknown kind {msg.get('t')!r}")
    return msg, end


class FrameDecoder:
    """Incremental decoder for a byte stream carrying back-to-back frames."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> List[dict]:
        self._buf += data
        out = []
        while True:
            got = decode(self._buf)
            if got is None:
                return out
            msg, used = got
            del self._buf[:used]
            out.append(msg)

    @property
    def pending(self) -> int:
        return len(self._buf)


# -- value mapping ----------------------------------------------------------


def b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def unb64(text: str) -> bytes:
    return base64.b64decode(text.encode("ascii"), validate=True)


def meta_to_wire(meta: Optional[FileMeta]):
    if meta is None:
        return None
    return {"id": meta.file_id, "len": meta.length, "mode": meta.mode, "kind": meta.kind.value, "ver": meta.meta_version}


def meta_from_wire(d) -> Optional[FileMeta]:
    if d is None:
        return None
    return FileMeta(d["id"], d["len"], d["mode"], FileKind(d["kind"]), d["ver"])


def _op_to_wire(op) -> dict:
    if isinstance(op, Create):
        return {"op": "create", "path": op.path, "tmp": op.tmp_id, "mode": op.mode}
    if isinstance(op, Mkdir):
        return {"op": "mkdir", "path": op.path, "tmp": op.tmp_id, "mode": op.mode}
    if isinstance(op, Unlink):
        return {"op": "unlink", "path": op.path}
    if isinstance(op, Rename):
        return {"op": "rename", "old": op.old, "new": op.new}
    return {"op": "setlen", "file": op.file_id, "len": op.length, "grow": op.grow_only}


def _op_from_wire(d: dict):
    kind = d["op"]
    if kind == "create":
        return Create(d["path"], d["tmp"], d["mode"])
    if kind == "mkdir":
        return Mkdir(d["path"], d["tmp"], d["mode"])
    if kind == "unlink":
        return Unlink(d["path"])
    if kind == "rename":
        return Rename(d["old"], d["new"])
    if kind == "setlen":
        return SetLength(d["file"], d["len"], d["grow"])
    raise ProtocolError(f"unknown meta op {kind!r}")


def request_to_wire(req: CommitRequest) -> dict:
    return {
        "read_ts": req.txn_read_ts,
        "reads": [[r.file_id, r.block_no, ts] for r, ts in req.read_set],
        "writes": [[w.block.file_id, w.block.block_no, w.offset, b64(w.data)] for w in req.write_set],
        "meta_reads": [[m.path, m.file_id, m.ts, m.listing] for m in req.meta_reads],
        "ops": [_op_to_wire(op) for op in req.meta_ops],
        "asserts": [[a.file_id, a.kind.value, a.length] for a in req.assertions],
        "tag": req.tag,
    }


def request_from_wire(d: dict) -> CommitRequest:
    try:
        return CommitRequest(
            txn_read_ts=d["read_ts"],
            read_set=[(BlockRef(f, b), ts) for f, b, ts in d["reads"]],
            write_set=[WriteRecord(BlockRef(f, b), off, unb64(data)) for f, b, off, data in d["writes"]],
            meta_reads=[MetaRead(p, fid, ts, bool(listing)) for p, fid, ts, listing in d["meta_reads"]],
            meta_ops=[_op_from_wire(op) for op in d["ops"]],
            assertions=[LengthAssertion(f, AssertKind(k), n) for f, k, n in d["asserts"]],
            tag=d.get("tag"),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ProtocolError(f"malformed commit request: {exc}") from None


def _detail_to_wire(detail):
    if isinstance(detail, BlockRef):
        return {"block": list(detail)}
    return detail


def _detail_from_wire(detail):
    if isinstance(detail, dict) and "block" in detail:
        return BlockRef(*detail["block"])
    return detail


def result_to_wire(res: CommitResult) -> dict:
    if res.committed:
        return {"committed": True, "ts": res.commit_ts, "created": [[k, v] for k, v in sorted(res.created.items())]}
    return {"committed": False, "reason": res.reason.value, "detail": _detail_to_wire(res.detail)}


def result_from_wire(d: dict) -> CommitResult:
    if d["committed"]:
        return CommitResult.ok(d["ts"], {k: v for k, v in d["created"]})
    return CommitResult.abort(AbortKind(d["reason"]), _detail_from_wire(d["detail"]))


def _item_to_wire(item) -> list:
    if isinstance(item, BlockData):
        return ["data", item.block.file_id, item.block.block_no, b64(item.data), item.write_ts]
    if isinstance(item, BlockInvalidate):
        return ["inval", item.block.file_id, item.block.block_no, item.write_ts]
    if isinstance(item, FileInvalidate):
        return ["file", item.file_id]
    if isinstance(item, MetaUpdate):
        return ["meta", meta_to_wire(item.meta)]
    return ["name", item.path]


def _item_from_wire(x: list):
    kind = x[0]
    if kind == "data":
        return BlockData(BlockRef(x[1], x[2]), unb64(x[3]), x[4])
    if kind == "inval":
        return BlockInvalidate(BlockRef(x[1], x[2]), x[3])
    if kind == "file":
        return FileInvalidate(x[1])
    if kind == "meta":
        return MetaUpdate(meta_from_wire(x[1]))
    if kind == "name":
        return NameInvalidate(x[1])
    raise ProtocolError(f"unknown feed item {kind!r}")


def batch_to_wire(batch: CacheUpdateBatch) -> dict:
    return {"upto": batch.upto_ts, "items": [_item_to_wire(i) for i in batch.items]}


def batch_from_wire(d: dict) -> CacheUpdateBatch:
    return CacheUpdateBatch(d["upto"], tuple(_item_from_wire(x) for x in d["items"]))


# -- server -----------------------------------------------------------------


def dispatch(backend, msg: dict) -> dict:
    """Run one request against ``backend`` and build the response message."""
    kind = msg["t"]
    try:
        if kind == "begin":
            ok = {"ts": backend.current_read_timestamp(), "block_size": backend.block_size, "mode": backend.mode.value}
        elif kind == "get_block":
            data, ts = backend.get_block(BlockRef(msg["file"], msg["block"]), msg["at"], msg.get("if_ts"))
            ok = {"data": None if data is None else b64(data), "ts": ts}
        elif kind == "get_meta":
            target = msg["path"] if "path" in msg else msg["id"]
            ok = meta_to_wire(backend.get_meta(target, msg["at"]))
        elif kind == "list_dir":
            ok = [[n, fid, k.value] for n, fid, k in backend.list_dir(msg["path"], msg["at"])]
        elif kind == "commit":
            ok = result_to_wire(backend.validate_and_commit(request_from_wire(msg["req"])))
        elif kind == "feed":
            ok = batch_to_wire(backend.cache_feed(msg["since"], CachePolicy(msg["policy"])))
        elif kind == "gc":
            ok = backend.gc_undo(msg["retain_after"])
        else:
            ok = backend.dump()
    except SnapshotTooOld:
        return {"t": kind, "err": "SnapshotTooOld"}
    except FileNotFoundError as exc:
        return {"t": kind, "err": "NotFound", "msg": str(exc)}
    except NotADirectoryError as exc:
        return {"t": kind, "err": "NotADirectory", "msg": str(exc)}
    except (ProtocolError, KeyError, TypeError, ValueError) as exc:
        return {"t": kind, "err": "ProtocolError", "msg": str(exc)}
    return {"t": kind, "ok": ok}


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        decoder = FrameDecoder()
        sock = self.request
        while True:
            try:
                chunk = sock.recv(65536)
            except OSError:
                return
            if not chunk:
                return
            try:
                msgs = decoder.feed(chunk)
            except MalformedFrame as exc:
                log.warning("closing connection from %s: %s", self.client_address, exc)
                return
            for msg in msgs:
                sock.sendall(encode(dispatch(self.server.backend, msg)))


class Server(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = False

    def __init__(self, address, backend):
        self.backend = backend
        super().__init__(address, _Handler)


def parse_address(text: str) -> Tuple[str, int]:
    host, _, port = text.rpartition(":")
    return host or "127.0.0.1", int(port)


# -- client side ------------------------------------------------------------


class RemoteBackend:
    """Backend proxy speaking the wire protocol over one TCP connection."""

    def __init__(self, address, timeout: float = 30.0):
        if isinstance(address, str):
            address = parse_address(address)
        try:
            self._sock = socket.create_connection(address, timeout=timeout)
        except OSError as exc:
            raise TransportError(str(exc)) from exc
        self._decoder = FrameDecoder()
        self._lock = threading.Lock()
        self.calls: List[str] = []
        hello = self._call({"t": "begin"})
        self.block_size = hello["block_size"]
        self.mode = VersioningMode(hello["mode"])

    def close(self) -> None:
        self._sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _call(self, msg: dict):
        with self._lock:
            self.calls.append(msg["t"])
            try:
                self._sock.sendall(encode(msg))
                while True:
                    chunk = self._sock.recv(65536)
                    if not chunk:
                        raise TransportError("connection closed by backend")
                    replies = self._decoder.feed(chunk)
                    if replies:
                        reply = replies[0]
                        break
            except OSError as exc:
                raise TransportError(str(exc)) from exc
        if "err" in reply:
            err = reply["err"]
            if err == "SnapshotTooOld":
                raise SnapshotTooOld(msg.get("at"))
            if err == "NotFound":
                raise FileNotFoundError(reply.get("msg"))
            if err == "NotADirectory":
                raise NotADirectoryError(reply.get("msg"))
            raise ProtocolError(reply.get("msg", err))
        return reply["ok"]

    def current_read_timestamp(self) -> int:
        return self._call({"t": "begin"})["ts"]

    def get_block(self, ref, at_ts: int, if_write_ts: Optional[int] = None):
        ref = BlockRef(*ref)
        msg = {"t": "get_block", "file": ref.file_id, "block": ref.block_no, "at": at_ts}
        if if_write_ts is not None:
            msg["if_ts"] = if_write_ts
        ok = self._call(msg)
        return (None if ok["data"] is None else unb64(ok["data"])), ok["ts"]

    def get_meta(self, path_or_id, at_ts: int) -> Optional[FileMeta]:
        key = "path" if isinstance(path_or_id, str) else "id"
        return meta_from_wire(self._call({"t": "get_meta", key: path_or_id, "at": at_ts}))

    def list_dir(self, path: str, at_ts: int):
        return [(n, fid, FileKind(k)) for n, fid, k in self._call({"t": "list_dir", "path": path, "at": at_ts})]

    def validate_and_commit(self, req: CommitRequest) -> CommitResult:
        return result_from_wire(self._call({"t": "commit", "req": request_to_wire(req)}))

    def cache_feed(self, since_ts: int, policy: CachePolicy) -> CacheUpdateBatch:
        return batch_from_wire(self._call({"t": "feed", "since": since_ts, "policy": CachePolicy(policy).value}))

    def gc_undo(self, retain_after: int) -> int:
        return self._call({"t": "gc", "retain_after": retain_after})

    def dump(self) -> dict:
        return self._call({"t": "dump"})
