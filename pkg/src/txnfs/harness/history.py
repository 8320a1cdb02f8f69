"""Per-transaction history records and their JSON form.

A history is a dict::

    {"block_size": int, "mode": str, "txns": [record, ...]}

and each record holds the client id, a per-client sequence number, the read
and commit timestamps, wall-clock (monotonic) begin/commit instants, the
outcome and the list of observation events the client recorded. Byte
payloads inside events are base64 strings so the whole thing is plain JSON.
"""
import base64
import json
import threading

OUTCOMES = ("committed", "aborted", "indeterminate")

# event kind -> index of its bytes payload
_PAYLOAD_AT = {"read": 4, "write": 3}


def encode_event(ev):
    idx = _PAYLOAD_AT.get(ev[0])
    if idx is None:
        return list(ev)
    out = list(ev)
    out[idx] = base64.b64encode(out[idx]).decode("ascii")
    return out


def decode_event(ev):
    idx = _PAYLOAD_AT.get(ev[0])
    if idx is None:
        return list(ev)
    out = list(ev)
    out[idx] = base64.b64decode(out[idx])
    return out


def txn_record(client, seq, txn, outcome=None):
    """Build a record from a finished :class:`~txnfs.client.Txn`."""
    result = txn.result
    if outcome is None:
        outcome = txn.state.value
    created = {}
    if result is not None and result.created:
        created = {str(k): v for k, v in result.created.items()}
    return {
        "client": client,
        "seq": seq,
        "read_ts": txn.read_ts,
        "begin_start": txn.begin_started,
        "begin_end": txn.begin_ended,
        "commit_start": txn.commit_started,
        "commit_end": txn.commit_ended,
        "outcome": outcome,
        "commit_ts": result.commit_ts if result is not None and result.committed else None,
        "reason": result.reason.value if result is not None and result.reason is not None else None,
        "read_only": txn.read_only,
        "created": created,
        "events": [encode_event(e) for e in (txn.events or [])],
    }


class HistoryRecorder:
    """Thread-safe collector used by the workload driver."""

    def __init__(self, block_size, mode):
        self.block_size = block_size
        self.mode = mode
        self._txns = []
        self._lock = threading.Lock()

    def add(self, record):
        with self._lock:
            self._txns.append(record)

    def to_dict(self):
        with self._lock:
            txns = sorted(self._txns, key=lambda r: (r["begin_start"], r["client"], r["seq"]))
        return {"block_size": self.block_size, "mode": self.mode, "txns": txns}


def save(history, path):
    with open(path, "w") as fh:
        json.dump(history, fh)


def load(path):
    with open(path) as fh:
        return json.load(fh)
