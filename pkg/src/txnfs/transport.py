"""In-process transport wrapper: call accounting, latency and fault injection.

Wraps a backend (local or remote) so the client sees the same interface while
tests and the harness observe every round trip.
"""
import random
import threading
import time
from collections import Counter

from .errors import TransportError

# backend method -> wire message kind
CALL_KINDS = {
    "current_read_timestamp": "begin",
    "get_block": "get_block",
    "get_meta": "get_meta",
    "list_dir": "list_dir",
    "validate_and_commit": "commit",
    "cache_feed": "feed",
    "gc_undo": "gc",
    "dump": "dump",
}

MUTATING = frozenset({"commit", "gc"})


class InstrumentedBackend:
    """Proxy a backend, counting calls by wire kind.

    ``latency`` (seconds) is slept before every call to model a network hop.
    ``lose_request`` / ``lose_reply`` are probabilities that a commit fails
    with :class:`TransportError` before reaching the backend or after it was
    applied; results of commits whose reply was lost are kept in
    ``lost_replies`` keyed by the request tag.
    """

    def __init__(self, backend, latency: float = 0.0, lose_request: float = 0.0,
                 lose_reply: float = 0.0, seed=None):
        self._backend = backend
        self.block_size = backend.block_size
        self.mode = backend.mode
        self.latency = latency
        self.lose_request = lose_request
        self.lose_reply = lose_reply
        self._rng = random.Random(seed)
        self._lock = threading.Lock()
        self.calls = Counter()
        self.log = []
        self.lost_replies = {}

    def _hop(self, kind: str) -> None:
        with self._lock:
            self.calls[kind] += 1
            self.log.append(kind)
        if self.latency:
            time.sleep(self.latency)

    def total_calls(self) -> int:
        return sum(self.calls.values())

    def current_read_timestamp(self):
        self._hop("begin")
        return self._backend.current_read_timestamp()

    def get_block(self, ref, at_ts, if_write_ts=None):
        self._hop("get_block")
        return self._backend.get_block(ref, at_ts, if_write_ts)

    def get_meta(self, path_or_id, at_ts):
        self._hop("get_meta")
        return self._backend.get_meta(path_or_id, at_ts)

    def list_dir(self, path, at_ts):
        self._hop("list_dir")
        return self._backend.list_dir(path, at_ts)

    def cache_feed(self, since_ts, policy):
        self._hop("feed")
        return self._backend.cache_feed(since_ts, policy)

    def validate_and_commit(self, req):
        self._hop("commit")
        with self._lock:
            lose_request = self._rng.random() < self.lose_request
            lose_reply = self._rng.random() < self.lose_reply
        if lose_request:
            raise TransportError("request lost")
        result = self._backend.validate_and_commit(req)
        if lose_reply:
            self.lost_replies[req.tag] = result
            raise TransportError("reply lost")
        return result

    def gc_undo(self, retain_after):
        self._hop("gc")
        return self._backend.gc_undo(retain_after)

    def dump(self):
        self._hop("dump")
        return self._backend.dump()
