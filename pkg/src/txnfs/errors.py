"""Exception types shared by the backend, the client and the wire layer.

File system errors reuse the builtin ``OSError`` family so callers can write
ordinary ``except FileNotFoundError`` handlers.
"""
import errno
import os


class TxnfsError(Exception):
    """Base class for errors raised by this package (not the OSError family)."""


class SnapshotTooOld(TxnfsError):
    """The requested version is no longer (or never was) servable."""


class ProtocolError(TxnfsError):
    """A request was malformed and was rejected before validation."""


class MalformedFrame(ProtocolError):
    pass


class TransportError(TxnfsError):
    """The backend could not be reached or the reply was lost."""


class TransactionAborted(TxnfsError):
    def __init__(self, reason, detail=None):
        super().__init__(f"{reason.value}: {detail!r}" if detail is not None else reason.value)
        self.reason = reason
        self.detail = detail


class TransactionClosed(TxnfsError):
    """An operation was issued on a committed or aborted transaction."""


def fs_error(code: int, path=None) -> OSError:
    """Build the matching ``OSError`` subclass for ``code``."""
    if path is None:
        return OSError(code, os.strerror(code))
    return OSError(code, os.strerror(code), path)


def not_found(path):
    return fs_error(errno.ENOENT, path)


def not_a_directory(path):
    return fs_error(errno.ENOTDIR, path)
