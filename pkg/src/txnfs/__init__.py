"""Transactional shared file system: OCC block backend plus caching client."""
from .backend import Backend
from .client import Mount, Outcome, Txn, run_idempotent
from .errors import SnapshotTooOld, TransactionAborted, TransportError
from .model import (
    DEFAULT_BLOCK_SIZE,
    AbortKind,
    BlockRef,
    CachePolicy,
    CommitResult,
    FileKind,
    FileMeta,
    VersioningMode,
    WriteRecord,
    block_span,
    coalesce_writes,
    merge_read_view,
)

__version__ = "0.1.0"
