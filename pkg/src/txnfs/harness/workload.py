"""Multi-client hot-block workload and the metrics it reports.

Each client runs in its own thread with its own :class:`~txnfs.client.Mount`
and its own seeded RNG, so block choices are reproducible for a given seed
no matter how the threads interleave.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import random
import statistics
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

from ..backend import Backend
from ..client import EXCLUSIVE, SHARED, Mount
from ..errors import TransactionAborted
from ..model import CachePolicy, VersioningMode
from ..transport import InstrumentedBackend
from .history import HistoryRecorder, txn_record

DATA_PATH = "/bench.dat"
SETUP_CLIENT = -1
PHASES = ("begin", "ops", "commit")


@dataclass
class WorkloadConfig:
    clients: int = 32
    duration: Optional[float] = 10.0
    txns: Optional[int] = None
    file_size: int = 1 << 20
    block_size: int = 1024
    hot_block_count: int = 20
    hot_probability: float = 0.2
    think_time: float = 10.0
    mode: VersioningMode = VersioningMode.BLOCK_VERSIONED
    policy: CachePolicy = CachePolicy.INVALIDATE_ONLY
    seed: int = 0
    readonly_clients: int = 0
    rpc_latency: float = 0.2
    undo_window: Optional[int] = 1024
    record_history: bool = True

    def __post_init__(self):
        self.mode = VersioningMode(self.mode)
        self.policy = CachePolicy(self.policy)
        if self.clients < 1:
            raise ValueError("clients must be >= 1")
        if self.duration is None and self.txns is None:
            raise ValueError("set duration or txns")
        if self.file_size % self.block_size:
            raise ValueError("file_size must be a multiple of block_size")
        if not 0 <= self.hot_block_count <= self.file_size // self.block_size:
            raise ValueError("hot_block_count exceeds the number of blocks")
        if not 0.0 <= self.hot_probability <= 1.0:
            raise ValueError("hot_probability must be within [0, 1]")
        if not 0 <= self.readonly_clients <= self.clients:
            raise ValueError("readonly_clients out of range")

    @property
    def blocks(self) -> int:
        return self.file_size // self.block_size

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["mode"], d["policy"] = self.mode.value, self.policy.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "WorkloadConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "WorkloadConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class Metrics:
    mode: str
    policy: str
    clients: int
    commits: int
    aborts: int
    elapsed: float
    committed_per_sec: float
    abort_rate: float
    abort_reasons: Dict[str, int]
    latency_ms: Dict[str, Dict[str, float]]
    readonly_commits: int = 0
    readonly_aborts: int = 0
    choice_digest: str = ""
    transport_calls: Dict[str, int] = field(default_factory=dict)
    final_ts: int = 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _percentile(values: List[float], q: float) -> float:
    if not values:
        return 0.0
    if len(values) == 1:
        return values[0]
    return statistics.quantiles(values, n=100, method="inclusive")[q - 1]


def _latency_summary(samples: Dict[str, List[float]]) -> Dict[str, Dict[str, float]]:
    return {
        phase: {"p50": _percentile(v, 50) * 1e3, "p99": _percentile(v, 99) * 1e3}
        for phase, v in samples.items()
    }


def choose_block(rng: random.Random, cfg: WorkloadConfig) -> int:
    """Hot set (first ``hot_block_count`` blocks) with ``hot_probability``, else the rest."""
    hot = cfg.hot_block_count
    if hot and (hot == cfg.blocks or rng.random() < cfg.hot_probability):
        return rng.randrange(hot)
    return rng.randrange(hot, cfg.blocks)


def client_quota(cfg: WorkloadConfig, client: int) -> Optional[int]:
    if cfg.txns is None:
        return None
    base, extra = divmod(cfg.txns, cfg.clients)
    return base + (1 if client < extra else 0)


class _ClientStats:
    def __init__(self):
        self.commits = 0
        self.aborts = 0
        self.reasons: Dict[str, int] = {}
        self.latency = {p: [] for p in PHASES}
        self.choices: List[tuple] = []


def _setup(backend, cfg: WorkloadConfig, recorder: Optional[HistoryRecorder]) -> None:
    mount = Mount(backend, cfg.policy, record=recorder is not None)
    rng = random.Random(f"{cfg.seed}:setup")
    txn = mount.begin()
    fd = txn.open(DATA_PATH, os.O_CREAT | os.O_RDWR)
    txn.pwrite(fd, rng.randbytes(cfg.file_size), 0)
    result = txn.commit()
    if not result.committed:
        raise RuntimeError(f"setup transaction aborted: {result.reason}")
    if recorder is not None:
        recorder.add(txn_record(SETUP_CLIENT, 0, txn))


def _client_loop(client: int, backend, cfg: WorkloadConfig, stats: _ClientStats,
                 recorder: Optional[HistoryRecorder], start: threading.Barrier,
                 deadline_box: list) -> None:
    mount = Mount(backend, cfg.policy, record=recorder is not None)
    rng = random.Random(f"{cfg.seed}:{client}")
    read_only = client < cfg.readonly_clients
    quota = client_quota(cfg, client)
    bs = cfg.block_size
    think = cfg.think_time / 1000.0
    start.wait()
    deadline = deadline_box[0]
    seq = 0
    while True:
        if quota is not None:
            if seq >= quota:
                break
        elif time.monotonic() >= deadline:
            break
        seq += 1
        rb = choose_block(rng, cfg)
        wb = None if read_only else choose_block(rng, cfg)
        payload = None if read_only else rng.randbytes(bs)
        stats.choices.append((rb, wb))

        txn = mount.begin()
        try:
            fd = txn.open(DATA_PATH, os.O_RDONLY if read_only else os.O_RDWR)
            txn.lock(fd, rb * bs, bs, SHARED)
            txn.pread(fd, bs, rb * bs)
            if not read_only:
                txn.lock(fd, wb * bs, bs, EXCLUSIVE)
                txn.pwrite(fd, payload, wb * bs)
                txn.unlock(fd, wb * bs, bs)
            txn.unlock(fd, rb * bs, bs)
            txn.close(fd)
            ops_done = time.monotonic()
            result = txn.commit()
        except TransactionAborted as exc:
            ops_done = txn.commit_started = txn.commit_ended = time.monotonic()
            result = None
            reason = exc.reason.value
        else:
            reason = None if result.committed else result.reason.value
        stats.latency["begin"].append(txn.begin_ended - txn.begin_started)
        stats.latency["ops"].append(ops_done - txn.begin_ended)
        if result is not None:
            stats.latency["commit"].append(txn.commit_ended - txn.commit_started)
        if reason is None:
            stats.commits += 1
        else:
            stats.aborts += 1
            stats.reasons[reason] = stats.reasons.get(reason, 0) + 1
        if recorder is not None:
            recorder.add(txn_record(client, seq, txn))
        if think:
            time.sleep(think)


def choice_digest(per_client: List[List[tuple]]) -> str:
    blob = json.dumps(per_client, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def run_workload(cfg: WorkloadConfig, backend_factory: Optional[Callable[[], object]] = None):
    """Run the workload and return ``(Metrics, history dict or None)``.

    ``backend_factory`` returns the backend each client talks to (called once
    per client plus once for setup); by default all share one new in-process
    :class:`Backend` built from ``cfg``. Every client goes through an
    :class:`InstrumentedBackend` that adds ``cfg.rpc_latency`` ms per call.
    """
    if backend_factory is None:
        shared = Backend(cfg.mode, cfg.block_size, cfg.undo_window)
        backend_factory = lambda: shared  # noqa: E731
    setup_backend = backend_factory()
    mode = setup_backend.mode
    recorder = HistoryRecorder(cfg.block_size, VersioningMode(mode).value) if cfg.record_history else None
    _setup(setup_backend, cfg, recorder)

    latency = cfg.rpc_latency / 1000.0
    transports = [InstrumentedBackend(backend_factory(), latency) for _ in range(cfg.clients)]
    stats = [_ClientStats() for _ in range(cfg.clients)]
    barrier = threading.Barrier(cfg.clients + 1)
    deadline_box = [0.0]
    threads = [
        threading.Thread(
            target=_client_loop,
            args=(c, transports[c], cfg, stats[c], recorder, barrier, deadline_box),
            name=f"client-{c}",
            daemon=True,
        )
        for c in range(cfg.clients)
    ]
    for t in threads:
        t.start()
    started = time.monotonic()
    deadline_box[0] = started + (cfg.duration or 0.0)
    barrier.wait()
    for t in threads:
        t.join()
    elapsed = time.monotonic() - started

    commits = sum(s.commits for s in stats)
    aborts = sum(s.aborts for s in stats)
    reasons: Dict[str, int] = {}
    samples = {p: [] for p in PHASES}
    calls: Dict[str, int] = {}
    for s in stats:
        for k, v in s.reasons.items():
            reasons[k] = reasons.get(k, 0) + v
        for p in PHASES:
            samples[p].extend(s.latency[p])
    for tr in transports:
        for k, v in tr.calls.items():
            calls[k] = calls.get(k, 0) + v
    ro = stats[:cfg.readonly_clients]
    metrics = Metrics(
        mode=VersioningMode(mode).value,
        policy=cfg.policy.value,
        clients=cfg.clients,
        commits=commits,
        aborts=aborts,
        elapsed=elapsed,
        committed_per_sec=commits / elapsed if elapsed > 0 else 0.0,
        abort_rate=aborts / (aborts + commits) if aborts + commits else 0.0,
        abort_reasons=reasons,
        latency_ms=_latency_summary(samples),
        readonly_commits=sum(s.commits for s in ro),
        readonly_aborts=sum(s.aborts for s in ro),
        choice_digest=choice_digest([s.choices for s in stats]),
        transport_calls=calls,
        final_ts=setup_backend.current_read_timestamp(),
    )
    return metrics, (recorder.to_dict() if recorder is not None else None)


def compare_modes(base: WorkloadConfig, modes=tuple(VersioningMode)):
    """One run per versioning mode with otherwise identical config."""
    rows = {}
    for mode in modes:
        cfg = dataclasses.replace(base, mode=mode)
        rows[VersioningMode(mode).value] = run_workload(cfg)
    return rows


PLOT_COLUMNS = ("mode", "clients", "committed_per_sec", "abort_rate")


def plot_rows(metrics: List[Metrics]) -> List[dict]:
    return [{c: getattr(m, c) for c in PLOT_COLUMNS} for m in metrics]


def smoke_throughput(count: int = 500, block_size: int = 1024) -> dict:
    """Single-client in-process commit loop: p50 commit latency and commits/sec."""
    backend = Backend(VersioningMode.BLOCK_VERSIONED, block_size)
    mount = Mount(backend)
    txn = mount.begin()
    fd = txn.open("/smoke", os.O_CREAT | os.O_RDWR)
    txn.pwrite(fd, bytes(block_size * 16), 0)
    txn.commit()
    latencies = []
    payload = bytes(range(256)) * (block_size // 256 + 1)
    started = time.monotonic()
    for i in range(count):
        txn = mount.begin()
        fd = txn.open("/smoke", os.O_RDWR)
        block = i % 16
        txn.pread(fd, block_size, block * block_size)
        txn.pwrite(fd, payload[i % 256:i % 256 + block_size], block * block_size)
        t0 = time.perf_counter()
        result = txn.commit()
        latencies.append(time.perf_counter() - t0)
        if not result.committed:
            raise RuntimeError(f"single-client commit aborted: {result.reason}")
    elapsed = time.monotonic() - started
    return {
        "commits": count,
        "commits_per_sec": count / elapsed if elapsed > 0 else 0.0,
        "p50_commit_latency_ms": statistics.median(latencies) * 1e3,
    }
