"""Command line entry points: ``serve``, ``bench``, ``check`` and ``dump``.

Exit codes: 0 success, 1 operational error, 2 correctness violation.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import signal
import sys

from .backend import Backend
from .errors import TransportError
from .harness.checker import MalformedHistory, check_strict_serializability
from .harness.history import load, save
from .harness.workload import PLOT_COLUMNS, WorkloadConfig, run_workload, smoke_throughput
from .model import CachePolicy, VersioningMode
from .wire import RemoteBackend, Server, parse_address

OK, OPERATIONAL, VIOLATION = 0, 1, 2

MODE_FLAGS = {m.value: m for m in VersioningMode}
POLICY_FLAGS = {p.value: p for p in CachePolicy}


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; that code is reserved here."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(OPERATIONAL, f"{self.prog}: error: {message}\n")


def _undo_window(text):
    return None if text == "all" else int(text)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="txnfs", description="Transactional shared file system tools.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    serve = sub.add_parser("serve", help="run a backend speaking the wire protocol")
    serve.add_argument("--listen", default="127.0.0.1:7070", help="HOST:PORT (port 0 picks a free one)")
    serve.add_argument("--mode", choices=sorted(MODE_FLAGS), default="block")
    serve.add_argument("--block-size", type=int, default=1024)
    serve.add_argument("--undo-window", type=_undo_window, default=1024,
                       help="commits of undo history to keep, or 'all'")

    bench = sub.add_parser("bench", help="run the hot-block workload and check its history")
    where = bench.add_mutually_exclusive_group(required=True)
    where.add_argument("--embedded", action="store_true", help="in-process backend")
    where.add_argument("--connect", metavar="HOST:PORT", help="fresh backend started with serve")
    bench.add_argument("--config", help="WorkloadConfig JSON; flags given explicitly override it")
    bench.add_argument("--clients", type=int)
    bench.add_argument("--duration", type=float, help="seconds")
    bench.add_argument("--txns", type=int, help="total transaction count (overrides --duration)")
    bench.add_argument("--seed", type=int)
    bench.add_argument("--mode", choices=sorted(MODE_FLAGS))
    bench.add_argument("--policy", choices=sorted(POLICY_FLAGS))
    bench.add_argument("--think-time", type=float, help="ms between transactions")
    bench.add_argument("--readonly-clients", type=int)
    bench.add_argument("--rpc-latency", type=float, help="ms added per backend call")
    bench.add_argument("--undo-window", type=_undo_window)
    bench.add_argument("--compare-modes", action="store_true", help="one run per versioning mode")
    bench.add_argument("--smoke", type=int, metavar="N", default=0,
                       help="also time an N-commit single-client loop")
    bench.add_argument("--out", required=True, help="output directory")

    check = sub.add_parser("check", help="check a recorded history")
    check.add_argument("history")

    dump = sub.add_parser("dump", help="print the latest state of a running backend")
    dump.add_argument("--connect", metavar="HOST:PORT", required=True)
    return parser


# -- serve -----------------------------------------------------------------


def cmd_serve(args) -> int:
    backend = Backend(MODE_FLAGS[args.mode], args.block_size, args.undo_window)
    try:
        server = Server(parse_address(args.listen), backend)
    except (OSError, ValueError) as exc:
        print(f"txnfs serve: cannot listen on {args.listen}: {exc}", file=sys.stderr)
        return OPERATIONAL
    host, port = server.server_address[:2]
    print(f"listening on {host}:{port} mode={args.mode} block_size={args.block_size}", flush=True)

    def stop(signum, frame):
        raise KeyboardInterrupt

    signal.signal(signal.SIGTERM, stop)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return OK


# -- bench -----------------------------------------------------------------


def _bench_config(args) -> WorkloadConfig:
    base = {}
    if args.config:
        with open(args.config) as fh:
            base = json.load(fh)
    overrides = {
        "clients": args.clients,
        "duration": args.duration,
        "txns": args.txns,
        "seed": args.seed,
        "mode": args.mode and MODE_FLAGS[args.mode],
        "policy": args.policy and POLICY_FLAGS[args.policy],
        "think_time": args.think_time,
        "readonly_clients": args.readonly_clients,
        "rpc_latency": args.rpc_latency,
        "undo_window": args.undo_window,
    }
    base.update({k: v for k, v in overrides.items() if v is not None})
    return WorkloadConfig.from_dict(base)


def _verify(history, final_dump):
    """Check a history and, when given, compare the backend state with the replay."""
    verdict = check_strict_serializability(history)
    if not verdict:
        return {"valid": False, "witness": verdict.witness, "message": verdict.describe()}
    state = verdict.state.dump(history["block_size"])
    if final_dump is not None and state != final_dump:
        return {"valid": False, "witness": {"rule": "final-state"},
                "message": "final-state: backend state differs from the serial replay"}
    return {"valid": True, "committed": verdict.committed}


def cmd_bench(args) -> int:
    cfg = _bench_config(args)
    modes = list(VersioningMode) if args.compare_modes else [cfg.mode]
    if args.connect and args.compare_modes:
        print("txnfs bench: --compare-modes needs --embedded (the server fixes the mode)", file=sys.stderr)
        return OPERATIONAL
    os.makedirs(args.out, exist_ok=True)

    runs, histories, checks = [], {}, []
    for mode in modes:
        cfg.mode = mode
        if args.connect:
            addr = parse_address(args.connect)
            probe = RemoteBackend(addr)
            if probe.current_read_timestamp() != 0:
                print("txnfs bench: --connect needs a fresh backend", file=sys.stderr)
                return OPERATIONAL
            factory = lambda: RemoteBackend(addr)  # noqa: E731
        else:
            probe = Backend(cfg.mode, cfg.block_size, cfg.undo_window)
            factory = lambda: probe  # noqa: E731
        metrics, history = run_workload(cfg, factory)
        label = metrics.mode
        runs.append(metrics)
        histories[label] = history
        checks.append(dict(mode=label, **_verify(history, probe.dump())))

    doc = {"config": cfg.to_dict(), "runs": [m.to_dict() for m in runs], "checker": checks}
    if args.compare_modes:
        doc["config"]["mode"] = None
    if args.smoke:
        doc["smoke"] = smoke_throughput(args.smoke, cfg.block_size)
    with open(os.path.join(args.out, "metrics.json"), "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
    if len(histories) == 1:
        save(next(iter(histories.values())), os.path.join(args.out, "history.json"))
    else:
        save({"histories": histories}, os.path.join(args.out, "history.json"))
    with open(os.path.join(args.out, "plot.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(PLOT_COLUMNS)
        for m in runs:
            writer.writerow([getattr(m, c) for c in PLOT_COLUMNS])

    for m in runs:
        print(f"{m.mode:9s} clients={m.clients} commits={m.commits} aborts={m.aborts} "
              f"committed/s={m.committed_per_sec:.1f} abort_rate={m.abort_rate:.4f}")
    failed = [c for c in checks if not c["valid"]]
    for c in failed:
        print(f"VIOLATION [{c['mode']}] {c['message']}", file=sys.stderr)
        print(json.dumps(c["witness"], sort_keys=True), file=sys.stderr)
    return VIOLATION if failed else OK


# -- check / dump ----------------------------------------------------------


def cmd_check(args) -> int:
    try:
        doc = load(args.history)
        histories = doc["histories"] if isinstance(doc, dict) and "histories" in doc else {"": doc}
        if not isinstance(histories, dict):
            raise MalformedHistory("'histories' must be an object")
        verdicts = {label: check_strict_serializability(h) for label, h in histories.items()}
    except (OSError, ValueError, KeyError, TypeError) as exc:
        print(f"txnfs check: unusable history: {exc}", file=sys.stderr)
        return OPERATIONAL
    status = OK
    for label, verdict in verdicts.items():
        prefix = f"[{label}] " if label else ""
        if verdict:
            print(f"{prefix}valid: {verdict.committed} committed transactions")
        else:
            status = VIOLATION
            print(f"{prefix}VIOLATION {verdict.describe()}")
            print(json.dumps(verdict.witness, sort_keys=True))
    return status


def cmd_dump(args) -> int:
    try:
        with RemoteBackend(parse_address(args.connect)) as remote:
            state = remote.dump()
    except (TransportError, OSError, ValueError) as exc:
        print(f"txnfs dump: {exc}", file=sys.stderr)
        return OPERATIONAL
    print(json.dumps(state, indent=2, sort_keys=True))
    return OK


COMMANDS = {"serve": cmd_serve, "bench": cmd_bench, "check": cmd_check, "dump": cmd_dump}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (TransportError, ValueError, OSError) as exc:
        print(f"txnfs {args.command}: {exc}", file=sys.stderr)
        return OPERATIONAL


if __name__ == "__main__":
    sys.exit(main())
