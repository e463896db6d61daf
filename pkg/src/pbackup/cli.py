"""Command-line entry point.

Exit codes: 0 success, 1 unexpected failure, 2 invalid config/spec or
arguments, 3 listen port busy, 4 node unreachable.
"""
from __future__ import annotations

import argparse
import asyncio
import csv
import dataclasses
import errno
import json
import logging
import os
import signal
import sys
from pathlib import Path

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_PORT, EXIT_UNREACHABLE = 0, 1, 2, 3, 4

log = logging.getLogger("pbackup")


def _emit_rows(rows: list[dict], fmt: str, out=None) -> None:
    out = out or sys.stdout
    if fmt == "csv":
        if rows:
            w = csv.DictWriter(out, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
        return
    for r in rows:
        print("  ".join(f"{k}={v}" for k, v in r.items()), file=out)


def cmd_keygen(args) -> int:
    from .tcp import Identity

    path = Path(args.path)
    if path.exists() and not args.force:
        print(f"error: {path} exists (use --force to overwrite)", file=sys.stderr)
        return EXIT_CONFIG
    ident = Identity.generate()
    ident.save(path)
    print(ident.peer.hex())
    return EXIT_OK


def cmd_node_run(args) -> int:
    from .daemon import ConfigError, Daemon, load_config, parse_addr
    from .tcp import Identity

    try:
        cfg = load_config(args.config)
        if args.listen:
            cfg.listen = parse_addr(args.listen)
        if args.data_dir:
            cfg.data_dir = Path(args.data_dir).resolve()
        identity = Identity.load(cfg.key)
    except (ConfigError, ValueError) as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    async def main() -> int:
        daemon = Daemon(cfg, identity, rebuild=args.rebuild)
        loop = asyncio.get_running_loop()
        for sig in (signal.SIGTERM, signal.SIGINT):
            loop.add_signal_handler(sig, daemon.stopping.set)
        try:
            await daemon.start()
        except OSError as exc:
            daemon.close_state()
            if exc.errno == errno.EADDRINUSE:
                print(f"error: {cfg.listen[0]}:{cfg.listen[1]} already in use", file=sys.stderr)
                return EXIT_PORT
            raise
        print(f"node {identity.peer.hex()} listening on {cfg.listen[0]}:{cfg.listen[1]}", flush=True)
        try:
            await daemon.stopping.wait()
        finally:
            await daemon.stop()
        return EXIT_OK

    return asyncio.run(main())


def cmd_simulate(args) -> int:
    from .sim.experiments import SpecError, load_spec, report_geo_window, report_placement_experiment, \
        report_synchro_table, run, write_reports

    try:
        spec = load_spec(args.spec)
        if args.seed is not None:
            spec = dataclasses.replace(spec, seed=args.seed)
    except (SpecError, OSError, ValueError, TypeError) as exc:
        print(f"error: invalid spec: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    metrics = run(spec)
    written = write_reports(metrics, args.out, spec)
    if spec.kind == "synchro_sweep":
        rows = report_synchro_table(metrics)
    elif metrics.of("placement"):
        rows = [report_geo_window(metrics)]
    else:
        rows = report_placement_experiment(metrics)
    _emit_rows(rows, args.format)
    if args.format != "csv":
        print(f"wrote {len(written)} files to {args.out}")
    return EXIT_OK


def _status_rows(st: dict) -> list[dict]:
    rows = [{"section": "node", "key": "peer", "value": st.get("peer", "")}]
    for k in ("chunks", "replicas", "replica_bytes", "worst_utility", "pending_async", "catalog_lost"):
        if k in st:
            rows.append({"section": "node", "key": k, "value": st[k]})
    for state, n in sorted(st.get("contracts_by_state", {}).items()):
        rows.append({"section": "contracts_by_state", "key": state, "value": n})
    for chunk, peer, state, acked in st.get("contracts", []):
        rows.append({"section": "contract", "key": f"{chunk} {peer}", "value": f"{state} v{acked}"})
    for peer in st.get("members", []):
        rows.append({"section": "member", "key": peer, "value": ""})
    return rows


def cmd_status(args) -> int:
    from .daemon import ConfigError, parse_addr, query_status
    from .wire import FrameError

    try:
        addr = parse_addr(args.addr)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        st = asyncio.run(query_status(addr, args.timeout))
    except (OSError, ConnectionError, asyncio.TimeoutError, asyncio.IncompleteReadError, FrameError) as exc:
        print(f"error: {args.addr} unreachable: {exc or type(exc).__name__}", file=sys.stderr)
        return EXIT_UNREACHABLE
    if args.format == "json":
        print(json.dumps(st, indent=2, sort_keys=True))
    elif args.format == "csv":
        _emit_rows(_status_rows(st), "csv")
    else:
        print(f"peer      {st['peer']}")
        print(f"chunks    {st['chunks']}   replicas held {st.get('replicas', 0)} ({st.get('replica_bytes', 0)} bytes)")
        states = ", ".join(f"{k} {v}" for k, v in sorted(st["contracts_by_state"].items())) or "none"
        print(f"contracts {states}")
        print(f"worst utility {st.get('worst_utility')}")
        print(f"pending async {st.get('pending_async', 0)}")
        for chunk, peer, state, acked in st["contracts"]:
            print(f"  {chunk} -> {peer[:16]} {state} v{acked}")
        if st.get("members"):
            print(f"members   {len(st['members'])}")
            for p in st["members"]:
                print(f"  {p}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pbackup", description="peer-to-peer backup with replication contracts")
    sub = p.add_subparsers(dest="command", required=True)

    kg = sub.add_parser("keygen", help="create a node identity key")
    kg.add_argument("path")
    kg.add_argument("--force", action="store_true")
    kg.set_defaults(func=cmd_keygen)

    node = sub.add_parser("node", help="live node commands")
    nsub = node.add_subparsers(dest="node_command", required=True)
    run = nsub.add_parser("run", help="run a node daemon")
    run.add_argument("config")
    run.add_argument("--listen", help="override the listen address (host:port)")
    run.add_argument("--data-dir", help="override the data directory")
    run.add_argument("--rebuild", action="store_true",
                     help="local catalog was lost: rebuild it from replicators and restore owned data")
    run.set_defaults(func=cmd_node_run)

    sim = sub.add_parser("simulate", help="run a simulated experiment")
    sim.add_argument("spec")
    sim.add_argument("--out", required=True)
    sim.add_argument("--seed", type=int)
    sim.add_argument("--format", choices=("text", "csv"), default="text")
    sim.set_defaults(func=cmd_simulate)

    st = sub.add_parser("status", help="query a running node")
    st.add_argument("addr", help="host:port")
    st.add_argument("--format", choices=("text", "csv", "json"), default="text")
    st.add_argument("--timeout", type=float, default=5.0)
    st.set_defaults(func=cmd_status)
    return p


def main(argv: list[str] | None = None) -> int:
    level = os.environ.get("PB_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
