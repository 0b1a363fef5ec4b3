"""Command-line entry point.

Exit codes: 0 success, 1 domain error (invalid graph or config, rejected
request), 2 environment error (I/O, sockets).
"""
from __future__ import annotations

import argparse
import logging
import os
import signal
import sys
import threading
import time

from . import __version__
from .adaptation import (
    DECISION_HEADER, STRATEGIES, AdaptationError, ControllerParams, apply_controller, profile_from_graph,
)
from .behaviors import builtin_registry
from .control import ControlServer, send_command
from .engine import METRICS_HEADER, EngineError, default_alpha, deploy
from .graph import GraphSyntaxError, load_graph, validate_graph
from .message import Message
from .simulator import SimConfigError, load_sim_config, write_outputs

EXIT_OK, EXIT_DOMAIN, EXIT_ENV = 0, 1, 2

logger = logging.getLogger("pelletflow")


def _err(msg: str) -> None:
    print(msg, file=sys.stderr)


def cmd_validate(args) -> int:
    try:
        g = load_graph(args.path)
    except OSError as exc:
        _err(f"error:{args.path}:{exc.strerror or exc}")
        return EXIT_ENV
    except UnicodeDecodeError:
        _err(f"error:{args.path}:file is not UTF-8")
        return EXIT_DOMAIN
    except GraphSyntaxError as exc:
        _err(f"error:line {exc.line} col {exc.column}:{exc.message}")
        return EXIT_DOMAIN
    report = validate_graph(g)
    for d in report.diagnostics:
        _err(str(d))
    return EXIT_OK if report.ok else EXIT_DOMAIN


def _containers(text: str) -> list[int]:
    try:
        caps = [int(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"--cores takes comma-separated integers, got {text!r}") from None
    if not caps or any(c < 1 for c in caps):
        raise argparse.ArgumentTypeError("container core counts must be positive")
    return caps


def _feeder(df, rate: float, stop: threading.Event):
    sources = [(pid, df.flakes[pid].in_ports[0]) for pid in df.graph.sources() if df.flakes[pid].in_ports]
    if not sources or rate <= 0:
        return
    n = 0
    start = time.monotonic()
    while not stop.is_set() and df.running:
        due = int((time.monotonic() - start) * rate)
        while n < due and df.running:
            n += 1
            for pid, port in sources:
                try:
                    df.ingest(pid, port, Message(payload=f"msg-{n}".encode(), key=f"k{n % 97}".encode()))
                except EngineError:
                    return
        stop.wait(min(0.05, 1.0 / rate))


def cmd_run(args) -> int:
    try:
        g = load_graph(args.graph)
    except OSError as exc:
        _err(f"error:{args.graph}:{exc.strerror or exc}")
        return EXIT_ENV
    except GraphSyntaxError as exc:
        _err(f"error:line {exc.line} col {exc.column}:{exc.message}")
        return EXIT_DOMAIN
    report = validate_graph(g)
    if not report.ok:
        for d in report.errors:
            _err(str(d))
        return EXIT_DOMAIN
    profile = None
    if args.strategy in ("static", "hybrid"):
        try:
            profile = profile_from_graph(g, args.rate, args.duration, epsilon=args.tolerance,
                                         alpha=args.alpha or 4, period=args.period)
        except AdaptationError as exc:
            _err(f"error:{args.graph}:{args.strategy} strategy needs hints: {exc}")
            return EXIT_DOMAIN
    if args.alpha is not None:
        alpha = args.alpha
    else:
        try:
            alpha = default_alpha()
        except ValueError as exc:
            _err(f"error:FLOE_ALPHA:{exc}")
            return EXIT_DOMAIN
    try:
        df = deploy(g, builtin_registry(), args.cores, alpha=alpha)
    except EngineError as exc:
        _err(f"error:deploy:{exc}")
        return EXIT_DOMAIN

    done = threading.Event()
    server = None
    if args.control_socket:
        server = ControlServer(df, args.control_socket, on_shutdown=done.set)
        try:
            server.start()
        except OSError as exc:
            _err(f"error:{args.control_socket}:cannot bind control socket: {exc.strerror or exc}")
            df.shutdown(drain=False)
            return EXIT_ENV

    metrics_fh = None
    if args.metrics_out:
        try:
            metrics_fh = sys.stdout if args.metrics_out == "-" else open(args.metrics_out, "w", encoding="utf-8")
        except OSError as exc:
            _err(f"error:{args.metrics_out}:{exc.strerror or exc}")
            if server:
                server.stop()
            df.shutdown(drain=False)
            return EXIT_ENV
        metrics_fh.write(METRICS_HEADER + "\n")
        metrics_fh.flush()

    task = None
    if args.strategy != "none":
        params = ControllerParams.for_rate(args.rate, interval=args.interval)
        task = apply_controller(df, args.strategy, params, profile)

    def _signal(signum, frame):
        done.set()

    if threading.current_thread() is threading.main_thread():
        signal.signal(signal.SIGINT, _signal)
        signal.signal(signal.SIGTERM, _signal)

    stop_feed = threading.Event()
    feeder = threading.Thread(target=_feeder, args=(df, args.feed_rate, stop_feed), daemon=True)
    feeder.start()
    deadline = time.monotonic() + args.run_for if args.run_for else None
    try:
        while not done.is_set():
            wait = args.interval
            if deadline is not None:
                left = deadline - time.monotonic()
                if left <= 0:
                    break
                wait = min(wait, left)
            done.wait(wait)
            if metrics_fh is not None and df.running:
                for row in df.metrics_rows():
                    metrics_fh.write(row + "\n")
                metrics_fh.flush()
    finally:
        stop_feed.set()
        feeder.join(timeout=2)
        if task is not None:
            task.stop()
        if server is not None:
            server.stop()
        final = df.shutdown(drain=True, timeout=10)
        if metrics_fh is not None and metrics_fh is not sys.stdout:
            metrics_fh.close()
    total = sum(m.processed_total for m in final.values())
    _err(f"stopped: {len(final)} pellets, {total} messages processed")
    return EXIT_OK


def cmd_simulate(args) -> int:
    try:
        cfg = load_sim_config(args.config)
    except OSError as exc:
        _err(f"error:{args.config}:{exc.strerror or exc}")
        return EXIT_ENV
    except (SimConfigError, GraphSyntaxError, ValueError) as exc:
        _err(f"error:{args.config}:{exc}")
        return EXIT_DOMAIN
    report = cfg.run()
    try:
        write_outputs(report, args.out)
        for s, tr in report.traces.items():
            path = os.path.join(args.out, f"decisions_{s}.csv")
            with open(path, "w", encoding="utf-8", newline="") as fh:
                fh.write(DECISION_HEADER + "\n")
                fh.writelines(row + "\n" for row in tr.decisions)
    except OSError as exc:
        _err(f"error:{args.out}:{exc.strerror or exc}")
        return EXIT_ENV
    sys.stdout.write(report.summary_csv())
    return EXIT_OK


def cmd_ctl(args) -> int:
    line = " ".join([args.verb] + list(args.args))
    try:
        reply = send_command(args.socket, line, timeout=args.timeout)
    except (OSError, ConnectionError) as exc:
        _err(f"error:{args.socket}:{getattr(exc, 'strerror', None) or exc}")
        return EXIT_ENV
    status, _, payload = reply.partition(" ")
    if status == "OK":
        if args.verb == "stats":
            for row in payload.split(";"):
                print(row)
        elif payload:
            print(payload)
        return EXIT_OK
    _err(reply)
    return EXIT_DOMAIN


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pelletflow", description="Continuous dataflow engine and simulator.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a .graph file")
    p.add_argument("path")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("run", help="deploy and run a graph")
    p.add_argument("graph")
    p.add_argument("--strategy", choices=STRATEGIES + ("none",), default="dynamic")
    p.add_argument("--alpha", type=int, default=None, help="instances per core (default: $FLOE_ALPHA or 4)")
    p.add_argument("--cores", type=_containers, default=[16, 16],
                   help="container core counts (default 16,16)")
    p.add_argument("--control-socket", default=None)
    p.add_argument("--metrics-out", default=None, help="metrics CSV path, '-' for stdout")
    p.add_argument("--interval", type=float, default=1.0, help="controller/metrics interval in seconds")
    p.add_argument("--rate", type=float, default=4.0, help="hinted input rate (msg/s)")
    p.add_argument("--duration", type=float, default=60.0, help="hinted data duration t (s)")
    p.add_argument("--period", type=float, default=None, help="hinted burst period (s)")
    p.add_argument("--tolerance", type=float, default=20.0, help="latency tolerance (s)")
    p.add_argument("--feed-rate", type=float, default=0.0, help="synthetic messages/s into each source")
    p.add_argument("--run-for", type=float, default=None, help="stop after this many seconds")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("simulate", help="run a simulation config")
    p.add_argument("config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("ctl", help="send a control command to a running dataflow")
    p.add_argument("socket")
    p.add_argument("verb")
    p.add_argument("args", nargs="*")
    p.add_argument("--timeout", type=float, default=60.0)
    p.set_defaults(func=cmd_ctl)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "alpha", None) is not None and args.alpha < 1:
        _err("error:--alpha:must be a positive integer")
        return EXIT_DOMAIN
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
