"""Line protocol for controlling a running dataflow over a Unix socket.

Requests are single lines ``VERB arg ...``; every request gets exactly one
response line, ``OK <payload>`` or ``ERR <code> <message>``. Multi-row
payloads (``stats``) are joined with ``;``.
"""
from __future__ import annotations

import logging
import os
import shlex
import socket
import stat
import threading

from .dynamism import UpdateError, UpdateRequest, update_pellet, update_subgraph
from .engine import METRICS_HEADER, EngineError
from .graph import GraphSyntaxError, load_graph

logger = logging.getLogger(__name__)

VERBS = ("stats", "set-cores", "update-pellet", "update-subgraph", "shutdown")
MAX_FRAME = 64 * 1024


class ProtocolError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


def _ref(text: str) -> tuple[str, str]:
    pellet, dot, port = text.partition(".")
    if not dot or not pellet or not port:
        raise ProtocolError("usage", f"expected <pellet>.<port>, got {text!r}")
    return pellet, port


def parse_port_map(text: str) -> dict:
    """``B.in=B2.in,C.out=C3.out`` -> {(B, in): (B2, in), ...}."""
    out = {}
    for item in filter(None, text.split(",")):
        old, eq, new = item.partition("=")
        if not eq:
            raise ProtocolError("usage", f"bad port mapping {item!r}")
        out[_ref(old)] = _ref(new)
    return out


class ControlServer:
    """Serves requests one at a time on a background thread."""

    def __init__(self, df, path: str, on_shutdown=None):
        self.df = df
        self.path = path
        self.on_shutdown = on_shutdown
        self.final = None
        self._sock: socket.socket | None = None
        self._thread: threading.Thread | None = None
        self._stop = threading.Event()

    def start(self) -> "ControlServer":
        if os.path.exists(self.path):
            # a stale socket from an earlier run; refuse to clobber anything else
            if not _is_socket(self.path):
                raise OSError(f"{self.path} exists and is not a socket")
            os.unlink(self.path)
        sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        try:
            sock.bind(self.path)
            sock.listen(8)
        except OSError:
            sock.close()
            raise
        sock.settimeout(0.2)
        self._sock = sock
        self._thread = threading.Thread(target=self._serve, daemon=True, name="control")
        self._thread.start()
        return self

    def _serve(self):
        while not self._stop.is_set():
            try:
                conn, _ = self._sock.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            with conn:
                self._session(conn)

    def _session(self, conn: socket.socket):
        conn.settimeout(30)
        buf = b""
        while not self._stop.is_set():
            try:
                chunk = conn.recv(4096)
            except (socket.timeout, OSError):
                return
            if not chunk:
                return
            buf += chunk
            if len(buf) > MAX_FRAME:
                conn.sendall(b"ERR usage frame too long\n")
                return
            while b"\n" in buf:
                line, buf = buf.split(b"\n", 1)
                reply = self.handle(line.decode("utf-8", "replace"))
                try:
                    conn.sendall(reply.encode() + b"\n")
                except OSError:
                    return
                if self._stop.is_set():
                    return

    def handle(self, line: str) -> str:
        try:
            payload = self._dispatch(line.strip())
            return "OK " + payload if payload else "OK"
        except ProtocolError as exc:
            return f"ERR {exc.code} {_one_line(str(exc))}"
        except (UpdateError, EngineError) as exc:
            return f"ERR rejected {_one_line(str(exc))}"
        except GraphSyntaxError as exc:
            return f"ERR bad-fragment {_one_line(str(exc))}"
        except OSError as exc:
            return f"ERR io {_one_line(str(exc))}"
        except Exception as exc:  # keep the server alive
            logger.exception("control request failed: %s", line)
            return f"ERR internal {_one_line(str(exc))}"

    def _dispatch(self, line: str) -> str:
        try:
            words = shlex.split(line)
        except ValueError as exc:
            raise ProtocolError("usage", str(exc)) from None
        if not words:
            raise ProtocolError("usage", "empty request")
        verb, args = words[0], words[1:]
        if verb not in VERBS:
            raise ProtocolError("unknown-verb", f"unknown verb {verb!r}")
        if verb == "stats":
            if self.final is not None:
                rows = [m.csv_row(self.df.clock()) for m in self.final.values()]
            else:
                rows = self.df.metrics_rows()
            return ";".join([METRICS_HEADER] + rows)
        if verb == "set-cores":
            if len(args) != 2:
                raise ProtocolError("usage", "set-cores <pellet> <cores>")
            try:
                cores = int(args[1])
            except ValueError:
                raise ProtocolError("usage", f"cores must be an integer, got {args[1]!r}") from None
            budget = self.df.set_cores(args[0], cores)
            return f"pellet={args[0]} cores={cores} budget={budget}"
        if verb == "update-pellet":
            if len(args) < 2 or len(args) > 4:
                raise ProtocolError("usage", "update-pellet <pellet> <impl> [sync|async] [nolandmark]")
            mode = "sync"
            landmark = True
            for extra in args[2:]:
                if extra in ("sync", "async"):
                    mode = extra
                elif extra == "nolandmark":
                    landmark = False
                else:
                    raise ProtocolError("usage", f"unexpected argument {extra!r}")
            report = update_pellet(self.df, UpdateRequest(args[0], args[1], mode=mode, emit_landmark=landmark))
            return report.line()
        if verb == "update-subgraph":
            if len(args) < 3 or len(args) > 4:
                raise ProtocolError("usage", "update-subgraph <p1,p2,..> <fragment.graph> <old.port=new.port,..> [nolandmark]")
            members = frozenset(filter(None, args[0].split(",")))
            fragment = load_graph(args[1])
            landmark = not (len(args) == 4 and args[3] == "nolandmark")
            if len(args) == 4 and landmark:
                raise ProtocolError("usage", f"unexpected argument {args[3]!r}")
            req = UpdateRequest(members, fragment=fragment, port_map=parse_port_map(args[2]),
                                emit_landmark=landmark)
            return update_subgraph(self.df, req).line()
        # shutdown
        if len(args) > 1 or (args and args[0] not in ("drain", "now")):
            raise ProtocolError("usage", "shutdown [drain|now]")
        drain = not args or args[0] == "drain"
        self.final = self.df.shutdown(drain=drain)
        processed = sum(m.processed_total for m in self.final.values())
        self._stop.set()
        if self.on_shutdown is not None:
            self.on_shutdown()
        return f"stopped pellets={len(self.final)} processed={processed}"

    def stop(self):
        self._stop.set()
        if self._thread is not None and self._thread is not threading.current_thread():
            self._thread.join(timeout=2)
        if self._sock is not None:
            self._sock.close()
            self._sock = None
        try:
            if _is_socket(self.path):
                os.unlink(self.path)
        except OSError:
            pass


def _is_socket(path: str) -> bool:
    try:
        return stat.S_ISSOCK(os.stat(path).st_mode)
    except OSError:
        return False


def _one_line(text: str) -> str:
    return " ".join(text.split())


def send_command(path: str, line: str, timeout: float = 60.0) -> str:
    """Send one request and return the response line (without newline)."""
    with socket.socket(socket.AF_UNIX, socket.SOCK_STREAM) as sock:
        sock.settimeout(timeout)
        sock.connect(path)
        sock.sendall(line.rstrip("\n").encode() + b"\n")
        buf = b""
        while b"\n" not in buf:
            chunk = sock.recv(4096)
            if not chunk:
                break
            buf += chunk
    if b"\n" not in buf:
        raise ConnectionError("connection closed before a response arrived")
    return buf.split(b"\n", 1)[0].decode()
