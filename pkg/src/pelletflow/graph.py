"""Dataflow graph model: types, the ``.graph`` text format, validation and
activation order.

The file format is line oriented::

    graph <name>
    pellet <id> impl=<name> trigger=push|pull [stateful] [ordered] [align] [cores=<n>] [latency=<sec>] [selectivity=<r>]
    port <pellet>.<name> in|out
    window <pellet>.<port> count|time <width>
    edge <pellet>.<outport> -> <pellet>.<inport> [pull]
    split <pellet>.<outport> duplicate|roundrobin|keyhash

``#`` starts a comment. ``parse_graph`` only performs field-level checks;
cross references are checked by ``validate_graph``.
"""
from __future__ import annotations

import re
from collections import defaultdict, deque
from dataclasses import dataclass, field, replace
from typing import Iterable

IDENT = re.compile(r"[A-Za-z_][A-Za-z0-9_]*\Z")

PUSH = "push"
PULL = "pull"
TRIGGERS = (PUSH, PULL)
SPLIT_MODES = ("duplicate", "round_robin", "key_hash")
_SPLIT_WORDS = {"duplicate": "duplicate", "roundrobin": "round_robin", "keyhash": "key_hash"}
_SPLIT_NAMES = {v: k for k, v in _SPLIT_WORDS.items()}


class GraphSyntaxError(ValueError):
    """Raised by :func:`parse_graph`; carries 1-based line and column."""

    def __init__(self, message: str, line: int, column: int = 1):
        super().__init__(f"line {line}, column {column}: {message}")
        self.message = message
        self.line = line
        self.column = column


@dataclass(frozen=True)
class PortSpec:
    name: str
    direction: str  # "in" | "out"


@dataclass(frozen=True)
class WindowSpec:
    kind: str  # "count" | "time"
    width: float

    def __post_init__(self):
        if self.kind not in ("count", "time"):
            raise ValueError(f"unknown window kind {self.kind!r}")
        if not self.width > 0:
            raise ValueError("width must be positive")
        if self.kind == "count" and int(self.width) != self.width:
            raise ValueError("count window width must be an integer")


@dataclass(frozen=True)
class PelletSpec:
    id: str
    impl: str
    trigger: str = PUSH
    stateful: bool = False
    ordered: bool = False
    ports: tuple[PortSpec, ...] = ()
    windows: tuple[tuple[str, WindowSpec], ...] = ()
    align_inputs: bool = False
    core_hint: int | None = None
    latency_hint: float | None = None
    selectivity_hint: float | None = None

    def in_ports(self) -> list[str]:
        return [p.name for p in self.ports if p.direction == "in"]

    def out_ports(self) -> list[str]:
        return [p.name for p in self.ports if p.direction == "out"]

    def window(self, port: str) -> WindowSpec | None:
        for name, spec in self.windows:
            if name == port:
                return spec
        return None

    def has_port(self, name: str, direction: str) -> bool:
        return PortSpec(name, direction) in self.ports


@dataclass(frozen=True)
class EdgeSpec:
    src: tuple[str, str]
    dst: tuple[str, str]
    transport: str = PUSH

    def __str__(self):
        return f"{self.src[0]}.{self.src[1]} -> {self.dst[0]}.{self.dst[1]}"


@dataclass(frozen=True)
class SplitSpec:
    pellet: str
    port: str
    mode: str


@dataclass(frozen=True)
class DataflowGraph:
    name: str
    pellets: tuple[PelletSpec, ...] = ()
    edges: tuple[EdgeSpec, ...] = ()
    splits: tuple[SplitSpec, ...] = ()

    def pellet(self, pid: str) -> PelletSpec:
        for p in self.pellets:
            if p.id == pid:
                return p
        raise KeyError(pid)

    def pellet_ids(self) -> list[str]:
        return [p.id for p in self.pellets]

    def split_mode(self, pellet: str, port: str) -> str:
        for s in self.splits:
            if s.pellet == pellet and s.port == port:
                return s.mode
        return "round_robin"

    def out_edges(self, pellet: str, port: str | None = None) -> list[EdgeSpec]:
        return [e for e in self.edges
                if e.src[0] == pellet and (port is None or e.src[1] == port)]

    def in_edges(self, pellet: str, port: str | None = None) -> list[EdgeSpec]:
        return [e for e in self.edges
                if e.dst[0] == pellet and (port is None or e.dst[1] == port)]

    def sources(self) -> list[str]:
        fed = {e.dst[0] for e in self.edges}
        return [p.id for p in self.pellets if p.id not in fed]

    def with_pellet(self, spec: PelletSpec) -> "DataflowGraph":
        pellets = tuple(spec if p.id == spec.id else p for p in self.pellets)
        return replace(self, pellets=pellets)


@dataclass
class Diagnostic:
    severity: str  # "error" | "warning"
    location: str
    message: str

    def __str__(self):
        return f"{self.severity}:{self.location}:{self.message}"


@dataclass
class ValidationReport:
    diagnostics: list[Diagnostic] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not any(d.severity == "error" for d in self.diagnostics)

    @property
    def errors(self) -> list[Diagnostic]:
        return [d for d in self.diagnostics if d.severity == "error"]

    @property
    def warnings(self) -> list[Diagnostic]:
        return [d for d in self.diagnostics if d.severity == "warning"]


# -- parsing ---------------------------------------------------------------

class _Line:
    def __init__(self, text: str, lineno: int):
        self.lineno = lineno
        self.tokens: list[tuple[str, int]] = []
        for m in re.finditer(r"\S+", text):
            self.tokens.append((m.group(0), m.start() + 1))

    def error(self, message: str, index: int = 0) -> GraphSyntaxError:
        col = self.tokens[index][1] if index < len(self.tokens) else 1
        return GraphSyntaxError(message, self.lineno, col)


def _ident(line: _Line, index: int, what: str) -> str:
    if index >= len(line.tokens):
        raise line.error(f"missing {what}", len(line.tokens) - 1)
    tok = line.tokens[index][0]
    if not IDENT.match(tok):
        raise line.error(f"invalid {what} {tok!r}", index)
    return tok


def _ref(line: _Line, index: int) -> tuple[str, str]:
    if index >= len(line.tokens):
        raise line.error("missing <pellet>.<port> reference", len(line.tokens) - 1)
    tok = line.tokens[index][0]
    pellet, dot, port = tok.partition(".")
    if not dot or not IDENT.match(pellet) or not IDENT.match(port):
        raise line.error(f"expected <pellet>.<port>, got {tok!r}", index)
    return pellet, port


def _number(line: _Line, index: int, text: str, kind, what: str):
    try:
        return kind(text)
    except ValueError:
        raise line.error(f"{what} must be {'an integer' if kind is int else 'a number'}, got {text!r}",
                         index) from None


def _expect_len(line: _Line, n: int):
    if len(line.tokens) > n:
        raise line.error(f"unexpected token {line.tokens[n][0]!r}", n)
    if len(line.tokens) < n:
        raise line.error("incomplete declaration", len(line.tokens) - 1)


def _parse_pellet(line: _Line) -> dict:
    pid = _ident(line, 1, "pellet id")
    attrs: dict = {"id": pid, "ports": [], "windows": []}
    for index in range(2, len(line.tokens)):
        tok = line.tokens[index][0]
        key, eq, value = tok.partition("=")
        if not eq:
            if tok in ("stateful", "ordered"):
                attrs[tok] = True
            elif tok == "align":
                attrs["align_inputs"] = True
            else:
                raise line.error(f"unknown field {tok!r}", index)
            continue
        if key == "impl":
            if not value:
                raise line.error("impl must not be empty", index)
            attrs["impl"] = value
        elif key == "trigger":
            if value not in TRIGGERS:
                raise line.error(f"trigger must be push or pull, got {value!r}", index)
            attrs["trigger"] = value
        elif key == "cores":
            n = _number(line, index, value, int, "cores")
            if n < 1:
                raise line.error("cores must be positive", index)
            attrs["core_hint"] = n
        elif key == "latency":
            x = _number(line, index, value, float, "latency")
            if not x > 0:
                raise line.error("latency must be positive", index)
            attrs["latency_hint"] = x
        elif key == "selectivity":
            x = _number(line, index, value, float, "selectivity")
            if x < 0:
                raise line.error("selectivity must be >= 0", index)
            attrs["selectivity_hint"] = x
        else:
            raise line.error(f"unknown field {key!r}", index)
    if "impl" not in attrs:
        raise line.error("pellet requires impl=<name>", 1)
    return attrs


def parse_graph(text: str) -> DataflowGraph:
    """Parse ``.graph`` text into a :class:`DataflowGraph`."""
    name = None
    pellets: dict[str, dict] = {}
    edges: list[EdgeSpec] = []
    splits: list[SplitSpec] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        content = raw.split("#", 1)[0]
        line = _Line(content, lineno)
        if not line.tokens:
            continue
        kw = line.tokens[0][0]
        if kw == "graph":
            if name is not None:
                raise line.error("duplicate graph declaration")
            _expect_len(line, 2)
            name = line.tokens[1][0]
        elif kw == "pellet":
            attrs = _parse_pellet(line)
            if attrs["id"] in pellets:
                raise line.error(f"duplicate pellet id {attrs['id']!r}", 1)
            pellets[attrs["id"]] = attrs
        elif kw == "port":
            _expect_len(line, 3)
            pid, pname = _ref(line, 1)
            direction = line.tokens[2][0]
            if direction not in ("in", "out"):
                raise line.error(f"port direction must be in or out, got {direction!r}", 2)
            if pid not in pellets:
                raise line.error(f"port declared for unknown pellet {pid!r}", 1)
            spec = PortSpec(pname, direction)
            if spec in pellets[pid]["ports"]:
                raise line.error(f"duplicate port {pid}.{pname} {direction}", 1)
            pellets[pid]["ports"].append(spec)
        elif kw == "window":
            _expect_len(line, 4)
            pid, pname = _ref(line, 1)
            kind = line.tokens[2][0]
            if kind not in ("count", "time"):
                raise line.error(f"window kind must be count or time, got {kind!r}", 2)
            width = _number(line, 3, line.tokens[3][0], int if kind == "count" else float, "width")
            if not width > 0:
                raise line.error("width must be positive", 3)
            if pid not in pellets:
                raise line.error(f"window declared for unknown pellet {pid!r}", 1)
            pellets[pid]["windows"].append((pname, WindowSpec(kind, width)))
        elif kw == "edge":
            if len(line.tokens) not in (4, 5):
                raise line.error("expected: edge <pellet>.<port> -> <pellet>.<port> [pull]")
            src = _ref(line, 1)
            if line.tokens[2][0] != "->":
                raise line.error("expected '->'", 2)
            dst = _ref(line, 3)
            transport = PUSH
            if len(line.tokens) == 5:
                if line.tokens[4][0] != "pull":
                    raise line.error(f"unknown field {line.tokens[4][0]!r}", 4)
                transport = PULL
            edges.append(EdgeSpec(src, dst, transport))
        elif kw == "split":
            _expect_len(line, 3)
            pid, pname = _ref(line, 1)
            word = line.tokens[2][0]
            if word not in _SPLIT_WORDS:
                raise line.error(f"split mode must be duplicate, roundrobin or keyhash, got {word!r}", 2)
            splits.append(SplitSpec(pid, pname, _SPLIT_WORDS[word]))
        else:
            raise line.error(f"unknown keyword {kw!r}")
    if name is None:
        raise GraphSyntaxError("missing 'graph <name>' declaration", 1)
    specs = []
    for attrs in pellets.values():
        attrs["ports"] = tuple(attrs["ports"])
        attrs["windows"] = tuple(attrs["windows"])
        specs.append(PelletSpec(**attrs))
    return DataflowGraph(name, tuple(specs), tuple(edges), tuple(splits))


def load_graph(path) -> DataflowGraph:
    with open(path, encoding="utf-8") as fh:
        return parse_graph(fh.read())


def _fmt_num(x: float) -> str:
    return repr(int(x)) if float(x).is_integer() else repr(float(x))


def serialize_graph(g: DataflowGraph) -> str:
    out = [f"graph {g.name}"]
    for p in g.pellets:
        parts = ["pellet", p.id, f"impl={p.impl}", f"trigger={p.trigger}"]
        if p.stateful:
            parts.append("stateful")
        if p.ordered:
            parts.append("ordered")
        if p.align_inputs:
            parts.append("align")
        if p.core_hint is not None:
            parts.append(f"cores={p.core_hint}")
        if p.latency_hint is not None:
            parts.append(f"latency={p.latency_hint!r}")
        if p.selectivity_hint is not None:
            parts.append(f"selectivity={p.selectivity_hint!r}")
        out.append(" ".join(parts))
    for p in g.pellets:
        for port in p.ports:
            out.append(f"port {p.id}.{port.name} {port.direction}")
        for pname, w in p.windows:
            width = str(int(w.width)) if w.kind == "count" else repr(float(w.width))
            out.append(f"window {p.id}.{pname} {w.kind} {width}")
    for e in g.edges:
        suffix = " pull" if e.transport == PULL else ""
        out.append(f"edge {e}{suffix}")
    for s in g.splits:
        out.append(f"split {s.pellet}.{s.port} {_SPLIT_NAMES[s.mode]}")
    return "\n".join(out) + "\n"


# -- validation ------------------------------------------------------------

def validate_graph(g: DataflowGraph) -> ValidationReport:
    report = ValidationReport()

    def err(loc, msg):
        report.diagnostics.append(Diagnostic("error", loc, msg))

    def warn(loc, msg):
        report.diagnostics.append(Diagnostic("warning", loc, msg))

    seen: set[str] = set()
    by_id: dict[str, PelletSpec] = {}
    for p in g.pellets:
        loc = f"pellet {p.id}"
        if p.id in seen:
            err(loc, "duplicate pellet id")
        seen.add(p.id)
        by_id.setdefault(p.id, p)
        if not IDENT.match(p.id):
            err(loc, "invalid pellet id")
        if p.trigger not in TRIGGERS:
            err(loc, f"unknown trigger {p.trigger!r}")
        if p.trigger == PUSH and p.stateful:
            err(loc, "push pellets are implicitly stateless")
        if not p.ports:
            err(loc, "pellet must declare at least one port")
        names = set()
        for port in p.ports:
            if not IDENT.match(port.name):
                err(f"{p.id}.{port.name}", "invalid port name")
            if (port.name, port.direction) in names:
                err(f"{p.id}.{port.name}", "duplicate port")
            names.add((port.name, port.direction))
        for pname, _ in p.windows:
            if not p.has_port(pname, "in"):
                err(f"window {p.id}.{pname}", f"window on undeclared input port {pname!r}")
        if p.align_inputs and len(p.in_ports()) < 2:
            warn(loc, "align has no effect with fewer than two input ports")

    for i, e in enumerate(g.edges):
        loc = f"edge {i + 1} ({e})"
        for (pid, port), direction in ((e.src, "out"), (e.dst, "in")):
            if pid not in by_id:
                err(loc, f"unknown pellet {pid!r}")
            elif not by_id[pid].has_port(port, direction):
                err(loc, f"undeclared {direction}put port {pid}.{port}")
        if e.transport not in TRIGGERS:
            err(loc, f"unknown transport {e.transport!r}")

    split_seen = set()
    for s in g.splits:
        loc = f"split {s.pellet}.{s.port}"
        if (s.pellet, s.port) in split_seen:
            err(loc, "duplicate split declaration")
        split_seen.add((s.pellet, s.port))
        if s.pellet not in by_id or not by_id[s.pellet].has_port(s.port, "out"):
            err(loc, "split references an undeclared output port")
            continue
        fan_out = len(g.out_edges(s.pellet, s.port))
        if s.mode == "key_hash":
            if fan_out < 1:
                err(loc, "keyhash split requires at least one outgoing edge")
            warn(loc, "key_hash routing needs keyed messages; keys are checked at runtime")
        elif fan_out < 2:
            warn(loc, f"{s.mode} split has no effect with out-degree {fan_out}")

    if report.ok and g.pellets:
        reach = _reachable(g, g.sources() or [min(by_id)])
        for p in g.pellets:
            if p.id not in reach:
                warn(f"pellet {p.id}", "unreachable from any source pellet")
    return report


def _successors(g: DataflowGraph) -> dict[str, list[str]]:
    succ: dict[str, list[str]] = defaultdict(list)
    for e in g.edges:
        if e.dst[0] not in succ[e.src[0]]:
            succ[e.src[0]].append(e.dst[0])
    for k in succ:
        succ[k].sort()
    return succ


def _reachable(g: DataflowGraph, roots: Iterable[str]) -> set[str]:
    succ = _successors(g)
    seen = set(roots)
    todo = deque(seen)
    while todo:
        for nxt in succ.get(todo.popleft(), ()):
            if nxt not in seen:
                seen.add(nxt)
                todo.append(nxt)
    return seen


def back_edges(g: DataflowGraph) -> set[tuple[str, str]]:
    """Pellet-level edges closing a cycle in a DFS from the source pellets.

    Roots are the pellets without inbound edges (or the lexicographically
    smallest pellet if there are none), visited in id order; pellets not
    reached from them are picked up afterwards in id order.
    """
    succ = _successors(g)
    ids = sorted(g.pellet_ids())
    roots = sorted(g.sources()) or ids[:1]
    state: dict[str, int] = {}  # 1 on stack, 2 done
    found: set[tuple[str, str]] = set()
    for root in roots + ids:
        if root in state:
            continue
        state[root] = 1
        stack = [(root, iter(succ.get(root, ())))]
        while stack:
            node, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                state[node] = 2
                stack.pop()
            elif state.get(nxt) == 1:
                found.add((node, nxt))
            elif nxt not in state:
                state[nxt] = 1
                stack.append((nxt, iter(succ.get(nxt, ()))))
    return found


def wiring_order(g: DataflowGraph) -> list[str]:
    """Activation order: sinks first, sources last, loops ignored.

    Breadth-first from the sinks of the graph with back-edges removed; a
    pellet is scheduled once all of its downstream consumers are. Ties are
    broken by pellet id.
    """
    skip = back_edges(g)
    down: dict[str, set[str]] = {pid: set() for pid in g.pellet_ids()}
    up: dict[str, set[str]] = {pid: set() for pid in g.pellet_ids()}
    for e in g.edges:
        a, b = e.src[0], e.dst[0]
        if (a, b) in skip or a not in down or b not in down:
            continue
        down[a].add(b)
        up[b].add(a)
    pending = {pid: len(d) for pid, d in down.items()}
    level = sorted(pid for pid, n in pending.items() if n == 0)
    order: list[str] = []
    while level:
        order.extend(level)
        nxt = set()
        for pid in level:
            for producer in up[pid]:
                pending[producer] -= 1
                if pending[producer] == 0:
                    nxt.add(producer)
        level = sorted(nxt)
    return order
