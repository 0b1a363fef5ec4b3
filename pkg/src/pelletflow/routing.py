"""Message routing between flakes: split selection, synchronous-merge
alignment and the BSP barrier used by superstep managers.
"""
from __future__ import annotations

import logging
import threading
from collections import deque
from dataclasses import dataclass, field

from . import kernels
from .graph import DataflowGraph
from .message import CONTROL, Message, control

logger = logging.getLogger(__name__)


class RoutingError(Exception):
    pass


class BarrierError(Exception):
    pass


def key_hash_index(key: bytes, fan_out: int) -> int:
    """FNV-1a 64-bit of ``key`` modulo ``fan_out``."""
    if isinstance(key, str):
        key = key.encode()
    return kernels.key_hash_index(key, fan_out)


@dataclass
class Route:
    sinks: list[tuple[str, str]]
    mode: str = "round_robin"
    cursor: int = 0
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)


class RouteTable:
    """Per ``(pellet, out-port)``: ordered sinks, split mode and cursor.

    Sinks appear in edge declaration order.
    """

    def __init__(self, routes: dict[tuple[str, str], Route] | None = None):
        self.routes: dict[tuple[str, str], Route] = routes or {}

    @classmethod
    def from_graph(cls, g: DataflowGraph) -> "RouteTable":
        routes: dict[tuple[str, str], Route] = {}
        for p in g.pellets:
            for port in p.out_ports():
                sinks = [e.dst for e in g.out_edges(p.id, port)]
                routes[(p.id, port)] = Route(sinks, g.split_mode(p.id, port))
        return cls(routes)

    def __contains__(self, source):
        return source in self.routes

    def fan_out(self, source) -> int:
        return len(self.routes[source].sinks)


def _select(r: Route, msg: Message) -> list[int]:
    n = len(r.sinks)
    if n == 0:
        return []
    if not msg.is_data or r.mode == "duplicate":
        return list(range(n))
    if r.mode == "key_hash":
        if not msg.key:
            raise RoutingError(f"key_hash split needs a keyed message (from {msg.source}.{msg.port})")
        return [key_hash_index(msg.key, n)]
    with r.lock:
        i = r.cursor
        r.cursor = (i + 1) % n
    return [i]


def route_indices(table: RouteTable, source: tuple[str, str], msg: Message) -> list[int]:
    """Like :func:`route` but returns positions in the route's sink list."""
    try:
        r = table.routes[source]
    except KeyError:
        raise RoutingError(f"no route for {source[0]}.{source[1]}") from None
    return _select(r, msg)


def route(table: RouteTable, source: tuple[str, str], msg: Message) -> list[tuple[str, str]]:
    r = table.routes.get(source)
    if r is None:
        raise RoutingError(f"no route for {source[0]}.{source[1]}")
    return [r.sinks[i] for i in _select(r, msg)]


class AlignBuffer:
    """One FIFO per input port; releases a tuple once every port has a message."""

    def __init__(self, ports):
        self.queues: dict[str, deque] = {p: deque() for p in ports}

    def push(self, port: str, item) -> None:
        self.queues[port].append(item)

    def ready(self) -> bool:
        return all(self.queues.values())

    def __len__(self):
        return sum(len(q) for q in self.queues.values())


def align(buf: AlignBuffer) -> dict | None:
    if not buf.queues or not buf.ready():
        return None
    return {port: q.popleft() for port, q in buf.queues.items()}


@dataclass
class BarrierState:
    expected: frozenset
    superstep: int = 0
    done: set = field(default_factory=set)
    halt_votes: set = field(default_factory=set)
    halted: bool = False


def barrier_step(st: BarrierState, ctrl: Message) -> Message | None:
    """Record a ``done:<pellet>`` or ``halt:<pellet>`` vote.

    Returns ``start:<n>`` once every expected pellet has reported for the
    current superstep, ``terminate`` if they all voted to halt, else None.
    """
    if ctrl.kind != CONTROL:
        raise BarrierError(f"expected a control message, got {ctrl.kind}")
    verb, _, sender = ctrl.label.partition(":")
    if verb not in ("done", "halt") or not sender:
        raise BarrierError(f"bad barrier label {ctrl.label!r}")
    if sender not in st.expected:
        raise BarrierError(f"{sender!r} is not part of the superstep group")
    if st.halted:
        return None
    if sender in st.done:
        logger.warning("duplicate %s from %s in superstep %d", verb, sender, st.superstep)
        return None
    st.done.add(sender)
    if verb == "halt":
        st.halt_votes.add(sender)
    if st.done != st.expected:
        return None
    if st.halt_votes == st.expected:
        st.halted = True
        return control("terminate")
    st.superstep += 1
    st.done = set()
    st.halt_votes = set()
    return control(f"start:{st.superstep}")
