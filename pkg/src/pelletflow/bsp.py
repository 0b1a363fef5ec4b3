"""Bulk-synchronous supersteps built from ordinary pellets.

A group of worker pellets exchanges vertex messages over a key_hash split
(the key is the target vertex, so each vertex lives on exactly one worker).
After each superstep every worker sends ``done:<id>`` or ``halt:<id>`` to a
manager pellet, which runs the barrier and broadcasts ``start:<n>`` or
``terminate``. Workers buffer incoming data and only apply it on ``start``,
so messages of round s+1 are never processed before barrier s completes.
"""
from __future__ import annotations

import functools

from .behaviors import PelletBehavior, data_messages
from .graph import DataflowGraph, EdgeSpec, PelletSpec, PortSpec, SplitSpec
from .message import CONTROL, control
from .routing import BarrierState, barrier_step, key_hash_index


class BspManager(PelletBehavior):
    """Barrier for the ids in ``expected``. A ``begin`` control message
    (normally ingested by the driver) opens superstep 0."""

    def __init__(self, expected=()):
        self.barrier = BarrierState(frozenset(expected))

    def compute_push(self, item, ctx):
        pass

    def on_signal(self, msg, ctx):
        if msg.kind != CONTROL:
            return
        if msg.label == "begin":
            ctx.log("barrier", superstep=0)
            ctx.emit("out", control("start:0"))
            return
        out = barrier_step(self.barrier, msg)
        if out is None:
            return
        if out.label == "terminate":
            ctx.log("terminate", superstep=self.barrier.superstep)
        else:
            ctx.log("barrier", superstep=self.barrier.superstep)
        ctx.emit("out", out)


class BspMaxVertex(PelletBehavior):
    """Max-value propagation for the vertices this worker owns.

    ``adjacency`` maps vertex -> neighbours and ``values`` vertex -> int,
    both restricted to owned vertices. Messages are ``<superstep>:<value>``
    keyed by the target vertex id.
    """

    def __init__(self, name="", adjacency=None, values=None):
        self.name = name
        self.adjacency = {str(v): [str(u) for u in ns] for v, ns in (adjacency or {}).items()}
        self.values = {str(v): int(x) for v, x in (values or {}).items()}
        self.inbox: list[tuple[str, int, int]] = []
        self.superstep = -1
        self.halted = False

    def compute_push(self, item, ctx):
        for m in data_messages(item):
            step, _, value = m.payload.partition(b":")
            self.inbox.append((m.key.decode(), int(step), int(value)))

    def on_signal(self, msg, ctx):
        if msg.kind != CONTROL:
            return
        label = msg.label
        if label == "terminate":
            self.halted = True
            return
        if not label.startswith("start:"):
            return
        s = int(label.split(":", 1)[1])
        self.superstep = s
        if s == 0:
            changed = set(self.values)
        else:
            changed = set()
            for vertex, sent_in, value in self.inbox:
                ctx.log("apply", superstep=s, sent_in=sent_in, vertex=vertex)
                if value > self.values[vertex]:
                    self.values[vertex] = value
                    changed.add(vertex)
            self.inbox.clear()
        sent = 0
        for v in sorted(changed):
            for u in self.adjacency.get(v, ()):
                ctx.emit("msg", f"{s}:{self.values[v]}".encode(), key=u.encode())
                sent += 1
        verb = "done" if sent else "halt"
        ctx.emit("ctl", control(f"{verb}:{self.name}"))


def bsp_max_graph(n_workers: int, name: str = "bsp-max") -> DataflowGraph:
    """Workers ``W0..W{n-1}`` plus manager ``M``; the driver ingests
    ``begin`` into ``M.in``."""
    pellets = [PelletSpec(id="M", impl="bsp-manager", ordered=True,
                          ports=(PortSpec("in", "in"), PortSpec("out", "out")))]
    edges = []
    workers = [f"W{i}" for i in range(n_workers)]
    for w in workers:
        pellets.append(PelletSpec(id=w, impl=f"bsp-max-{w}", ordered=True,
                                  ports=(PortSpec("in", "in"), PortSpec("msg", "out"), PortSpec("ctl", "out"))))
    for w in workers:
        for dst in workers:
            edges.append(EdgeSpec((w, "msg"), (dst, "in")))
        edges.append(EdgeSpec((w, "ctl"), ("M", "in")))
        edges.append(EdgeSpec(("M", "out"), (w, "in")))
    splits = [SplitSpec(w, "msg", "key_hash") for w in workers]
    return DataflowGraph(name=name, pellets=tuple(pellets), edges=tuple(edges), splits=tuple(splits))


def bsp_max_registry(adjacency: dict, values: dict, n_workers: int) -> dict:
    """Factories for :func:`bsp_max_graph`, partitioning vertices the same
    way the key_hash split routes their messages."""
    workers = [f"W{i}" for i in range(n_workers)]
    owned: dict[str, list] = {w: [] for w in workers}
    for v in adjacency:
        owned[workers[key_hash_index(str(v).encode(), n_workers)]].append(v)
    reg = {"bsp-manager": functools.partial(BspManager, workers)}
    for w in workers:
        reg[f"bsp-max-{w}"] = functools.partial(
            BspMaxVertex, w,
            {v: adjacency[v] for v in owned[w]},
            {v: values[v] for v in owned[w]})
    return reg


def collect_values(df, n_workers: int) -> dict[str, int]:
    out = {}
    for i in range(n_workers):
        out.update(df.behavior(f"W{i}").values)
    return out
