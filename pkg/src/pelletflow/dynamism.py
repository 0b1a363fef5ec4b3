"""In-place updates of running pellets and subgraphs."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

from .engine import Container, Dataflow, EngineError, Flake, best_fit_decreasing
from .graph import DataflowGraph, EdgeSpec, validate_graph, wiring_order
from .message import LANDMARK, Message

logger = logging.getLogger(__name__)

SYNC = "sync"
ASYNC = "async"


class UpdateError(EngineError):
    pass


@dataclass
class UpdateRequest:
    """``target`` is a pellet id, or a set of ids for a subgraph update.

    For subgraph updates ``fragment`` holds the replacement pellets and
    edges and ``port_map`` maps each boundary ``(old pellet, port)`` to a
    ``(fragment pellet, port)``. ``registry`` may add behaviors the running
    dataflow does not know yet.
    """

    target: str | frozenset
    new_impl: str | None = None
    mode: str = SYNC
    emit_landmark: bool = True
    spec: object | None = None  # optional replacement PelletSpec
    fragment: DataflowGraph | None = None
    port_map: dict = field(default_factory=dict)
    registry: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in (SYNC, ASYNC):
            raise UpdateError(f"mode must be sync or async, not {self.mode!r}")


@dataclass
class UpdateReport:
    target: str
    mode: str
    epoch: int
    started_at: float
    completed_at: float
    messages_processed_during_update: int
    old_in_flight_completed: int
    downtime: float
    revoked: int = 0

    def line(self) -> str:
        return (f"target={self.target} mode={self.mode} epoch={self.epoch} "
                f"started={self.started_at:.3f} completed={self.completed_at:.3f} "
                f"processed_during={self.messages_processed_during_update} "
                f"old_completed={self.old_in_flight_completed} downtime={self.downtime:.6f} "
                f"revoked={self.revoked}")


def _claim(df: Dataflow, targets) -> None:
    with df.update_lock:
        busy = sorted(set(targets) & df.updating)
        if busy:
            raise UpdateError(f"update already in progress for {', '.join(busy)}")
        df.updating.update(targets)


def _release(df: Dataflow, targets) -> None:
    with df.update_lock:
        df.updating.difference_update(targets)


def _wait(df: Dataflow, flake: Flake, done, timeout: float) -> bool:
    """Block until ``done()`` holds for ``flake``; in deterministic mode
    there is nothing in flight to wait for."""
    if df.mode == "deterministic":
        return done()
    deadline = time.monotonic() + timeout
    with flake.cv:
        while not done():
            left = deadline - time.monotonic()
            if left <= 0:
                return False
            flake.cv.wait(min(left, 0.05))
    return True


def _landmark(flake: Flake, label: str) -> None:
    for port in flake.out_ports:
        flake.emit(port, Message(payload=label.encode(), kind=LANDMARK), None)


def update_pellet(df: Dataflow, req: UpdateRequest) -> UpdateReport:
    if not isinstance(req.target, str):
        raise UpdateError("update_pellet takes a single pellet id; use update_subgraph")
    pid = req.target
    if pid not in df.flakes:
        raise UpdateError(f"target not found: {pid!r}")
    flake = df.flakes[pid]
    old_spec = flake.spec
    new_spec = req.spec or (replace(old_spec, impl=req.new_impl) if req.new_impl else old_spec)
    if new_spec.id != pid:
        raise UpdateError("replacement spec must keep the pellet id")
    if set(new_spec.ports) != set(old_spec.ports) or new_spec.trigger != old_spec.trigger:
        raise UpdateError(f"interface of {pid} changes; use update_subgraph for this replacement")
    registry = {**df.registry, **req.registry}
    if new_spec.impl not in registry:
        raise UpdateError(f"unregistered impl: {new_spec.impl}")
    _claim(df, [pid])
    try:
        df.registry.update(req.registry)
        factory = registry[new_spec.impl]
        behavior = factory()
        started = df.clock()
        before = flake.processed_total
        if req.mode == ASYNC:
            with flake.cv:
                flake.spec = new_spec
                flake.factory = factory
                flake.behavior = behavior
                flake.epoch += 1
                epoch = flake.epoch
                in_flight = len(flake.contexts)
                if req.emit_landmark:
                    _landmark(flake, f"update:{pid}:{epoch}")
                flake.cv.notify_all()
            df.record("update", pid, {"mode": ASYNC, "epoch": epoch})
            # old instances keep running; count those that finish
            completed = in_flight
            revoked = 0
            downtime = 0.0
            resumed = df.clock()
        else:
            with flake.cv:
                flake.status = "paused"
                in_flight = len(flake.contexts)
                for ctx in flake.contexts:
                    ctx._interrupt.set()
            t_pause = df.clock()
            drained = _wait(df, flake, lambda: flake.running == 0, df.grace)
            with flake.cv:
                revoked = 0 if drained else flake.revoke_all()
                completed = in_flight - revoked
                flake.spec = new_spec
                flake.factory = factory
                flake.behavior = behavior
                flake.epoch += 1
                epoch = flake.epoch
                if req.emit_landmark:
                    _landmark(flake, f"update:{pid}:{epoch}")
                flake.status = "active"
                flake.cv.notify_all()
            resumed = df.clock()
            downtime = resumed - t_pause
            df.record("update", pid, {"mode": SYNC, "epoch": epoch, "revoked": revoked})
        g = df.graph
        df.graph = g.with_pellet(new_spec)
        return UpdateReport(pid, req.mode, epoch, started, resumed,
                            flake.processed_total - before, completed, downtime, revoked)
    finally:
        _release(df, [pid])


def _boundary(g: DataflowGraph, members: set[str]):
    inbound = [e for e in g.edges if e.dst[0] in members and e.src[0] not in members]
    outbound = [e for e in g.edges if e.src[0] in members and e.dst[0] not in members]
    return inbound, outbound


def update_subgraph(df: Dataflow, req: UpdateRequest) -> UpdateReport:
    """Replace the member pellets with ``req.fragment``.

    Upstream and downstream pellets never pause. The members that receive
    boundary edges stop dispatching, the remaining members drain, then the
    fragment is placed and wired in and the entry queues move across.
    """
    members = {req.target} if isinstance(req.target, str) else set(req.target)
    frag = req.fragment
    if frag is None:
        raise UpdateError("subgraph update needs a replacement fragment")
    missing = sorted(members - set(df.flakes))
    if missing:
        raise UpdateError(f"target not found: {', '.join(missing)}")
    g = df.graph
    inbound, outbound = _boundary(g, members)
    frag_ids = set(frag.pellet_ids())
    clash = sorted(frag_ids & (set(g.pellet_ids()) - members))
    if clash:
        raise UpdateError(f"fragment pellet ids already in use: {', '.join(clash)}")
    frag_report = validate_graph(frag)
    if not frag_report.ok:
        raise UpdateError("invalid fragment: " + "; ".join(str(d) for d in frag_report.errors))
    for e in frag.edges:
        if e.src[0] not in frag_ids or e.dst[0] not in frag_ids:
            raise UpdateError(f"fragment edge {e} leaves the fragment")
    for e, end, direction in [(e, e.dst, "in") for e in inbound] + [(e, e.src, "out") for e in outbound]:
        target = req.port_map.get(end)
        if target is None:
            raise UpdateError(f"unmappable boundary edge {e}: no mapping for {end[0]}.{end[1]}")
        if target[0] not in frag_ids or not frag.pellet(target[0]).has_port(target[1], direction):
            raise UpdateError(f"boundary edge {e} maps to undeclared {direction}put port {target[0]}.{target[1]}")
    registry = {**df.registry, **req.registry}
    unknown = sorted({p.impl for p in frag.pellets if p.impl not in registry})
    if unknown:
        raise UpdateError(f"unregistered impl: {', '.join(unknown)}")
    hints = {p.id: p.core_hint or 1 for p in frag.pellets}
    free = [c.free + sum(n for pid, n in c.allocated.items() if pid in members) for c in df.containers]
    try:
        placement = best_fit_decreasing(hints, free)
    except EngineError as exc:
        raise UpdateError(f"capacity insufficient for fragment: {exc}") from None

    _claim(df, members)
    try:
        df.registry.update(req.registry)
        started = df.clock()
        flakes = {pid: df.flakes[pid] for pid in members}
        entries = {e.dst[0] for e in inbound}
        before = sum(f.processed_total for f in flakes.values())
        in_flight = 0
        for pid in entries:
            f = flakes[pid]
            with f.cv:
                f.status = "paused"
                in_flight += len(f.contexts)
        t_pause = df.clock()
        revoked = 0
        for pid in entries:
            f = flakes[pid]
            if not _wait(df, f, lambda f=f: f.running == 0, df.grace):
                with f.cv:
                    revoked += f.revoke_all()
        inner = [flakes[pid] for pid in sorted(members - entries)]
        if df.mode == "deterministic":
            while sum(f.step_inline() for f in inner):
                pass
        else:
            deadline = time.monotonic() + df.grace
            while time.monotonic() < deadline and not all(f.quiet() for f in inner):
                time.sleep(0.005)

        with df.route_lock:
            new_flakes = {}
            for p in frag.pellets:
                c: Container = df.containers[placement[p.id]]
                new_flakes[p.id] = Flake(df, p, registry[p.impl], hints[p.id], c)
            for f in flakes.values():
                df.retired.append(f)
                with f.cv:
                    f.status = "stopped"
                    f.cv.notify_all()
                f.container.allocated.pop(f.spec.id, None)
            for pid, f in new_flakes.items():
                f.container.allocated[pid] = hints[pid]
            # boundary wires keep their identity (and counters)
            new_edges = []
            for e in g.edges:
                if e.src[0] in members and e.dst[0] in members:
                    continue
                if e.dst[0] in members:
                    ne = EdgeSpec(e.src, tuple(req.port_map[e.dst]), e.transport)
                elif e.src[0] in members:
                    ne = EdgeSpec(tuple(req.port_map[e.src]), e.dst, e.transport)
                else:
                    ne = e
                if ne is not e:
                    for w in df.wires.values():
                        if w.src == e.src and w.dst == e.dst and w.transport == e.transport:
                            w.src, w.dst = ne.src, ne.dst
                            break
                new_edges.append(ne)
            new_edges.extend(frag.edges)
            splits = [s for s in g.splits if s.pellet not in members] + list(frag.splits)
            pellets = [p for p in g.pellets if p.id not in members] + list(frag.pellets)
            df.graph = DataflowGraph(g.name, tuple(pellets), tuple(new_edges), tuple(splits))
            survivors = {pid: f for pid, f in df.flakes.items() if pid not in members}
            df.flakes = {**survivors, **new_flakes}
            # drop wires that lived entirely inside the old subgraph
            df.wire_graph()
            moved = 0
            for pid in entries:
                old = flakes[pid]
                with old.cv:
                    for port, q in old.queues.items():
                        target = req.port_map.get((pid, port))
                        while q:
                            wid, msg, t = q.popleft()
                            if target is None:
                                old.failed_total += 1
                                continue
                            new_flakes[target[0]].queues[target[1]].append((wid, msg, t))
                            if msg.is_data:
                                new_flakes[target[0]]._arrivals.append(t)
                            moved += 1
            df.epoch_counter += 1
            epoch = df.epoch_counter
            if req.emit_landmark:
                exits = sorted({req.port_map[e.src][0] for e in outbound})
                label = f"update:{'+'.join(sorted(members))}:{epoch}"
                for pid in exits:
                    for port in sorted({req.port_map[e.src][1] for e in outbound
                                        if req.port_map[e.src][0] == pid}):
                        new_flakes[pid].emit(port, Message(payload=label.encode(), kind=LANDMARK), None)
        for pid in wiring_order(frag):
            df.activate(new_flakes[pid])
        for f in flakes.values():
            with f.cv:
                f.cv.notify_all()
        resumed = df.clock()
        df.record("update_subgraph", "+".join(sorted(members)),
                  {"epoch": epoch, "moved": moved, "fragment": sorted(frag_ids)})
        processed = sum(f.processed_total for f in flakes.values()) - before
        return UpdateReport("+".join(sorted(members)), req.mode, epoch, started, resumed,
                            processed, in_flight - revoked, resumed - t_pause, revoked)
    finally:
        _release(df, members)

