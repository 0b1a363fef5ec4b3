"""In-process execution of a dataflow graph.

One :class:`Flake` per pellet holds the pellet's input queues and a pool of
data-parallel instances sized ``cores * alpha``. Flakes live in logical
:class:`Container` s with a fixed core budget and are placed by best-fit
decreasing on the pellets' core hints.

Two execution modes share the same queueing and routing code:

``threaded``
    each flake has a dispatcher thread; invocations run on a thread pool.
``deterministic``
    nothing runs until :meth:`Dataflow.step` / :meth:`Dataflow.run_until_idle`
    is called; flakes are stepped round-robin on the caller's thread against
    a virtual clock advanced with :meth:`Dataflow.advance`.
"""
from __future__ import annotations

import itertools
import logging
import os
import threading
import time
from collections import Counter, deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from .behaviors import PelletInterrupted
from .graph import PULL, PUSH, DataflowGraph, PelletSpec, validate_graph, wiring_order
from .message import DATA, LANDMARK, Message
from .routing import RouteTable, RoutingError, route_indices

logger = logging.getLogger(__name__)

DEFAULT_ALPHA = 4
PULL_IDLE_SECONDS = 0.05


def default_alpha() -> int:
    value = os.environ.get("FLOE_ALPHA")
    if value:
        try:
            alpha = int(value)
        except ValueError:
            raise ValueError(f"FLOE_ALPHA must be a positive integer, got {value!r}") from None
        if alpha < 1:
            raise ValueError("FLOE_ALPHA must be a positive integer")
        return alpha
    return DEFAULT_ALPHA


class EngineError(Exception):
    pass


class DeployError(EngineError):
    pass


class NotRunning(EngineError):
    pass


class StateError(EngineError):
    pass


# -- placement -------------------------------------------------------------

@dataclass
class Container:
    id: int
    total_cores: int
    allocated: dict = field(default_factory=dict)

    @property
    def used(self) -> int:
        return sum(self.allocated.values())

    @property
    def free(self) -> int:
        return self.total_cores - self.used


def best_fit_decreasing(hints: dict[str, int], capacities: list[int]) -> dict[str, int]:
    """Map each pellet to a container index.

    Pellets are taken in decreasing hint order (ties by id); each goes to
    the container whose remaining capacity is smallest among those that fit.
    """
    if not capacities:
        raise DeployError("no containers supplied")
    biggest = max(capacities)
    for pid, h in hints.items():
        if h > biggest:
            raise DeployError(f"placement infeasible: {pid} needs {h} cores, largest container has {biggest}")
    free = list(capacities)
    placement = {}
    for pid, h in sorted(hints.items(), key=lambda kv: (-kv[1], kv[0])):
        fits = [i for i, f in enumerate(free) if f >= h]
        if not fits:
            raise DeployError(f"placement infeasible: no container has {h} free cores for {pid}")
        best = min(fits, key=lambda i: (free[i], i))
        free[best] -= h
        placement[pid] = best
    return placement


# -- metrics ---------------------------------------------------------------

@dataclass
class FlakeMetrics:
    pellet: str
    queue_length: int
    arrival_rate: float
    mean_latency: float | None
    instances: int
    cores: int
    processed_total: int
    emitted_total: int
    failed_total: int = 0
    active: int = 0

    # short aliases matching the controller's notation
    @property
    def D(self) -> float:
        return self.arrival_rate

    @property
    def L(self) -> float | None:
        return self.mean_latency

    @property
    def N(self) -> int:
        return self.instances

    def csv_row(self, now: float) -> str:
        lat = "" if self.mean_latency is None else f"{self.mean_latency:.6f}"
        return (f"{now:.3f},{self.pellet},{self.queue_length},{self.arrival_rate:.4f},{lat},"
                f"{self.instances},{self.cores},{self.processed_total},{self.emitted_total}")


METRICS_HEADER = "time,pellet,queue_len,D,L,N,cores,processed,emitted"


# -- wiring ----------------------------------------------------------------

class Wire:
    """Runtime edge with delivery accounting."""

    def __init__(self, wid: int, src, dst, transport: str):
        self.id = wid
        self.src = src
        self.dst = dst
        self.transport = transport
        self.emitted = 0
        self.consumed = 0
        self.outbox: deque = deque()  # pull transport only
        self.log: list[tuple] = []

    def __repr__(self):
        return f"Wire({self.id}, {self.src[0]}.{self.src[1]} -> {self.dst[0]}.{self.dst[1]})"


class _Unit:
    __slots__ = ("kind", "value", "items")

    def __init__(self, kind, value, items):
        self.kind = kind  # single | tuple | batch | signal
        self.value = value
        self.items = items  # [(wire_id, Message)]

    @property
    def n_data(self) -> int:
        return 0 if self.kind == "signal" else len(self.items)


class Context:
    """Handed to behaviors for emitting, state access and interrupt polling."""

    def __init__(self, flake: "Flake", epoch: int):
        self._flake = flake
        self.epoch = epoch
        self._interrupt = threading.Event()
        self.revoked = False
        self.emits = 0

    @property
    def pellet(self) -> str:
        return self._flake.spec.id

    @property
    def out_ports(self) -> list[str]:
        return self._flake.out_ports

    @property
    def interrupted(self) -> bool:
        return self._interrupt.is_set()

    def check_interrupt(self):
        if self._interrupt.is_set():
            raise PelletInterrupted(self.pellet)

    def now(self) -> float:
        return self._flake.df.clock()

    def emit(self, port: str, payload=b"", *, key: bytes | None = None, kind: str = DATA) -> Message:
        msg = payload if isinstance(payload, Message) else Message(payload=payload, kind=kind, key=key)
        self.emits += 1
        return self._flake.emit(port, msg, self)

    def get_state(self):
        return self._flake.get_state()

    def put_state(self, value) -> None:
        self._flake.put_state(value)

    def update_state(self, fn):
        """Atomically replace the state with ``fn(state)`` and return it."""
        return self._flake.update_state(fn)

    def inbound_edges(self, port: str) -> int:
        return self._flake.df.inbound_count(self.pellet, port)

    def log(self, event: str, **info) -> None:
        self._flake.df.record(event, self.pellet, info)


class Flake:
    def __init__(self, df: "Dataflow", spec: PelletSpec, factory, cores: int, container: Container):
        self.df = df
        self.spec = spec
        self.factory = factory
        self.behavior = factory()
        self.epoch = 0
        self.container = container
        self.cores = cores
        self.lock = threading.RLock()
        self.cv = threading.Condition(self.lock)
        self.in_ports = spec.in_ports()
        self.out_ports = spec.out_ports()
        self.queues: dict[str, deque] = {p: deque() for p in self.in_ports}
        self._rr = 0
        self.status = "inactive"  # inactive | active | paused | stopped
        self.updating = False
        self.active = 0
        self.running = 0
        self.peak_running = 0
        self.budget_violations = 0
        self.idle_sessions = 0
        self.contexts: set[Context] = set()
        self._seq: Counter = Counter()
        self._seq_lock = threading.Lock()
        self._state = None
        self._state_lock = threading.RLock()
        self.processed_total = 0
        self.processed_by_epoch: Counter = Counter()
        self.failed_total = 0
        self.emitted_total = 0
        self.signals_total = 0
        self.dropped_emits = 0
        self.invocations = 0
        self._arrivals: deque = deque()
        self._latencies: deque = deque()
        self._last_latency: float | None = None
        self._warned_push_contract = False
        self.thread: threading.Thread | None = None

    # -- sizing

    @property
    def budget(self) -> int:
        if self.spec.ordered:
            return min(self.cores, 1)
        return self.cores * self.df.alpha

    def set_cores(self, cores: int) -> None:
        with self.cv:
            self.cores = cores
            self.cv.notify_all()

    # -- state

    def get_state(self):
        if not self.spec.stateful:
            raise StateError(f"{self.spec.id} is not stateful (push pellets are implicitly stateless)")
        with self._state_lock:
            return self._state

    def put_state(self, value) -> None:
        if not self.spec.stateful:
            raise StateError(f"{self.spec.id} is not stateful (push pellets are implicitly stateless)")
        with self._state_lock:
            self._state = value

    def update_state(self, fn):
        with self._state_lock:
            self.put_state(fn(self.get_state()))
            return self._state

    # -- queues

    def enqueue(self, port: str, wire_id, msg: Message) -> None:
        now = self.df.clock()
        with self.cv:
            if port not in self.queues:
                raise EngineError(f"{self.spec.id} has no input port {port!r}")
            self.queues[port].append((wire_id, msg, now))
            if msg.is_data:
                self._arrivals.append(now)
            self.cv.notify_all()

    def _pull_outboxes(self) -> None:
        for wire in self.df.inbound_pull_wires(self.spec.id):
            while wire.outbox:
                msg, t = wire.outbox.popleft()
                self.queues[wire.dst[1]].append((wire.id, msg, t))
                if msg.is_data:
                    self._arrivals.append(t)

    def queue_length(self) -> int:
        with self.lock:
            n = sum(len(q) for q in self.queues.values())
            return n + sum(len(w.outbox) for w in self.df.inbound_pull_wires(self.spec.id))

    def _plan(self, now: float):
        """Pick the next unit of work without removing it."""
        qs = self.queues
        for port in self.in_ports:
            q = qs[port]
            if q and not q[0][1].is_data:
                return ("signal", port, 1)
        if self.spec.align_inputs and len(self.in_ports) > 1:
            if all(qs[p] for p in self.in_ports):
                return ("tuple", None, 1)
            return None
        n_ports = len(self.in_ports)
        for k in range(n_ports):
            port = self.in_ports[(self._rr + k) % n_ports]
            q = qs[port]
            if not q:
                continue
            w = self.spec.window(port)
            if w is None:
                return ("single", port, 1)
            # data items at the head, up to the first signal
            run = 0
            for _, m, _t in q:
                if not m.is_data:
                    break
                run += 1
            if w.kind == "count":
                width = int(w.width)
                if run >= width:
                    return ("batch", port, width)
                if run < len(q):  # a signal closes the partial window
                    return ("batch", port, run)
            else:
                first_idx = int(q[0][2] // w.width)
                if now >= (first_idx + 1) * w.width or run < len(q):
                    n = 0
                    for _, m, t in q:
                        if not m.is_data or int(t // w.width) != first_idx:
                            break
                        n += 1
                    return ("batch", port, n)
        return None

    def _pop(self, plan) -> _Unit:
        kind, port, n = plan
        if kind == "tuple":
            items = [self.queues[p].popleft() for p in self.in_ports]
            pairs = [(wid, m) for wid, m, _ in items]
            unit = _Unit("tuple", {p: m for p, (_, m) in zip(self.in_ports, pairs)}, pairs)
        else:
            q = self.queues[port]
            pairs = [q.popleft()[:2] for _ in range(n)]
            if kind == "batch":
                unit = _Unit("batch", [m for _, m in pairs], pairs)
            else:
                unit = _Unit(kind, pairs[0][1], pairs)
            self._rr = (self.in_ports.index(port) + 1) % len(self.in_ports)
        for wid, _ in pairs:
            if wid is not None:
                self.df.wires[wid].consumed += 1
        return unit

    def _take(self, now: float) -> _Unit | None:
        self._pull_outboxes()
        plan = self._plan(now)
        return self._pop(plan) if plan else None

    def has_ready_work(self) -> bool:
        with self.lock:
            self._pull_outboxes()
            return self._plan(self.df.clock()) is not None

    def next_window_deadline(self) -> float | None:
        deadlines = []
        for port in self.in_ports:
            w = self.spec.window(port)
            q = self.queues[port]
            if w is not None and w.kind == "time" and q:
                deadlines.append((int(q[0][2] // w.width) + 1) * w.width)
        return min(deadlines) if deadlines else None

    # -- emitting

    def emit(self, port: str, msg: Message, ctx: Context | None) -> Message:
        if port not in self.out_ports:
            raise EngineError(f"{self.spec.id} has no output port {port!r}")
        if ctx is not None and ctx.revoked:
            with self.lock:
                self.dropped_emits += 1
            return msg
        with self._seq_lock:
            self._seq[port] += 1
            stamped = msg.stamped(self.spec.id, port, self._seq[port])
        epoch = ctx.epoch if ctx is not None else self.epoch
        self.df.deliver(self, port, stamped, epoch)
        with self.lock:
            self.emitted_total += 1
        return stamped

    def emit_landmark_all(self, label: str) -> None:
        for port in self.out_ports:
            self.emit(port, Message(payload=label.encode(), kind=LANDMARK), None)

    # -- invocation

    def _new_context(self) -> Context:
        ctx = Context(self, self.epoch)
        self.contexts.add(ctx)
        return ctx

    def _begin(self):
        self.df.record("invoke", self.spec.id)
        with self.lock:
            self.running += 1
            self.invocations += 1
            if self.running > self.peak_running:
                self.peak_running = self.running
            if self.running > self.budget:
                self.budget_violations += 1

    def _record(self, unit: _Unit, ok: bool, elapsed: float, epoch: int, ctx: Context | None):
        with self.lock:
            if ctx is not None and ctx.revoked:
                return
            if unit.kind == "signal":
                self.signals_total += 1
                return
            n = unit.n_data
            if ok:
                self.processed_total += n
                self.processed_by_epoch[epoch] += n
            else:
                self.failed_total += n
            if n:
                per = elapsed / n
                self._last_latency = per
                self._latencies.append((self.df.clock(), per))

    def _run_behavior(self, behavior, unit: _Unit, ctx: Context) -> bool:
        try:
            if unit.kind == "signal":
                behavior.on_signal(unit.value, ctx)
            else:
                behavior.compute_push(unit.value, ctx)
            return True
        except PelletInterrupted:
            return True
        except Exception:
            logger.exception("pellet %s failed on a %s item", self.spec.id, unit.kind)
            return False

    def _finish(self, ctx: Context):
        with self.cv:
            self.contexts.discard(ctx)
            if not ctx.revoked:
                self.running -= 1
                self.active -= 1
            self.cv.notify_all()
        self.df.notify()

    def revoke_all(self) -> int:
        """Give up on in-flight invocations after the update grace period.

        Their items count as failed and anything they emit later is
        dropped. Caller holds the lock.
        """
        n = 0
        for ctx in list(self.contexts):
            if not ctx.revoked:
                ctx.revoked = True
                self.running -= 1
                self.active -= 1
                self.failed_total += 1
                n += 1
        self.contexts.clear()
        self.cv.notify_all()
        return n

    def run_push(self, unit: _Unit, behavior, ctx: Context):
        self._begin()
        try:
            t0 = time.perf_counter()
            ok = self._run_behavior(behavior, unit, ctx)
            self._record(unit, ok, time.perf_counter() - t0, ctx.epoch, ctx)
            if (ok and unit.kind == "single" and ctx.emits != 1 and self.out_ports
                    and not self._warned_push_contract):
                self._warned_push_contract = True
                logger.debug("push pellet %s emitted %d messages for one input", self.spec.id, ctx.emits)
        finally:
            self._finish(ctx)

    def _next_unit(self, ctx: Context, blocking: bool) -> _Unit | None:
        with self.cv:
            deadline = time.monotonic() + PULL_IDLE_SECONDS
            while True:
                if (self.status != "active" or ctx.epoch != self.epoch
                        or ctx.interrupted or ctx.revoked):
                    return None
                unit = self._take(self.df.clock())
                if unit is not None:
                    return unit
                left = deadline - time.monotonic()
                if not blocking or left <= 0:
                    return None
                self.idle_sessions += 1
                try:
                    self.cv.wait(left)
                finally:
                    self.idle_sessions -= 1

    def run_pull(self, behavior, ctx: Context, limit: int | None, blocking: bool):
        self._begin()
        current: list = [None, 0.0]

        def close_current(ok: bool):
            unit, t0 = current
            if unit is not None:
                self._record(unit, ok, time.perf_counter() - t0, ctx.epoch, ctx)
                current[0] = None

        def items():
            taken = 0
            while limit is None or taken < limit:
                close_current(True)
                unit = self._next_unit(ctx, blocking)
                if unit is None:
                    return
                taken += 1
                if unit.kind == "signal":
                    current[:] = [unit, time.perf_counter()]
                    behavior.on_signal(unit.value, ctx)
                    close_current(True)
                    continue
                current[:] = [unit, time.perf_counter()]
                self.df.record("item", self.spec.id)
                yield unit.value

        try:
            try:
                behavior.compute_pull(items(), ctx)
                close_current(True)
            except PelletInterrupted:
                close_current(True)
            except Exception:
                logger.exception("pull pellet %s failed", self.spec.id)
                close_current(False)
        finally:
            self._finish(ctx)

    # -- dispatch

    def _launch_ready_locked(self) -> int:
        """Start invocations while budget allows. Caller holds the lock."""
        launched = 0
        while self.status == "active" and self.active < self.budget:
            if self.spec.trigger == PUSH:
                unit = self._take(self.df.clock())
                if unit is None:
                    break
                self.active += 1
                ctx = self._new_context()
                self.df.submit(self.run_push, unit, self.behavior, ctx)
            else:
                self._pull_outboxes()
                if self.idle_sessions or self._plan(self.df.clock()) is None:
                    break
                if self.active >= sum(len(q) for q in self.queues.values()):
                    break
                self.active += 1
                ctx = self._new_context()
                self.df.submit(self.run_pull, self.behavior, ctx, None, True)
            launched += 1
        return launched

    def dispatch_loop(self):
        with self.cv:
            while self.status != "stopped":
                if self._launch_ready_locked():
                    continue
                timeout = 0.1
                deadline = self.next_window_deadline()
                if deadline is not None:
                    timeout = max(0.001, min(timeout, deadline - self.df.clock() + 0.001))
                self.cv.wait(timeout)

    def step_inline(self) -> int:
        """Deterministic mode: run up to ``budget`` items on this thread."""
        if self.status != "active":
            return 0
        done = 0
        if self.spec.trigger == PUSH:
            for _ in range(self.budget):
                with self.lock:
                    unit = self._take(self.df.clock())
                    if unit is None:
                        break
                    self.active += 1
                    ctx = self._new_context()
                    behavior = self.behavior
                self.run_push(unit, behavior, ctx)
                done += 1
        else:
            with self.lock:
                if not self.has_ready_work():
                    return 0
                self.active += 1
                ctx = self._new_context()
                behavior = self.behavior
            before = self.processed_total + self.failed_total + self.signals_total
            self.run_pull(behavior, ctx, self.budget, False)
            done = self.processed_total + self.failed_total + self.signals_total - before
        return done

    def quiet(self) -> bool:
        with self.lock:
            return self.active == 0 and not self.has_ready_work()

    # -- metrics

    def metrics(self, window: float) -> FlakeMetrics:
        now = self.df.clock()
        with self.lock:
            cutoff = now - window
            while self._arrivals and self._arrivals[0] <= cutoff:
                self._arrivals.popleft()
            while self._latencies and self._latencies[0][0] <= cutoff:
                self._latencies.popleft()
            if self._latencies:
                lat = sum(x for _, x in self._latencies) / len(self._latencies)
            else:
                lat = self._last_latency
            return FlakeMetrics(
                pellet=self.spec.id,
                queue_length=self.queue_length(),
                arrival_rate=len(self._arrivals) / window,
                mean_latency=lat,
                instances=self.budget,
                cores=self.cores,
                processed_total=self.processed_total,
                emitted_total=self.emitted_total,
                failed_total=self.failed_total,
                active=self.active,
            )


class Dataflow:
    """Handle to a deployed, running dataflow (see :func:`deploy`)."""

    def __init__(self, graph: DataflowGraph, registry: dict, containers: list[Container], *,
                 alpha: int, mode: str, expose, trace: bool, sample_window: float, grace: float):
        if mode not in ("threaded", "deterministic"):
            raise ValueError(f"unknown mode {mode!r}")
        self.graph = graph
        self.registry = registry
        self.containers = containers
        self.alpha = alpha
        self.mode = mode
        self.trace = trace
        self.sample_window = sample_window
        self.grace = grace
        self.flakes: dict[str, Flake] = {}
        self.retired: list[Flake] = []  # replaced by subgraph updates
        self.wires: dict[int, Wire] = {}
        self.out_wires: dict[tuple[str, str], list[Wire]] = {}
        self._wire_ids = itertools.count()
        self.table = RouteTable()
        self.route_lock = threading.RLock()
        self.entry_points = set(graph.sources()) | set(expose)
        self.running = False
        self._closed = False
        self._final: dict[str, FlakeMetrics] | None = None
        self._t0 = time.monotonic()
        self._virtual = 0.0
        self._ingest_seq: Counter = Counter()
        self.ingested: Counter = Counter()
        self.events: list[tuple] = []
        self._event_seq = itertools.count()
        self._event_lock = threading.Lock()
        self._idle = threading.Condition()
        self._pool: ThreadPoolExecutor | None = None
        self.update_lock = threading.Lock()
        self.updating: set[str] = set()
        self.epoch_counter = 0

    # -- time

    def clock(self) -> float:
        if self.mode == "deterministic":
            return self._virtual
        return time.monotonic() - self._t0

    def advance(self, dt: float) -> None:
        if self.mode != "deterministic":
            raise EngineError("advance() is only available in deterministic mode")
        self._virtual += dt

    # -- events

    def record(self, event: str, pellet: str, info: dict | None = None) -> None:
        if not self.trace:
            return
        with self._event_lock:
            self.events.append((next(self._event_seq), self.clock(), event, pellet, info or {}))

    # -- wiring

    def rebuild_routes(self) -> None:
        g = self.graph
        table = RouteTable.from_graph(g)
        out_wires: dict[tuple[str, str], list[Wire]] = {}
        live = {}
        for e in g.edges:
            wire = self._wire_for(e)
            live[wire.id] = wire
            out_wires.setdefault(e.src, []).append(wire)
        self.wires.update(live)
        self.out_wires = out_wires
        self.table = table

    def _wire_for(self, e) -> Wire:
        for w in self.wires.values():
            if w.src == e.src and w.dst == e.dst and w.transport == e.transport and w.id not in self._claimed:
                self._claimed.add(w.id)
                return w
        w = Wire(next(self._wire_ids), e.src, e.dst, e.transport)
        self._claimed.add(w.id)
        return w

    def wire_graph(self) -> None:
        with self.route_lock:
            self._claimed: set[int] = set()
            self.rebuild_routes()

    def inbound_pull_wires(self, pellet: str) -> list[Wire]:
        return [w for ws in self.out_wires.values() for w in ws
                if w.dst[0] == pellet and w.transport == PULL]

    def inbound_count(self, pellet: str, port: str) -> int:
        return len(self.graph.in_edges(pellet, port))

    def deliver(self, flake: Flake, port: str, msg: Message, epoch: int) -> None:
        with self.route_lock:
            src = (flake.spec.id, port)
            wires = self.out_wires.get(src, [])
            if not wires:
                return
            idxs = route_indices(self.table, src, msg)
            for i in idxs:
                wire = wires[i]
                wire.emitted += 1
                if self.trace:
                    wire.log.append((msg.kind, epoch, msg.seq, msg.payload))
                    self.record("deliver", flake.spec.id, {"wire": wire.id, "kind": msg.kind, "epoch": epoch})
                sink = self.flakes[wire.dst[0]]
                if wire.transport == PULL:
                    with sink.cv:
                        wire.outbox.append((msg, self.clock()))
                        sink.cv.notify_all()
                else:
                    sink.enqueue(wire.dst[1], wire.id, msg)

    def edge_log(self, src: str, dst: str) -> list[tuple]:
        """Delivery log of the wire(s) from pellet ``src`` to pellet ``dst``."""
        out = []
        for ws in self.out_wires.values():
            for w in ws:
                if w.src[0] == src and w.dst[0] == dst:
                    out.extend(w.log)
        return out

    # -- execution

    def submit(self, fn, *args):
        if self.mode == "deterministic":
            raise EngineError("submit() is not used in deterministic mode")
        self._pool.submit(fn, *args)

    def notify(self):
        with self._idle:
            self._idle.notify_all()

    def activate(self, flake: Flake) -> None:
        with flake.cv:
            flake.status = "active"
            flake.cv.notify_all()
        if self.mode == "threaded" and flake.thread is None:
            flake.thread = threading.Thread(target=flake.dispatch_loop, daemon=True,
                                            name=f"flake-{flake.spec.id}")
            flake.thread.start()

    def start(self, order: list[str]) -> None:
        if self.mode == "threaded":
            self._pool = ThreadPoolExecutor(max_workers=256, thread_name_prefix="pellet")
        self.running = True
        for pid in order:
            self.activate(self.flakes[pid])
            self.record("activate", pid)

    def step(self) -> int:
        """Deterministic mode: give every active flake one turn."""
        if self.mode != "deterministic":
            raise EngineError("step() is only available in deterministic mode")
        return sum(self.flakes[pid].step_inline() for pid in list(self.flakes))

    def run_until_idle(self, max_steps: int = 1_000_000) -> int:
        steps = 0
        while steps < max_steps:
            steps += 1
            if self.step() == 0:
                break
        return steps

    def quiescent(self) -> bool:
        return all(f.quiet() for f in self.flakes.values())

    def wait_idle(self, timeout: float = 30.0) -> bool:
        if self.mode == "deterministic":
            self.run_until_idle()
            return self.quiescent()
        deadline = time.monotonic() + timeout
        streak = 0
        while time.monotonic() < deadline:
            if self.quiescent():
                streak += 1
                if streak >= 3:
                    return True
            else:
                streak = 0
            with self._idle:
                self._idle.wait(0.01)
        return False

    # -- public control surface

    def flake(self, pellet: str) -> Flake:
        try:
            return self.flakes[pellet]
        except KeyError:
            raise EngineError(f"unknown pellet {pellet!r}") from None

    def ingest(self, pellet: str, port: str, msg: Message | bytes) -> bool:
        if not self.running:
            raise NotRunning("dataflow not running")
        if pellet not in self.flakes:
            raise EngineError(f"unknown pellet {pellet!r}")
        if pellet not in self.entry_points:
            raise EngineError(f"{pellet!r} is not an input endpoint")
        flake = self.flakes[pellet]
        if port not in flake.in_ports:
            raise EngineError(f"unknown port {pellet}.{port}")
        if not isinstance(msg, Message):
            msg = Message(payload=msg)
        with flake.lock:
            self._ingest_seq[(pellet, port)] += 1
            seq = self._ingest_seq[(pellet, port)]
        flake.enqueue(port, None, msg.stamped(msg.source or "@ingest", msg.port or port, seq))
        self.ingested[pellet] += 1
        return True

    def set_cores(self, pellet: str, cores: int) -> int:
        flake = self.flake(pellet)
        # 0 parks the flake: messages queue up but nothing is dispatched
        if not isinstance(cores, int) or isinstance(cores, bool) or cores < 0:
            raise EngineError("cores must be a non-negative integer")
        c = flake.container
        with self.route_lock:
            available = c.free + c.allocated.get(pellet, 0)
            if cores > available:
                raise EngineError(f"{pellet} cannot have {cores} cores; container {c.id} has {available} available")
            c.allocated[pellet] = cores
            flake.set_cores(cores)
        self.record("set_cores", pellet, {"cores": cores})
        return flake.budget

    def metrics(self, pellet: str | None = None):
        if self._final is not None:
            return self._final if pellet is None else self._final[pellet]
        if pellet is not None:
            return self.flake(pellet).metrics(self.sample_window)
        return {pid: f.metrics(self.sample_window) for pid, f in self.flakes.items()}

    def metrics_rows(self) -> list[str]:
        now = self.clock()
        return [m.csv_row(now) for m in self.metrics().values()]

    def get_state(self, pellet: str):
        return self.flake(pellet)._state

    def behavior(self, pellet: str):
        return self.flake(pellet).behavior

    def shutdown(self, drain: bool = True, timeout: float = 60.0) -> dict[str, FlakeMetrics]:
        if self._closed:
            return self._final
        self.running = False  # sources close: no more ingest
        if drain:
            if not self.wait_idle(timeout):
                logger.warning("shutdown: dataflow did not drain within %.1fs", timeout)
        order = list(reversed(wiring_order(self.graph)))
        final = {}
        for pid in order:
            f = self.flakes[pid]
            with f.cv:
                f.status = "stopped"
                f.cv.notify_all()
            final[pid] = f.metrics(self.sample_window)
        if self._pool is not None:
            self._pool.shutdown(wait=drain)
        for f in self.flakes.values():
            if f.thread is not None:
                f.thread.join(timeout=1.0)
        self._final = final
        self._closed = True
        return final

    # -- invariant helpers

    def edge_totals(self) -> list[tuple[Wire, int, int]]:
        return [(w, w.emitted, w.consumed) for w in self.wires.values()]

    def describe(self) -> dict:
        return {"graph": self.graph.name, "alpha": self.alpha, "mode": self.mode,
                "containers": [(c.id, c.total_cores, dict(c.allocated)) for c in self.containers]}


def deploy(g: DataflowGraph, registry: dict, resources, *, alpha: int | None = None,
           mode: str = "threaded", expose=(), trace: bool = False, sample_window: float = 1.0,
           grace: float = 30.0) -> Dataflow:
    """Place, wire and activate one flake per pellet.

    ``resources`` is a list of container core capacities. Flakes are
    activated in wiring order so consumers are live before producers.
    """
    report = validate_graph(g)
    if not report.ok:
        raise DeployError("invalid graph: " + "; ".join(str(d) for d in report.errors))
    missing = sorted({p.impl for p in g.pellets if p.impl not in registry})
    if missing:
        raise DeployError(f"unregistered impl: {', '.join(missing)}")
    capacities = [c.total_cores if isinstance(c, Container) else int(c) for c in resources]
    if sum(capacities) < len(g.pellets):
        raise DeployError(f"insufficient cores: {sum(capacities)} for {len(g.pellets)} pellets")
    hints = {p.id: p.core_hint or 1 for p in g.pellets}
    placement = best_fit_decreasing(hints, capacities)
    containers = [Container(i, cap) for i, cap in enumerate(capacities)]
    df = Dataflow(g, registry, containers, alpha=alpha or default_alpha(), mode=mode,
                  expose=expose, trace=trace, sample_window=sample_window, grace=grace)
    order = wiring_order(g)
    for pid in order:
        spec = g.pellet(pid)
        c = containers[placement[pid]]
        c.allocated[pid] = hints[pid]
        df.flakes[pid] = Flake(df, spec, registry[spec.impl], hints[pid], c)
    # keep graph declaration order for stepping
    df.flakes = {pid: df.flakes[pid] for pid in g.pellet_ids()}
    df.wire_graph()
    df.start(order)
    logger.info("deployed %s: %d flakes in %d containers", g.name, len(g.pellets), len(containers))
    return df
