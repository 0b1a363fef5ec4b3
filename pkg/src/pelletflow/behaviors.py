"""Pellet behavior interface and the built-in behavior registry."""
from __future__ import annotations

import threading
import time

from . import kernels
from .message import DATA, LANDMARK, Message


class PelletInterrupted(Exception):
    """Raised by :meth:`Context.check_interrupt` when an update asks a
    long-running invocation to wrap up."""


class PelletBehavior:
    """User logic for one pellet.

    Push pellets implement :meth:`compute_push`, which receives one
    message, an aligned ``{port: Message}`` tuple or a window batch (list).
    Pull pellets implement :meth:`compute_pull`, which receives an iterator
    over the same kinds of items. Landmark and control messages go to
    :meth:`on_signal` in stream order.
    """

    def compute_push(self, item, ctx) -> None:
        raise NotImplementedError

    def compute_pull(self, items, ctx) -> None:
        for item in items:
            self.compute_push(item, ctx)

    def on_signal(self, msg: Message, ctx) -> None:
        pass


def data_messages(item) -> list[Message]:
    """Flatten a push/pull item (message, tuple map or batch) to messages."""
    if isinstance(item, Message):
        return [item]
    if isinstance(item, dict):
        return list(item.values())
    return list(item)


class Identity(PelletBehavior):
    """Forward every data message unchanged on the first output port.
    Landmarks are passed on so they keep delimiting the stream downstream."""

    def compute_push(self, item, ctx):
        port = ctx.out_ports[0] if ctx.out_ports else None
        for m in data_messages(item):
            if port is not None:
                ctx.emit(port, m.payload, key=m.key)

    def on_signal(self, msg, ctx):
        if msg.kind == LANDMARK:
            for port in ctx.out_ports:
                ctx.emit(port, Message(payload=msg.payload, kind=LANDMARK))


Source = Identity


class Sink(PelletBehavior):
    def __init__(self):
        self.received: list[Message] = []
        self.signals: list[Message] = []
        self._lock = threading.Lock()

    def compute_push(self, item, ctx):
        with self._lock:
            self.received.extend(data_messages(item))

    def on_signal(self, msg, ctx):
        with self._lock:
            self.signals.append(msg)


class Delay(Identity):
    """Identity that holds each item for ``seconds`` of wall time, polling
    the interrupt flag while it waits."""

    def __init__(self, seconds: float = 0.01):
        self.seconds = seconds

    def compute_push(self, item, ctx):
        deadline = time.monotonic() + self.seconds
        while not ctx.interrupted:
            left = deadline - time.monotonic()
            if left <= 0:
                break
            time.sleep(min(left, 0.005))
        super().compute_push(item, ctx)


class Switch(PelletBehavior):
    """Emit each message on exactly one output port, chosen by key hash
    (payload hash for keyless messages)."""

    def compute_push(self, item, ctx):
        ports = ctx.out_ports
        for m in data_messages(item):
            basis = m.key or (m.payload if isinstance(m.payload, bytes) else str(m.payload).encode())
            port = ports[kernels.fnv1a64(basis) % len(ports)]
            ctx.emit(port, m.payload, key=m.key)

    def on_signal(self, msg, ctx):
        if msg.kind == LANDMARK:
            for port in ctx.out_ports:
                ctx.emit(port, Message(payload=msg.payload, kind=LANDMARK))


class WordCountMap(PelletBehavior):
    """Split each payload into words and emit ``<word, 1>`` pairs; landmarks
    are forwarded so reducers know when a window of input ended."""

    def compute_push(self, item, ctx):
        for m in data_messages(item):
            for word in m.payload.split():
                ctx.emit("out", b"1", key=word)

    def on_signal(self, msg, ctx):
        if msg.kind == LANDMARK:
            ctx.emit("out", Message(payload=msg.payload, kind=LANDMARK))


class WordCountReduce(PelletBehavior):
    """Accumulate counts per key in the state object. After a landmark has
    arrived from every inbound edge the totals are emitted as
    ``word=count`` on ``out`` (if wired)."""

    def compute_pull(self, items, ctx):
        for item in items:
            pairs = [(m.key, int(m.payload)) for m in data_messages(item)]

            def add(st):
                st = st or {"counts": {}, "landmarks": 0}
                for key, n in pairs:
                    st["counts"][key] = st["counts"].get(key, 0) + n
                return st

            ctx.update_state(add)

    def on_signal(self, msg, ctx):
        if msg.kind != LANDMARK:
            return

        def bump(st):
            st = st or {"counts": {}, "landmarks": 0}
            st["landmarks"] += 1
            return st

        st = ctx.update_state(bump)
        if st["landmarks"] % max(1, ctx.inbound_edges("in")):
            return
        if "out" in ctx.out_ports:
            counts = dict(st["counts"])
            for word in sorted(counts):
                ctx.emit("out", word + b"=" + str(counts[word]).encode(), key=word)


def builtin_registry() -> dict:
    from .bsp import BspManager, BspMaxVertex

    return {
        "source": Source,
        "sink": Sink,
        "identity": Identity,
        "delay": Delay,
        "switch": Switch,
        "wordcount-map": WordCountMap,
        "wordcount-reduce": WordCountReduce,
        "bsp-max": BspMaxVertex,
        "bsp-manager": BspManager,
    }


__all__ = [
    "DATA", "PelletBehavior", "PelletInterrupted", "Identity", "Source", "Sink",
    "Delay", "Switch", "WordCountMap", "WordCountReduce", "builtin_registry",
    "data_messages",
]
