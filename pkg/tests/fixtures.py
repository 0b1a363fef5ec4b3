"""Behaviors and helpers shared by the engine, update and acceptance tests."""
import threading
import time

from pelletflow.behaviors import PelletBehavior, Sink, builtin_registry
from pelletflow.graph import parse_graph
from pelletflow.message import LANDMARK, Message


class Tagged(PelletBehavior):
    """Forward each message with ``|tag`` appended. Landmarks are forwarded."""

    tag = b"?"

    def __init__(self, delay=0.0):
        self.delay = delay

    def compute_push(self, item, ctx):
        if self.delay:
            end = time.monotonic() + self.delay
            while time.monotonic() < end and not ctx.interrupted:
                time.sleep(0.001)
        ctx.emit("out", item.payload + b"|" + self.tag, key=item.key)

    def on_signal(self, msg, ctx):
        if msg.kind == LANDMARK:
            ctx.emit("out", Message(payload=msg.payload, kind=LANDMARK))


class Old(Tagged):
    tag = b"old"


class New(Tagged):
    tag = b"new"


class Counting(PelletBehavior):
    """Pull pellet keeping a running count in its state object."""

    tag = b"c1"

    def compute_pull(self, items, ctx):
        for m in items:
            n = ctx.update_state(lambda s: (s or 0) + 1)
            ctx.emit("out", m.payload + b"|" + self.tag + b"|%d" % n)

    def on_signal(self, msg, ctx):
        if msg.kind == LANDMARK:
            ctx.emit("out", Message(payload=msg.payload, kind=LANDMARK))


class Counting2(Counting):
    tag = b"c2"


class SharedSink:
    """Registry factory that hands out one Sink per pellet id, in creation order."""

    def __init__(self):
        self.sinks = []
        self.lock = threading.Lock()

    def __call__(self):
        s = Sink()
        with self.lock:
            self.sinks.append(s)
        return s

    @property
    def received(self):
        return [m for s in self.sinks for m in s.received]


def chain(*pellets, extra=""):
    """``chain(("A", "impl=x"), ...)`` wires in[0]->out->in[1]... in order."""
    lines = ["graph chain"]
    for i, (pid, attrs) in enumerate(pellets):
        lines.append(f"pellet {pid} {attrs}")
        lines.append(f"port {pid}.in in")
        if i < len(pellets) - 1:
            lines.append(f"port {pid}.out out")
    for (a, _), (b, _) in zip(pellets, pellets[1:]):
        lines.append(f"edge {a}.out -> {b}.in")
    return parse_graph("\n".join(lines) + "\n" + extra)


def registry(**extra):
    reg = builtin_registry()
    reg.update(old=Old, new=New, counting=Counting, counting2=Counting2)
    reg.update(extra)
    return reg


def feed(df, pellet, rate, seconds, prefix=b"m"):
    """Ingest at ``rate`` msg/s for ``seconds`` on a background thread."""
    sent = []

    def run():
        start = time.monotonic()
        n = 0
        total = int(rate * seconds)
        while n < total:
            due = min(total, int((time.monotonic() - start) * rate) + 1)
            while n < due:
                payload = prefix + b"%d" % n
                df.ingest(pellet, "in", Message(payload=payload, key=payload))
                sent.append(payload)
                n += 1
            time.sleep(0.002)

    t = threading.Thread(target=run, daemon=True)
    t.start()
    return t, sent


def split_log(log):
    """Per-edge log -> (data tags before/after the landmark, landmark labels)."""
    tags, marks = [], []
    for kind, _epoch, _seq, payload in log:
        if kind == LANDMARK:
            marks.append((len(tags), payload.decode()))
        else:
            tags.append(payload.split(b"|")[1])
    return tags, marks


def random_connected_graph(n, extra, seed):
    """Undirected adjacency: a random spanning tree plus ``extra`` edges."""
    import random

    rng = random.Random(seed)
    verts = [f"v{i}" for i in range(n)]
    adj = {v: set() for v in verts}
    order = verts[:]
    rng.shuffle(order)
    for i in range(1, n):
        a, b = order[i], order[rng.randrange(i)]
        adj[a].add(b)
        adj[b].add(a)
    while extra:
        a, b = rng.sample(verts, 2)
        if b not in adj[a]:
            adj[a].add(b)
            adj[b].add(a)
            extra -= 1
    values = {v: rng.randrange(1000) for v in verts}
    return {v: sorted(ns) for v, ns in adj.items()}, values


def diameter(adj):
    from collections import deque

    best = 0
    for s in adj:
        dist = {s: 0}
        q = deque([s])
        while q:
            v = q.popleft()
            for u in adj[v]:
                if u not in dist:
                    dist[u] = dist[v] + 1
                    q.append(u)
        best = max(best, max(dist.values()))
    return best


def run_bsp(adj, values, n_workers=4, mode="deterministic"):
    from pelletflow.bsp import bsp_max_graph, bsp_max_registry, collect_values
    from pelletflow.engine import deploy
    from pelletflow.message import control

    g = bsp_max_graph(n_workers)
    df = deploy(g, bsp_max_registry(adj, values, n_workers), [16], mode=mode, expose=("M",), trace=True)
    df.ingest("M", "in", control("begin"))
    if mode == "deterministic":
        df.run_until_idle()
    else:
        df.wait_idle(30)
    df.shutdown()
    return df, collect_values(df, n_workers)


def bsp_checks(df):
    """(final superstep, list of gating violations) from the event log."""
    events = df.events
    barrier_at = {}
    terminate = None
    violations = []
    for seq, _t, ev, _pid, info in events:
        if ev == "barrier":
            barrier_at.setdefault(info["superstep"], seq)
        elif ev == "terminate":
            terminate = info["superstep"]
    for seq, _t, ev, pid, info in events:
        if ev != "apply":
            continue
        s = info["superstep"]
        if s not in barrier_at or seq < barrier_at[s] or info["sent_in"] != s - 1:
            violations.append((pid, info))
    return terminate, violations
