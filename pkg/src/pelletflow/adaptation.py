"""Core-allocation controllers: static look-ahead, dynamic feedback and the
hybrid of the two.

All three work on metric snapshots with the attributes ``D`` (arrival
rate, msg/s), ``L`` (mean per-message latency of one instance, s, or None),
``N`` (instances), ``cores`` and ``queue_length``; both
:class:`~pelletflow.engine.FlakeMetrics` and the simulator's samples fit.
"""
from __future__ import annotations

import logging
import math
import threading
from dataclasses import dataclass, field

logger = logging.getLogger(__name__)

STATIC = "static"
DYNAMIC = "dynamic"
HYBRID = "hybrid"
STRATEGIES = (STATIC, DYNAMIC, HYBRID)

STATIC_FOLLOW = "static-follow"
DYNAMIC_ACTIVE = "dynamic-active"

DECISION_HEADER = "time,pellet,strategy,mode,D,L,N,delta,cores,core_seconds"


class AdaptationError(Exception):
    pass


@dataclass(frozen=True)
class StageHint:
    pellet: str
    latency: float  # l_i, seconds per message for one instance
    selectivity: float = 1.0  # s_i

    def __post_init__(self):
        if not self.latency > 0:
            raise AdaptationError(f"{self.pellet}: latency must be > 0")
        if self.selectivity < 0:
            raise AdaptationError(f"{self.pellet}: selectivity must be >= 0")


@dataclass(frozen=True)
class PipelineProfile:
    """Hints for the critical path.

    ``m1`` messages reach the first stage over a data duration of ``t``
    seconds; ``period`` (optional) is the repeat interval of the bursts. A
    profile without a period describes a continuous stream at ``m1 / t``.
    """

    stages: tuple[StageHint, ...]
    m1: float
    t: float
    epsilon: float = 20.0
    alpha: int = 4
    period: float | None = None
    m: tuple[float, ...] | None = None  # per-stage volumes for non-linear graphs

    def __post_init__(self):
        if self.m is not None and len(self.m) != len(self.stages):
            raise AdaptationError("need one volume per stage")
        if not self.stages:
            raise AdaptationError("profile needs at least one stage")
        if self.m1 < 0:
            raise AdaptationError("m1 must be >= 0")
        if not self.t > 0:
            raise AdaptationError("data duration t must be > 0")
        if not self.t + self.epsilon > 0:
            raise AdaptationError("t + epsilon must be > 0")
        if self.alpha < 1:
            raise AdaptationError("alpha must be >= 1")
        if self.period is not None and self.period < self.t:
            raise AdaptationError("period must be at least the data duration")

    @classmethod
    def from_rate(cls, stages, rate: float, t: float, **kw) -> "PipelineProfile":
        return cls(tuple(stages), m1=rate * t, t=t, **kw)

    def pellets(self) -> list[str]:
        return [s.pellet for s in self.stages]

    def volumes(self) -> list[float]:
        """Messages reaching each stage per period (each stage sees the
        previous stage's output)."""
        if self.m is not None:
            return list(self.m)
        m = [float(self.m1)]
        for prev in self.stages[:-1]:
            m.append(m[-1] * prev.selectivity)
        return m

    def expected_rate(self, pellet: str) -> float:
        i = self.pellets().index(pellet)
        return self.volumes()[i] / self.t

    def in_burst(self, now: float) -> bool:
        if self.period is None:
            return True
        return (now % self.period) < self.t


def profile_from_graph(g, rate: float, t: float, **kw) -> PipelineProfile:
    """Profile for every pellet of a graph from its latency/selectivity hints.

    Each source receives ``rate * t`` messages per period; volumes flow
    downstream (back-edges ignored), scaled by selectivity and split evenly
    unless the port duplicates.
    """
    from .graph import back_edges, wiring_order

    missing = [p.id for p in g.pellets if p.latency_hint is None]
    if missing:
        raise AdaptationError(f"no latency hint for {', '.join(missing)}")
    skip = back_edges(g)
    order = list(reversed(wiring_order(g)))
    vol = {pid: 0.0 for pid in order}
    for pid in g.sources() or order[:1]:
        vol[pid] = rate * t
    for pid in order:
        p = g.pellet(pid)
        out = vol[pid] * (1.0 if p.selectivity_hint is None else p.selectivity_hint)
        for port in p.out_ports():
            edges = [e for e in g.out_edges(pid, port) if (pid, e.dst[0]) not in skip]
            if not edges:
                continue
            share = out if g.split_mode(pid, port) == "duplicate" else out / len(edges)
            for e in edges:
                vol[e.dst[0]] += share
    stages = tuple(StageHint(pid, g.pellet(pid).latency_hint,
                             g.pellet(pid).selectivity_hint if g.pellet(pid).selectivity_hint is not None else 1.0)
                   for pid in order)
    return PipelineProfile(stages, m1=rate * t, t=t, m=tuple(vol[pid] for pid in order), **kw)


@dataclass(frozen=True)
class Allocation:
    pellet: str
    instances: int
    cores: int


def static_lookahead_allocate(profile: PipelineProfile, floor: int = 0) -> list[Allocation]:
    """Instances ``P_i = ceil(l_i m_i / (t + eps))`` and cores
    ``C_i = ceil(P_i / alpha)``; ``floor`` lifts idle stages (``m_i = 0``)
    to a minimum core count."""
    out = []
    horizon = profile.t + profile.epsilon
    for stage, m in zip(profile.stages, profile.volumes()):
        # round to suppress float noise such as 3.0000000000000004
        p = math.ceil(round(stage.latency * m / horizon, 9))
        c = math.ceil(p / profile.alpha)
        out.append(Allocation(stage.pellet, p, max(c, floor)))
    return out


@dataclass
class ControllerParams:
    tau1: float = 0.1
    tau2: float | None = None  # defaults to -tau1
    interval: float = 1.0
    max_cores: int = 8
    rate_band: float = 0.25
    stabilize_band: float = 0.1
    queue_threshold: float = 10
    guard: str = "literal"  # literal | core

    def __post_init__(self):
        if self.tau2 is None:
            self.tau2 = -self.tau1
        if not self.tau1 > 0:
            raise AdaptationError("tau1 must be > 0")
        if self.tau2 > 0:
            raise AdaptationError("tau2 must be <= 0")
        if not self.interval > 0:
            raise AdaptationError("interval must be > 0")
        if self.max_cores < 1:
            raise AdaptationError("max_cores must be >= 1")
        if self.guard not in ("literal", "core"):
            raise AdaptationError(f"unknown guard {self.guard!r}")

    @classmethod
    def for_rate(cls, expected_rate: float | None = None, **kw) -> "ControllerParams":
        """Defaults with ``tau1 = 0.1 x expected rate`` (1 msg/s if unknown)."""
        base = expected_rate if expected_rate else 1.0
        kw.setdefault("tau1", 0.1 * base)
        return cls(**kw)


def rate_surplus(m) -> float | None:
    """``D - N/L``: arrival rate minus service capacity. None while a
    running flake has no latency sample."""
    if m.N == 0:
        return float(m.D)
    if not m.L:
        return None
    return m.D - m.N / m.L


def dynamic_step(m, p: ControllerParams, alpha: int = 4) -> int:
    delta = rate_surplus(m)
    if delta is None:
        return 0
    cores = getattr(m, "cores", None)
    if cores is None:
        cores = math.ceil(m.N / alpha)
    if delta >= p.tau1:
        return 1 if cores < p.max_cores else 0
    if delta <= p.tau2:
        if m.N == 0:
            return 0
        if p.guard == "core":
            ok = m.D < (m.N - alpha) / m.L
        else:
            ok = delta < -(m.N - 1) / m.L
        if not ok:
            return 0
        floor = 0 if m.queue_length == 0 and m.D == 0 else 1
        return -1 if cores - 1 >= floor else 0
    return 0


@dataclass
class PelletControl:
    mode: str = STATIC_FOLLOW
    cores: int = 0
    delta: float | None = None
    core_seconds: float = 0.0
    decisions: int = 0


@dataclass
class ControllerState:
    pellets: dict[str, PelletControl] = field(default_factory=dict)

    def of(self, pellet: str) -> PelletControl:
        return self.pellets.setdefault(pellet, PelletControl())

    @property
    def core_seconds(self) -> float:
        return sum(pc.core_seconds for pc in self.pellets.values())


def _static_target(profile: PipelineProfile, pellet: str, m, now: float, ahead: float) -> int:
    alloc = {a.pellet: a.cores for a in static_lookahead_allocate(profile)}
    c = max(alloc.get(pellet, 1), 1)  # stages on the active path keep one core
    # the decision holds for the next interval, so look that far ahead
    if profile.in_burst(now) or profile.in_burst(now + ahead) or m.queue_length > 0:
        return c
    return 0


def hybrid_step(st: ControllerState, m, profile: PipelineProfile, p: ControllerParams,
                pellet: str, now: float, alpha: int | None = None) -> int:
    """Core target for ``pellet``.

    Follows the static allocation (dropping to 0 in the gaps once the queue
    is empty) until the observed rate strays from the hinted one by more
    than ``rate_band``; then runs the dynamic step until the rate is back
    within ``stabilize_band`` and the queue is short.
    """
    pc = st.of(pellet)
    hinted = profile.expected_rate(pellet)
    expected = hinted if profile.in_burst(now) else 0.0
    scale = hinted if hinted > 0 else 1.0
    deviation = abs(m.D - expected) / scale
    if pc.mode == STATIC_FOLLOW and deviation > p.rate_band:
        pc.mode = DYNAMIC_ACTIVE
        logger.debug("%s: dynamic takeover at %.1f (deviation %.2f)", pellet, now, deviation)
    elif pc.mode == DYNAMIC_ACTIVE and deviation < p.stabilize_band and m.queue_length < p.queue_threshold:
        pc.mode = STATIC_FOLLOW
        logger.debug("%s: back to static at %.1f", pellet, now)
    if pc.mode == STATIC_FOLLOW:
        return _static_target(profile, pellet, m, now, p.interval)
    step = dynamic_step(m, p, alpha or profile.alpha)
    return min(max(m.cores + step, 0), p.max_cores)


class Controller:
    """Periodic decision maker shared by the engine and the simulator."""

    def __init__(self, strategy: str, params: ControllerParams | None = None,
                 profile: PipelineProfile | None = None, pellets=None, alpha: int = 4):
        if strategy not in STRATEGIES:
            raise AdaptationError(f"unknown strategy {strategy!r}")
        if strategy in (STATIC, HYBRID) and profile is None:
            raise AdaptationError(f"{strategy} strategy needs a pipeline profile (latency/selectivity/rate hints)")
        self.strategy = strategy
        self.params = params or ControllerParams.for_rate(
            profile.expected_rate(profile.stages[0].pellet) if profile else None)
        self.profile = profile
        self.alpha = alpha
        self.state = ControllerState()
        self.pellets = list(pellets) if pellets is not None else (profile.pellets() if profile else [])
        self.log: list[tuple] = []

    def initial(self, pellet: str) -> int | None:
        """Allocation to apply before the first sample (None = leave as is)."""
        if self.strategy == DYNAMIC:
            return None
        if self.profile is None or pellet not in self.profile.pellets():
            return None
        alloc = {a.pellet: a.cores for a in static_lookahead_allocate(self.profile)}
        return max(alloc[pellet], 1)

    def decide(self, pellet: str, m, now: float) -> int:
        pc = self.state.of(pellet)
        pc.delta = rate_surplus(m)
        if self.strategy == STATIC:
            target = self.initial(pellet)
            target = m.cores if target is None else target
            pc.mode = STATIC_FOLLOW
        elif self.strategy == DYNAMIC:
            pc.mode = DYNAMIC_ACTIVE
            target = min(max(m.cores + dynamic_step(m, self.params, self.alpha), 0), self.params.max_cores)
        elif self.profile is not None and pellet in self.profile.pellets():
            target = hybrid_step(self.state, m, self.profile, self.params, pellet, now, self.alpha)
        else:
            pc.mode = DYNAMIC_ACTIVE
            target = min(max(m.cores + dynamic_step(m, self.params, self.alpha), 0), self.params.max_cores)
        pc.cores = target
        pc.decisions += 1
        return target

    def account(self, pellet: str, cores: int, dt: float) -> float:
        pc = self.state.of(pellet)
        pc.core_seconds += cores * dt
        return pc.core_seconds

    def record(self, now: float, pellet: str, m, cores: int) -> None:
        pc = self.state.of(pellet)
        self.log.append((now, pellet, self.strategy, pc.mode, m.D, m.L, m.N, pc.delta, cores, pc.core_seconds))

    def log_rows(self) -> list[str]:
        rows = []
        for now, pellet, strat, mode, D, L, N, delta, cores, cs in self.log:
            lat = "" if L is None else f"{L:.6f}"
            dl = "" if delta is None else f"{delta:.4f}"
            rows.append(f"{now:.3f},{pellet},{strat},{mode},{D:.4f},{lat},{N},{dl},{cores},{cs:.3f}")
        return rows

    def write_log(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(DECISION_HEADER + "\n")
            for row in self.log_rows():
                fh.write(row + "\n")


class ControllerTask:
    """Runs a :class:`Controller` against a live dataflow on a timer thread."""

    def __init__(self, df, controller: Controller):
        self.df = df
        self.controller = controller
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        self.set_cores_calls: list[tuple[float, str, int]] = []
        self._lock = threading.Lock()

    def _apply(self, pellet: str, cores: int) -> None:
        try:
            self.df.set_cores(pellet, cores)
        except Exception as exc:  # capacity or shutdown races
            logger.warning("set_cores(%s, %d) rejected: %s", pellet, cores, exc)
            return
        self.set_cores_calls.append((self.df.clock(), pellet, cores))

    def start(self) -> "ControllerTask":
        c = self.controller
        if not c.pellets:
            c.pellets = list(self.df.flakes)
        for pid in c.pellets:
            target = c.initial(pid)
            if target is not None:
                self._apply(pid, target)
        if self.df.mode == "threaded":
            self._thread = threading.Thread(target=self._loop, daemon=True, name="controller")
            self._thread.start()
        return self

    def tick(self) -> None:
        """One control round; called by the timer or directly in
        deterministic mode."""
        c = self.controller
        dt = c.params.interval
        now = self.df.clock()
        with self._lock:
            for pid in c.pellets:
                if pid not in self.df.flakes:
                    continue
                m = self.df.metrics(pid)
                c.account(pid, m.cores, dt)
                target = c.decide(pid, m, now)
                if c.strategy != STATIC and target != m.cores:
                    self._apply(pid, target)
                c.record(now, pid, m, target)

    def _loop(self):
        while not self._stop.wait(self.controller.params.interval):
            if not self.df.running:
                break
            try:
                self.tick()
            except Exception:
                logger.exception("controller round failed")

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=5)


def apply_controller(df, strategy: str, params: ControllerParams | None = None,
                     profile: PipelineProfile | None = None, pellets=None) -> ControllerTask:
    controller = Controller(strategy, params, profile, pellets, alpha=df.alpha)
    return ControllerTask(df, controller).start()
